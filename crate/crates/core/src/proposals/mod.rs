//! Annotation proposals from model predictions, annotation sessions,
//! consistency and speed-up reporting, and a simulated annotator.
//!
//! Consistency is the mean pairwise exact agreement between an annotator's
//! repetitions over the same image set.

mod session;
mod simulate;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{load_manifest, DatasetManifest, GrayImage};
use crate::error::{Error, Result};
use crate::model::{route_all_certain, route_prediction, Checkpoint, Dc3Model, Route};
use crate::numeric::argmax;

pub use session::{
    build_report, consistency, mean_time_per_image, read_session_log, speed_up, write_session_log, AnnotatorSummary,
    AnnotationSession, ConsistencyReport, ModeSummary, SessionHeader,
};
pub use simulate::{simulate_annotator, AnnotatorBehavior};

/// What an annotator is shown alongside each image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalMode {
    None,
    Ssl,
    Dc3,
}

impl ProposalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ProposalMode::None => "none",
            ProposalMode::Ssl => "ssl",
            ProposalMode::Dc3 => "dc3",
        }
    }
}

impl fmt::Display for ProposalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProposalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ProposalMode::None),
            "ssl" => Ok(ProposalMode::Ssl),
            "dc3" => Ok(ProposalMode::Dc3),
            other => Err(Error::MissingMode(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalKind {
    Certain,
    Fuzzy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageProposal {
    pub id: String,
    pub kind: ProposalKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<usize>,
    pub p_a: f64,
}

/// A group of fuzzy-routed images shown together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterProposal {
    pub id: usize,
    pub members: Vec<String>,
    /// Advisory text; editable by humans.
    pub description: String,
    /// The class with the highest mean `p_n` over the members.
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub manifest: String,
    pub mode: ProposalMode,
    pub images: Vec<ImageProposal>,
    pub clusters: Vec<ClusterProposal>,
}

impl ProposalSet {
    pub fn image(&self, id: &str) -> Option<&ImageProposal> {
        self.images.iter().find(|p| p.id == id)
    }

    pub fn cluster(&self, id: usize) -> Option<&ClusterProposal> {
        self.clusters.iter().find(|c| c.id == id)
    }

    /// The class suggested for an image: its own class when certain, its
    /// cluster's class when fuzzy.
    pub fn proposed_class(&self, id: &str) -> Option<usize> {
        let p = self.image(id)?;
        match p.kind {
            ProposalKind::Certain => p.class,
            ProposalKind::Fuzzy => self.cluster(p.cluster?).map(|c| c.class),
        }
    }

    /// Lookup table from image id to proposed class.
    pub fn proposed_classes(&self) -> BTreeMap<&str, usize> {
        let by_cluster: BTreeMap<usize, usize> = self.clusters.iter().map(|c| (c.id, c.class)).collect();
        self.images
            .iter()
            .filter_map(|p| {
                let class = match p.kind {
                    ProposalKind::Certain => p.class,
                    ProposalKind::Fuzzy => p.cluster.and_then(|c| by_cluster.get(&c).copied()),
                };
                class.map(|c| (p.id.as_str(), c))
            })
            .collect()
    }

    /// Checks that every image appears once, clusters partition the fuzzy
    /// images and each entry's optional fields match its kind.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for p in &self.images {
            if seen.insert(p.id.as_str(), p).is_some() {
                return Err(Error::InvalidConfig(format!("image {} proposed twice", p.id)));
            }
            let ok = match p.kind {
                ProposalKind::Certain => p.class.is_some() && p.cluster.is_none(),
                ProposalKind::Fuzzy => p.cluster.is_some() && p.class.is_none(),
            };
            if !ok {
                return Err(Error::InvalidConfig(format!("image {} has fields inconsistent with its kind", p.id)));
            }
        }
        let mut members = 0;
        for c in &self.clusters {
            for m in &c.members {
                match seen.get(m.as_str()) {
                    Some(p) if p.kind == ProposalKind::Fuzzy && p.cluster == Some(c.id) => members += 1,
                    _ => return Err(Error::InvalidConfig(format!("cluster {} lists {m} wrongly", c.id))),
                }
            }
        }
        let fuzzy = self.images.iter().filter(|p| p.kind == ProposalKind::Fuzzy).count();
        if members != fuzzy {
            return Err(Error::InvalidConfig("clusters do not cover every fuzzy image".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

fn describe(mean_p: &[f64], class_names: &[String]) -> String {
    let mut order: Vec<usize> = (0..mean_p.len()).collect();
    order.sort_by(|&a, &b| mean_p[b].total_cmp(&mean_p[a]).then(a.cmp(&b)));
    let name = |c: usize| class_names.get(c).cloned().unwrap_or_else(|| format!("class {c}"));
    match order.as_slice() {
        [a, b, ..] => format!(
            "between {} ({:.2}) and {} ({:.2})",
            name(*a),
            mean_p[*a],
            name(*b),
            mean_p[*b]
        ),
        [a] => name(*a),
        [] => String::new(),
    }
}

/// Routes every manifest image through `model`. In `ssl` mode every image
/// is certain; `none` yields an empty proposal list.
pub fn generate_proposals(
    model: &Dc3Model,
    manifest: &DatasetManifest,
    images: &[GrayImage],
    mode: ProposalMode,
) -> Result<ProposalSet> {
    if images.len() != manifest.items.len() {
        return Err(Error::LengthMismatch {
            expected: manifest.items.len(),
            actual: images.len(),
        });
    }
    let mut set = ProposalSet {
        manifest: manifest.name.clone(),
        mode,
        images: Vec::new(),
        clusters: Vec::new(),
    };
    if mode == ProposalMode::None {
        return Ok(set);
    }
    let inputs: Vec<&[f64]> = images.iter().map(|i| i.pixels.as_slice()).collect();
    let outputs = model.predict(&inputs);
    let mut clusters: BTreeMap<usize, (Vec<String>, Vec<f64>)> = BTreeMap::new();
    for (item, o) in manifest.items.iter().zip(&outputs) {
        let pred = match mode {
            ProposalMode::Dc3 => route_prediction(o),
            _ => route_all_certain(o),
        };
        let entry = match pred.route {
            Route::Certain { class } => ImageProposal {
                id: item.image_id.clone(),
                kind: ProposalKind::Certain,
                class: Some(class),
                cluster: None,
                p_a: pred.p_a,
            },
            Route::Fuzzy { cluster } => {
                let (members, sum) = clusters
                    .entry(cluster)
                    .or_insert_with(|| (Vec::new(), vec![0.0; model.head.k]));
                members.push(item.image_id.clone());
                for (s, p) in sum.iter_mut().zip(&o.p_n) {
                    *s += p;
                }
                ImageProposal {
                    id: item.image_id.clone(),
                    kind: ProposalKind::Fuzzy,
                    class: None,
                    cluster: Some(cluster),
                    p_a: pred.p_a,
                }
            }
        };
        set.images.push(entry);
    }
    set.clusters = clusters
        .into_iter()
        .map(|(id, (members, sum))| {
            let n = members.len() as f64;
            let mean_p: Vec<f64> = sum.iter().map(|s| s / n).collect();
            ClusterProposal {
                id,
                description: describe(&mean_p, &manifest.class_names),
                class: argmax(&mean_p),
                members,
            }
        })
        .collect();
    Ok(set)
}

/// File-level wrapper: loads the checkpoint and manifest, then proposes.
pub fn generate_proposals_from_files(checkpoint: &Path, manifest: &Path, mode: ProposalMode) -> Result<ProposalSet> {
    let model = Checkpoint::load(checkpoint)?.into_model()?;
    let m = load_manifest(manifest)?;
    if m.num_classes != model.head.k {
        return Err(Error::InvalidCheckpoint(format!(
            "checkpoint has {} classes, manifest {}",
            model.head.k, m.num_classes
        )));
    }
    let images = m.load_images()?;
    let mut set = generate_proposals(&model, &m, &images, mode)?;
    set.manifest = manifest.display().to_string();
    Ok(set)
}
