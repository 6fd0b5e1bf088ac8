//! Datasets found under the content root, with their proposal files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path, PathBuf};

use dc3::dataset::{load_manifest, DatasetManifest, FUZZY_TOL};
use dc3::proposals::{ProposalMode, ProposalSet};
use serde::Serialize;

use crate::error::ServiceError;

pub const MANIFEST_FILE: &str = "manifest.json";
/// Proposals for a dataset live at `<dataset dir>/proposals/<mode>.json`.
pub const PROPOSALS_DIR: &str = "proposals";

pub struct Dataset {
    pub manifest: DatasetManifest,
    pub dir: PathBuf,
    pub proposals: BTreeMap<ProposalMode, ProposalSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetInfo {
    pub name: String,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub n_images: usize,
    /// Images whose ground-truth soft label is fuzzy, when known.
    pub n_fuzzy: usize,
    pub proposal_modes: Vec<ProposalMode>,
}

impl Dataset {
    pub fn info(&self) -> DatasetInfo {
        let m = &self.manifest;
        DatasetInfo {
            name: m.name.clone(),
            num_classes: m.num_classes,
            class_names: m.class_names.clone(),
            n_images: m.items.len(),
            n_fuzzy: m
                .items
                .iter()
                .filter(|i| i.gt_soft.as_ref().is_some_and(|g| g.is_fuzzy(FUZZY_TOL)))
                .count(),
            proposal_modes: self.proposals.keys().copied().collect(),
        }
    }
}

/// Loads `dir/manifest.json` and any proposal files next to it.
fn load_dataset(dir: &Path) -> Result<Dataset, ServiceError> {
    let manifest = load_manifest(&dir.join(MANIFEST_FILE))?;
    let mut proposals = BTreeMap::new();
    for mode in [ProposalMode::Ssl, ProposalMode::Dc3] {
        let path = dir.join(PROPOSALS_DIR).join(format!("{mode}.json"));
        if !path.exists() {
            continue;
        }
        let set = ProposalSet::load(&path)?;
        let mismatch = |reason: String| ServiceError::ProposalMismatch {
            path: path.clone(),
            dataset: manifest.name.clone(),
            reason,
        };
        if set.mode != mode {
            return Err(mismatch(format!("file holds {} proposals", set.mode)));
        }
        if let Some(missing) = manifest.items.iter().find(|i| set.image(&i.image_id).is_none()) {
            return Err(mismatch(format!("no entry for image {}", missing.image_id)));
        }
        proposals.insert(mode, set);
    }
    Ok(Dataset {
        manifest,
        dir: dir.to_path_buf(),
        proposals,
    })
}

/// The root itself and its immediate subdirectories, if they hold a
/// manifest. Names must be unique.
pub fn discover(root: &Path) -> Result<Vec<Dataset>, ServiceError> {
    let mut dirs = vec![root.to_path_buf()];
    let mut subdirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| ServiceError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    dirs.extend(subdirs);
    let mut out: Vec<Dataset> = Vec::new();
    for dir in dirs {
        if !dir.join(MANIFEST_FILE).exists() {
            continue;
        }
        let ds = load_dataset(&dir)?;
        if out.iter().any(|d| d.manifest.name == ds.manifest.name) {
            return Err(ServiceError::DuplicateDataset(ds.manifest.name));
        }
        out.push(ds);
    }
    Ok(out)
}

/// URL path of a file under `root`, served from `/images`.
pub fn image_url(root: &Path, file: &Path) -> Option<String> {
    let rel = file.strip_prefix(root).ok()?;
    let mut url = String::from("/images");
    for c in rel.components() {
        match c {
            Component::Normal(s) => {
                url.push('/');
                url.push_str(s.to_str()?);
            }
            Component::CurDir => {}
            _ => return None,
        }
    }
    Some(url)
}
