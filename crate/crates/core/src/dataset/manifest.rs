//! JSON manifest format.
//!
//! ```json
//! {
//!   "name": "toy", "num_classes": 2, "class_names": ["disc", "cross"],
//!   "label_mode": "sampled",
//!   "items": [
//!     {"id": "img_0", "path": "images/img_0.png", "split": "labeled",
//!      "annotations": [{"annotator": "a1", "class": 0, "repetition": 1}]}
//!   ]
//! }
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{
    aggregate_soft_label, AnnotationRecord, DatasetItem, DatasetManifest, LabelMode, SoftLabel,
    Split,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub name: String,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    #[serde(default)]
    pub label_mode: LabelMode,
    pub items: Vec<ItemEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemEntry {
    pub id: String,
    pub path: PathBuf,
    pub split: Split,
    #[serde(default)]
    pub annotations: Vec<AnnotationEntry>,
    /// Generating distribution for synthetic items.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_truth: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub annotator: String,
    pub class: usize,
    #[serde(default = "default_repetition")]
    pub repetition: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
}

fn default_repetition() -> u32 {
    1
}

/// Reads a manifest without checking invariants.
pub fn read_manifest_file(path: &Path) -> Result<ManifestFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Checks every manifest invariant and lists all violations, naming items.
pub fn validate_manifest(file: &ManifestFile) -> Vec<String> {
    let mut errors = Vec::new();
    let k = file.num_classes;
    if k < 2 {
        errors.push(format!("num_classes must be >= 2, got {k}"));
    }
    if file.class_names.len() != k {
        errors.push(format!(
            "class_names has {} entries, num_classes is {k}",
            file.class_names.len()
        ));
    }
    let mut seen = HashSet::new();
    for item in &file.items {
        if !seen.insert(item.id.as_str()) {
            errors.push(format!("duplicate image id '{}'", item.id));
        }
        if item.path.is_absolute() {
            errors.push(format!("item '{}': image path must be relative", item.id));
        }
        for a in &item.annotations {
            if a.class >= k {
                errors.push(format!(
                    "item '{}': annotation by '{}' has class {} (num_classes {k})",
                    item.id, a.annotator, a.class
                ));
            }
            if a.repetition < 1 {
                errors.push(format!(
                    "item '{}': annotation by '{}' has repetition 0",
                    item.id, a.annotator
                ));
            }
        }
        if item.annotations.is_empty() && item.split != Split::Unlabeled {
            errors.push(format!(
                "item '{}': split {:?} requires at least one annotation",
                item.id, item.split
            ));
        }
        if let Some(truth) = &item.soft_truth {
            if let Err(e) = SoftLabel::new(truth.clone()) {
                errors.push(format!("item '{}': soft_truth: {e}", item.id));
            } else if truth.len() != k {
                errors.push(format!("item '{}': soft_truth has wrong length", item.id));
            }
        }
    }
    errors
}

impl DatasetManifest {
    /// Builds the in-memory manifest, recomputing `gt_soft` from annotations.
    pub fn from_file(file: ManifestFile, root: PathBuf) -> Result<Self> {
        let errors = validate_manifest(&file);
        if !errors.is_empty() {
            return Err(Error::InvalidManifest(errors));
        }
        let k = file.num_classes;
        let items = file
            .items
            .into_iter()
            .map(|entry| {
                let annotations: Vec<AnnotationRecord> = entry
                    .annotations
                    .into_iter()
                    .map(|a| AnnotationRecord {
                        image_id: entry.id.clone(),
                        annotator_id: a.annotator,
                        class_index: a.class,
                        timestamp: a.timestamp,
                        duration: a.duration,
                        repetition: a.repetition,
                    })
                    .collect();
                let gt_soft = if annotations.is_empty() {
                    None
                } else {
                    Some(aggregate_soft_label(&annotations, k)?)
                };
                let soft_truth = entry.soft_truth.map(SoftLabel::new).transpose()?;
                Ok(DatasetItem {
                    image_id: entry.id,
                    image_path: entry.path,
                    annotations,
                    split: entry.split,
                    gt_soft,
                    soft_truth,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DatasetManifest {
            name: file.name,
            num_classes: k,
            class_names: file.class_names,
            items,
            label_mode: file.label_mode,
            root,
        })
    }

    pub fn to_file(&self) -> ManifestFile {
        ManifestFile {
            name: self.name.clone(),
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
            label_mode: self.label_mode,
            items: self
                .items
                .iter()
                .map(|it| ItemEntry {
                    id: it.image_id.clone(),
                    path: it.image_path.clone(),
                    split: it.split,
                    annotations: it
                        .annotations
                        .iter()
                        .map(|a| AnnotationEntry {
                            annotator: a.annotator_id.clone(),
                            class: a.class_index,
                            repetition: a.repetition,
                            timestamp: a.timestamp,
                            duration: a.duration,
                        })
                        .collect(),
                    soft_truth: it.soft_truth.as_ref().map(|s| s.probs().to_vec()),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file()).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Reads and validates a manifest; image paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = read_manifest_file(path)?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    DatasetManifest::from_file(file, root)
}
