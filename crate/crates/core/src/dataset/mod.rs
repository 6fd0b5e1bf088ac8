//! Soft-label data model, manifests, splits, label modes and the synthetic
//! fuzzy-image generator.
//!
//! Every image carries a list of hard annotations. Their average is the
//! estimated soft label (`gt_soft`), which is always recomputed from the
//! annotations when a manifest is loaded.

mod images;
mod manifest;
mod soft_label;
mod split;
mod synthetic;

use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use images::GrayImage;
pub use manifest::{
    load_manifest, read_manifest_file, validate_manifest, AnnotationEntry, ItemEntry,
    ManifestFile,
};
pub use soft_label::{aggregate_soft_label, SoftLabel, FUZZY_TOL};
pub use split::{split_dataset, SplitCounts};
pub use synthetic::{generate_synthetic, prototype_names, SyntheticConfig};

/// One hard annotation of one image by one annotator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    #[serde(rename = "image")]
    pub image_id: String,
    #[serde(rename = "annotator")]
    pub annotator_id: String,
    #[serde(rename = "class")]
    pub class_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    pub repetition: u32,
}

impl AnnotationRecord {
    pub fn new(image_id: impl Into<String>, annotator_id: impl Into<String>, class: usize) -> Self {
        AnnotationRecord {
            image_id: image_id.into(),
            annotator_id: annotator_id.into(),
            class_index: class,
            timestamp: None,
            duration: None,
            repetition: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
    Validation,
}

/// How a training label is derived from an item's estimated soft label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// A hard label sampled from `gt_soft`.
    #[default]
    Sampled,
    /// The majority class of `gt_soft`.
    Argmax,
    /// The majority class, but fuzzy items are dropped from training.
    CertainOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub image_id: String,
    /// Relative to the manifest's directory.
    pub image_path: PathBuf,
    pub annotations: Vec<AnnotationRecord>,
    pub split: Split,
    /// Average of `annotations`; `None` when the item has none.
    pub gt_soft: Option<SoftLabel>,
    /// The generating distribution, known only for synthetic data.
    pub soft_truth: Option<SoftLabel>,
}

impl DatasetItem {
    /// Training class under `mode`, or `None` when the item is excluded.
    pub fn training_label<R: Rng + ?Sized>(&self, mode: LabelMode, rng: &mut R) -> Option<usize> {
        let gt = self.gt_soft.as_ref()?;
        apply_label_mode(gt, mode, rng)
    }
}

/// Reduces a soft label to a training class (or exclusion) under `mode`.
pub fn apply_label_mode<R: Rng + ?Sized>(
    gt_soft: &SoftLabel,
    mode: LabelMode,
    rng: &mut R,
) -> Option<usize> {
    match mode {
        LabelMode::Sampled => Some(gt_soft.sample(rng)),
        LabelMode::Argmax => Some(gt_soft.argmax()),
        LabelMode::CertainOnly => (!gt_soft.is_fuzzy(FUZZY_TOL)).then(|| gt_soft.argmax()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub items: Vec<DatasetItem>,
    pub label_mode: LabelMode,
    /// Directory that image paths are resolved against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn items_in(&self, split: Split) -> impl Iterator<Item = &DatasetItem> {
        self.items.iter().filter(move |it| it.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.items_in(split).count()
    }

    pub fn resolve(&self, item: &DatasetItem) -> PathBuf {
        self.root.join(&item.image_path)
    }

    /// Loads every item's image, in item order.
    pub fn load_images(&self) -> crate::Result<Vec<GrayImage>> {
        self.items
            .iter()
            .map(|it| GrayImage::load_png(&self.resolve(it)))
            .collect()
    }

    pub fn item(&self, image_id: &str) -> Option<&DatasetItem> {
        self.items.iter().find(|it| it.image_id == image_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn label_mode_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gt = SoftLabel::new(vec![0.6, 0.4]).unwrap();
        assert_eq!(apply_label_mode(&gt, LabelMode::Argmax, &mut rng), Some(0));
        assert_eq!(apply_label_mode(&gt, LabelMode::CertainOnly, &mut rng), None);
        let certain = SoftLabel::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(
            apply_label_mode(&certain, LabelMode::CertainOnly, &mut rng),
            Some(0)
        );
        assert_eq!(
            apply_label_mode(&certain, LabelMode::Sampled, &mut rng),
            Some(0)
        );
    }

    #[test]
    fn argmax_mode_breaks_ties_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gt = SoftLabel::new(vec![0.25, 0.375, 0.375]).unwrap();
        assert_eq!(apply_label_mode(&gt, LabelMode::Argmax, &mut rng), Some(1));
    }

    proptest::proptest! {
        #[test]
        fn certain_only_never_labels_fuzzy(a in 0.01f64..0.99, b in 0.0f64..1.0, seed in 0u64..100) {
            let rest = 1.0 - a;
            let gt = SoftLabel::new(vec![a, rest * b, rest * (1.0 - b)]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            proptest::prop_assert_eq!(apply_label_mode(&gt, LabelMode::CertainOnly, &mut rng), None);
        }
    }
}
