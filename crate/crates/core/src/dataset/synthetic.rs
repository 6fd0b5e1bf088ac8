//! Desk-scale stand-in for real fuzzy datasets.
//!
//! Each class has a geometric prototype. Certain images show one prototype;
//! fuzzy images alpha-blend two, and the blend weight becomes the soft truth.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{
    aggregate_soft_label, split_dataset, AnnotationRecord, DatasetItem, DatasetManifest,
    GrayImage, LabelMode, SoftLabel, Split,
};

const PROTOTYPES: [&str; 8] = [
    "disc", "cross", "triangle", "ring", "square", "diamond", "saltire", "bars",
];

/// Pixel noise standard deviation, as a fraction of the dynamic range.
const NOISE_SIGMA: f64 = 0.05;

pub fn prototype_names() -> &'static [&'static str] {
    &PROTOTYPES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub name: String,
    pub k: usize,
    pub n_images: usize,
    pub fuzzy_fraction: f64,
    pub ambiguity_range: (f64, f64),
    pub image_size: usize,
    pub annotators_per_image: usize,
    pub seed: u64,
    pub supervised_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            name: "synthetic".into(),
            k: 2,
            n_images: 1000,
            fuzzy_fraction: 0.2,
            ambiguity_range: (0.2, 0.8),
            image_size: 32,
            annotators_per_image: 10,
            seed: 0,
            supervised_fraction: 0.1,
            val_fraction: 0.2,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.k < 2 || self.k > PROTOTYPES.len() {
            return bad(format!("k must be in [2, {}], got {}", PROTOTYPES.len(), self.k));
        }
        if self.n_images == 0 {
            return bad("n_images must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.fuzzy_fraction) {
            return bad(format!("fuzzy_fraction {} outside [0, 1]", self.fuzzy_fraction));
        }
        let (lo, hi) = self.ambiguity_range;
        if !(lo > 0.0 && hi < 1.0 && lo <= hi) {
            return bad(format!("ambiguity_range ({lo}, {hi}) must lie within (0, 1)"));
        }
        if self.image_size < 4 {
            return bad("image_size must be at least 4".into());
        }
        if self.annotators_per_image == 0 {
            return bad("annotators_per_image must be >= 1".into());
        }
        Ok(())
    }

    pub fn n_fuzzy(&self) -> usize {
        (self.fuzzy_fraction * self.n_images as f64).round() as usize
    }
}

/// Renders prototype `class` at `size` x `size`; shape pixels are 1, background 0.
pub fn render_prototype(class: usize, size: usize) -> GrayImage {
    let mut img = GrayImage::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            // pixel centre in [-1, 1]
            let u = (2.0 * x as f64 + 1.0) / size as f64 - 1.0;
            let v = (2.0 * y as f64 + 1.0) / size as f64 - 1.0;
            if inside(class, u, v) {
                img.pixels[y * size + x] = 1.0;
            }
        }
    }
    img
}

fn inside(class: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match class {
        0 => r < 0.6,
        1 => (u.abs() < 0.2 && v.abs() < 0.75) || (v.abs() < 0.2 && u.abs() < 0.75),
        2 => v > -0.6 && v < 0.6 && u.abs() < 0.7 * (v + 0.6) / 1.2,
        3 => r > 0.45 && r < 0.75,
        4 => u.abs() < 0.55 && v.abs() < 0.55,
        5 => u.abs() + v.abs() < 0.75,
        6 => ((u - v).abs() < 0.25 || (u + v).abs() < 0.25) && u.abs() < 0.75 && v.abs() < 0.75,
        7 => ((v + 1.0) * 2.5).floor() as i64 % 2 == 0 && u.abs() < 0.75,
        _ => unreachable!("class checked against prototype count"),
    }
}

/// Generates images plus a manifest under `out_dir` and returns the manifest.
///
/// Exactly `round(fuzzy_fraction * n_images)` items are blends. Annotations
/// are drawn independently from each item's soft truth, so `gt_soft` is a
/// noisy estimate of it.
pub fn generate_synthetic(config: &SyntheticConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let prototypes: Vec<GrayImage> = (0..config.k)
        .map(|c| render_prototype(c, config.image_size))
        .collect();

    let mut fuzzy = vec![false; config.n_images];
    fuzzy[..config.n_fuzzy()].iter_mut().for_each(|f| *f = true);
    fuzzy.shuffle(&mut rng);

    let width = config.n_images.to_string().len().max(5);
    let mut items = Vec::with_capacity(config.n_images);
    for (i, &is_fuzzy) in fuzzy.iter().enumerate() {
        let id = format!("img_{i:0width$}");
        let (truth, pixels) = if is_fuzzy {
            let a = rng.random_range(0..config.k);
            let mut b = rng.random_range(0..config.k - 1);
            if b >= a {
                b += 1;
            }
            let (lo, hi) = config.ambiguity_range;
            let alpha = if lo == hi { lo } else { rng.random_range(lo..hi) };
            let mut probs = vec![0.0; config.k];
            probs[a] = 1.0 - alpha;
            probs[b] = alpha;
            let pixels: Vec<f64> = prototypes[a]
                .pixels
                .iter()
                .zip(&prototypes[b].pixels)
                .map(|(pa, pb)| (1.0 - alpha) * pa + alpha * pb)
                .collect();
            (SoftLabel::new(probs)?, pixels)
        } else {
            let c = rng.random_range(0..config.k);
            (SoftLabel::one_hot(c, config.k)?, prototypes[c].pixels.clone())
        };
        let pixels = pixels
            .into_iter()
            .map(|p| (p + noise.sample(&mut rng)).clamp(0.0, 1.0))
            .collect();
        let img = GrayImage::new(config.image_size, config.image_size, pixels);
        let rel = PathBuf::from("images").join(format!("{id}.png"));
        img.save_png(&out_dir.join(&rel))?;

        let annotations: Vec<AnnotationRecord> = (0..config.annotators_per_image)
            .map(|a| AnnotationRecord::new(id.clone(), format!("sim-{a}"), truth.sample(&mut rng)))
            .collect();
        let gt_soft = Some(aggregate_soft_label(&annotations, config.k)?);
        items.push(DatasetItem {
            image_id: id,
            image_path: rel,
            annotations,
            split: Split::Unlabeled,
            gt_soft,
            soft_truth: Some(truth),
        });
    }

    let manifest = DatasetManifest {
        name: config.name.clone(),
        num_classes: config.k,
        class_names: PROTOTYPES[..config.k].iter().map(|s| s.to_string()).collect(),
        items,
        label_mode: LabelMode::Sampled,
        root: out_dir.to_path_buf(),
    };
    let manifest = match split_dataset(
        &manifest,
        config.supervised_fraction,
        config.val_fraction,
        config.seed,
    ) {
        Ok(m) => m,
        // too small to split; leave everything unlabeled but annotated
        Err(Error::EmptySplit(_)) => manifest,
        Err(e) => return Err(e),
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}
