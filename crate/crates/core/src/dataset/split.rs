use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{DatasetManifest, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub labeled: usize,
    pub unlabeled: usize,
    pub validation: usize,
}

impl SplitCounts {
    pub fn of(manifest: &DatasetManifest) -> Self {
        SplitCounts {
            labeled: manifest.count(Split::Labeled),
            unlabeled: manifest.count(Split::Unlabeled),
            validation: manifest.count(Split::Validation),
        }
    }
}

/// Reassigns splits.
///
/// With `N` items, `round(val_fraction * N)` go to validation and
/// `round(supervised_fraction * N * (1 - val_fraction))` become labeled; the
/// rest are unlabeled. Labeled and validation items are drawn only from items
/// that carry annotations.
pub fn split_dataset(
    manifest: &DatasetManifest,
    supervised_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    let open_unit = |x: f64| x > 0.0 && x < 1.0;
    if !open_unit(supervised_fraction) {
        return Err(Error::InvalidConfig(format!(
            "supervised_fraction must be in (0, 1), got {supervised_fraction}"
        )));
    }
    if !open_unit(val_fraction) {
        return Err(Error::InvalidConfig(format!(
            "val_fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    if supervised_fraction + val_fraction > 1.0 {
        return Err(Error::InvalidConfig(
            "supervised_fraction + val_fraction must be <= 1".into(),
        ));
    }

    let n = manifest.items.len();
    let n_val = (val_fraction * n as f64).round() as usize;
    let n_lab = (supervised_fraction * n as f64 * (1.0 - val_fraction)).round() as usize;
    if n_val == 0 {
        return Err(Error::EmptySplit("validation"));
    }
    if n_lab == 0 {
        return Err(Error::EmptySplit("labeled"));
    }
    if n_val + n_lab >= n {
        return Err(Error::EmptySplit("unlabeled"));
    }

    let mut annotated: Vec<usize> = (0..n)
        .filter(|&i| !manifest.items[i].annotations.is_empty())
        .collect();
    if annotated.len() < n_val + n_lab {
        return Err(Error::InvalidConfig(format!(
            "{} annotated items cannot fill {n_val} validation + {n_lab} labeled slots",
            annotated.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    annotated.shuffle(&mut rng);

    let mut out = manifest.clone();
    for item in &mut out.items {
        item.split = Split::Unlabeled;
    }
    for &i in &annotated[..n_val] {
        out.items[i].split = Split::Validation;
    }
    for &i in &annotated[n_val..n_val + n_lab] {
        out.items[i].split = Split::Labeled;
    }
    Ok(out)
}
