use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric;

use super::AnnotationRecord;

/// Default tolerance for [`SoftLabel::is_fuzzy`].
pub const FUZZY_TOL: f64 = 1e-9;

/// A probability distribution over `k` classes.
///
/// This is both the unknown per-image label distribution and its estimate
/// from a finite number of annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SoftLabel {
    probs: Vec<f64>,
}

impl SoftLabel {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidSoftLabel("empty".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidSoftLabel(format!("entry {p} outside [0, 1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidSoftLabel(format!("entries sum to {sum}")));
        }
        Ok(SoftLabel { probs })
    }

    pub fn one_hot(class: usize, k: usize) -> Result<Self> {
        if class >= k {
            return Err(Error::ClassOutOfRange {
                class,
                num_classes: k,
            });
        }
        let mut probs = vec![0.0; k];
        probs[class] = 1.0;
        Ok(SoftLabel { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// `1 - max_i l_i`.
    pub fn ambiguity(&self) -> f64 {
        1.0 - numeric::max(&self.probs)
    }

    /// True iff at least two entries exceed `tol`.
    pub fn is_fuzzy(&self, tol: f64) -> bool {
        self.probs.iter().filter(|&&p| p > tol).count() >= 2
    }

    /// Majority class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        numeric::argmax(&self.probs)
    }

    /// Draws a hard class with probability `probs[c]`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (c, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc && p > 0.0 {
                return c;
            }
        }
        // rounding left `u` past the cumulative sum; fall back to the last class with mass
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

impl TryFrom<Vec<f64>> for SoftLabel {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        SoftLabel::new(probs)
    }
}

impl From<SoftLabel> for Vec<f64> {
    fn from(label: SoftLabel) -> Self {
        label.probs
    }
}

/// Averages the one-hot annotations of a single image.
pub fn aggregate_soft_label(annotations: &[AnnotationRecord], k: usize) -> Result<SoftLabel> {
    if annotations.is_empty() {
        return Err(Error::NoAnnotations);
    }
    let mut counts = vec![0usize; k];
    for a in annotations {
        if a.class_index >= k {
            return Err(Error::ClassOutOfRange {
                class: a.class_index,
                num_classes: k,
            });
        }
        counts[a.class_index] += 1;
    }
    let n = annotations.len() as f64;
    Ok(SoftLabel {
        probs: counts.into_iter().map(|c| c as f64 / n).collect(),
    })
}
