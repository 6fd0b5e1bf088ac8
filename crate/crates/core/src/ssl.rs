//! Vanilla semi-supervised baselines.
//!
//! Each algorithm yields per-sample unlabeled losses (so they can be scaled
//! per image) plus their gradients with respect to the classification
//! logits. Supervised cross-entropy on the labeled batch is shared.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::SslContribution;
use crate::model::ModelOutputs;
use crate::numeric::{argmax, max, softmax_backward, LOG_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslName {
    PseudoLabel,
    PiModel,
    MeanTeacher,
}

impl SslName {
    pub fn as_str(self) -> &'static str {
        match self {
            SslName::PseudoLabel => "pseudo_label",
            SslName::PiModel => "pi_model",
            SslName::MeanTeacher => "mean_teacher",
        }
    }
}

impl std::fmt::Display for SslName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SslName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pseudo_label" => Ok(SslName::PseudoLabel),
            "pi_model" => Ok(SslName::PiModel),
            "mean_teacher" => Ok(SslName::MeanTeacher),
            other => Err(Error::UnknownAlgorithm(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoLabelParams {
    pub threshold: f64,
    pub weight: f64,
}

impl Default for PseudoLabelParams {
    fn default() -> Self {
        PseudoLabelParams {
            threshold: 0.95,
            weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencyParams {
    pub weight: f64,
    /// Fraction of the run over which the weight ramps linearly from 0.
    pub ramp_fraction: f64,
    /// Only used by mean teacher.
    pub ema_decay: f64,
}

impl Default for ConsistencyParams {
    fn default() -> Self {
        ConsistencyParams {
            weight: 10.0,
            ramp_fraction: 0.2,
            ema_decay: 0.99,
        }
    }
}

/// Algorithm choice with per-algorithm parameters under their own keys.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SslSpec {
    pub name: SslName,
    pub pseudo_label: PseudoLabelParams,
    pub pi_model: ConsistencyParams,
    pub mean_teacher: ConsistencyParams,
}

impl Default for SslSpec {
    fn default() -> Self {
        SslSpec {
            name: SslName::PseudoLabel,
            pseudo_label: PseudoLabelParams::default(),
            pi_model: ConsistencyParams::default(),
            mean_teacher: ConsistencyParams::default(),
        }
    }
}

impl SslSpec {
    pub fn validate(&self) -> Result<()> {
        let pl = self.pseudo_label;
        if !(pl.threshold > 0.0 && pl.threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "ssl.pseudo_label.threshold must be in (0, 1], got {}",
                pl.threshold
            )));
        }
        for (name, p) in [("pi_model", self.pi_model), ("mean_teacher", self.mean_teacher)] {
            if !(0.0..1.0).contains(&p.ema_decay) {
                return Err(Error::InvalidConfig(format!(
                    "ssl.{name}.ema_decay must be in [0, 1), got {}",
                    p.ema_decay
                )));
            }
            if !(0.0..=1.0).contains(&p.ramp_fraction) || p.weight < 0.0 {
                return Err(Error::InvalidConfig(format!("ssl.{name}: invalid weight or ramp")));
            }
        }
        if pl.weight < 0.0 {
            return Err(Error::InvalidConfig("ssl.pseudo_label.weight must be >= 0".into()));
        }
        Ok(())
    }

    /// Whether the algorithm consumes a second augmented unlabeled view.
    pub fn uses_second_view(&self) -> bool {
        matches!(self.name, SslName::PiModel | SslName::MeanTeacher)
    }

    /// Unlabeled loss weight at `step` of `total_steps`.
    pub fn unlabeled_weight(&self, step: usize, total_steps: usize) -> f64 {
        let ramped = |p: ConsistencyParams| {
            let ramp_steps = p.ramp_fraction * total_steps as f64;
            if ramp_steps <= 0.0 {
                p.weight
            } else {
                p.weight * (step as f64 / ramp_steps).min(1.0)
            }
        };
        match self.name {
            SslName::PseudoLabel => self.pseudo_label.weight,
            SslName::PiModel => ramped(self.pi_model),
            SslName::MeanTeacher => ramped(self.mean_teacher),
        }
    }
}

fn ce_and_grad(p: &[f64], class: usize) -> (f64, Vec<f64>) {
    let pc = p[class];
    let value = -pc.max(LOG_EPS).ln();
    let mut g = vec![0.0; p.len()];
    if pc > LOG_EPS {
        g[class] = -1.0 / pc;
    }
    (value, softmax_backward(p, &g))
}

/// Per-sample cross-entropy against hard labels.
pub fn supervised_loss(p_n: &[Vec<f64>], labels: &[usize]) -> Result<Vec<f64>> {
    supervised_with_grad(p_n, labels).map(|(v, _)| v)
}

/// Values plus gradients with respect to the classification logits.
pub fn supervised_with_grad(p_n: &[Vec<f64>], labels: &[usize]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if p_n.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: p_n.len(),
            actual: labels.len(),
        });
    }
    let mut values = Vec::with_capacity(labels.len());
    let mut grads = Vec::with_capacity(labels.len());
    for (p, &y) in p_n.iter().zip(labels) {
        if y >= p.len() {
            return Err(Error::ClassOutOfRange {
                class: y,
                num_classes: p.len(),
            });
        }
        let (v, g) = ce_and_grad(p, y);
        values.push(v);
        grads.push(g);
    }
    Ok((values, grads))
}

/// Cross-entropy against the argmax pseudo-label where `max p_n >= threshold`.
pub fn pseudo_label_loss(p_n: &[Vec<f64>], threshold: f64) -> Vec<f64> {
    pseudo_label_with_grad(p_n, threshold).0
}

pub fn pseudo_label_with_grad(p_n: &[Vec<f64>], threshold: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    p_n.iter()
        .map(|p| {
            if max(p) >= threshold {
                ce_and_grad(p, argmax(p))
            } else {
                (0.0, vec![0.0; p.len()])
            }
        })
        .unzip()
}

fn squared_l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Per-sample squared L2 distance between the two views' class probabilities.
pub fn pi_model_loss(p_n: &[Vec<f64>], p_n_aug: &[Vec<f64>]) -> Result<Vec<f64>> {
    if p_n.len() != p_n_aug.len() {
        return Err(Error::LengthMismatch {
            expected: p_n.len(),
            actual: p_n_aug.len(),
        });
    }
    Ok(p_n.iter().zip(p_n_aug).map(|(a, b)| squared_l2(a, b)).collect())
}

/// Moves `teacher` toward `student`: `t ← decay·t + (1 − decay)·s`.
pub fn ema_update(teacher: &mut [f64], student: &[f64], decay: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::LengthMismatch {
            expected: teacher.len(),
            actual: student.len(),
        });
    }
    for (t, s) in teacher.iter_mut().zip(student) {
        *t = decay * *t + (1.0 - decay) * s;
    }
    Ok(())
}

/// Consistency between student and teacher class probabilities, then the
/// EMA update of the teacher parameters. The teacher never receives
/// gradients.
pub fn mean_teacher_step(
    student_p_n: &[Vec<f64>],
    teacher_p_n: &[Vec<f64>],
    student_params: &[f64],
    teacher_params: &mut [f64],
    ema_decay: f64,
) -> Result<Vec<f64>> {
    let consistency = pi_model_loss(student_p_n, teacher_p_n)?;
    ema_update(teacher_params, student_params, ema_decay)?;
    Ok(consistency)
}

/// Builds the SSL contribution for one step.
///
/// `teacher_aug` holds teacher outputs on the second view (mean teacher
/// only); `weight` is the current unlabeled weight.
pub fn contribution(
    spec: &SslSpec,
    labeled: &[ModelOutputs],
    labels: &[usize],
    unlabeled: &[ModelOutputs],
    unlabeled_aug: Option<&[ModelOutputs]>,
    teacher_aug: Option<&[ModelOutputs]>,
    weight: f64,
) -> Result<SslContribution> {
    let p = |o: &[ModelOutputs]| o.iter().map(|x| x.p_n.clone()).collect::<Vec<_>>();
    let (supervised, grad_supervised) = supervised_with_grad(&p(labeled), labels)?;
    let pu = p(unlabeled);
    let (raw, gu, gu2) = match spec.name {
        SslName::PseudoLabel => {
            let (v, g) = pseudo_label_with_grad(&pu, spec.pseudo_label.threshold);
            (v, g, None)
        }
        SslName::PiModel => {
            let aug = unlabeled_aug.ok_or(Error::EmptyBatch("pi model needs a second view"))?;
            let pa = p(aug);
            let v = pi_model_loss(&pu, &pa)?;
            let mut g1 = Vec::with_capacity(pu.len());
            let mut g2 = Vec::with_capacity(pu.len());
            for (a, b) in pu.iter().zip(&pa) {
                let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| 2.0 * (x - y)).collect();
                let neg: Vec<f64> = d.iter().map(|v| -v).collect();
                g1.push(softmax_backward(a, &d));
                g2.push(softmax_backward(b, &neg));
            }
            (v, g1, Some(g2))
        }
        SslName::MeanTeacher => {
            let teacher = teacher_aug.ok_or(Error::EmptyBatch("mean teacher needs teacher outputs"))?;
            let pt = p(teacher);
            let v = pi_model_loss(&pu, &pt)?;
            let g = pu
                .iter()
                .zip(&pt)
                .map(|(a, b)| {
                    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| 2.0 * (x - y)).collect();
                    softmax_backward(a, &d)
                })
                .collect();
            (v, g, None)
        }
    };
    let scale = |g: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        g.into_iter()
            .map(|row| row.into_iter().map(|x| x * weight).collect())
            .collect()
    };
    Ok(SslContribution {
        per_sample: raw.into_iter().map(|v| v * weight).collect(),
        grad_unlabeled: Some(scale(gu)),
        grad_unlabeled_aug: gu2.map(scale),
        supervised,
        grad_supervised: Some(grad_supervised),
    })
}
