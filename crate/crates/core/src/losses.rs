//! Loss terms for joint classification, overclustering and ambiguity
//! estimation, with analytic gradients with respect to the raw head outputs.
//!
//! ```text
//! total = mean(L_sup)
//!       + mean(L_ssl · (1 − p_a))
//!       + wou · mean(CE⁻¹_u · mask · (1 − p_a))
//!       + wol · mean(CE⁻¹_l)
//!       + wa  · mean(BCE(h, p_a))
//!       + ws  · mean(p_a · CE(p_o, p_o'))
//! ```
//!
//! Every `p_a` and `1 − p_a` scale factor, the confidence mask, the
//! pseudo-labels used for partner selection and the ambiguity targets `h`
//! are detached: they are computed once per batch ([`Detached`]) and no
//! gradient flows through them. The only path from the ambiguity logit to
//! the total is the `wa` term.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HeadConfig, ModelOutputs};
use crate::numeric::{argmax, max, softmax_backward, LOG_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetOrder {
    /// The `floor(B·p_A)` highest-`p_a` samples are labeled ambiguous.
    #[default]
    Descending,
    /// The `floor(B·p_A)` lowest-`p_a` samples are labeled ambiguous.
    AscendingLiteral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Inverse cross-entropy weight on the unlabeled batch (`wou`).
    pub lambda_ce_inv_unlabeled: f64,
    /// Inverse cross-entropy weight on the labeled batch (`wol`).
    pub lambda_ce_inv_labeled: f64,
    /// Ambiguity loss weight (`wa`).
    pub lambda_a: f64,
    /// Similarity loss weight (`ws`).
    pub lambda_s: f64,
    /// Expected fraction of ambiguous images, `p_A`.
    pub prior_ambiguity: f64,
    /// Pseudo-label confidence threshold for the unlabeled CE⁻¹ mask.
    pub confidence_tau: f64,
    pub target_order: TargetOrder,
    /// Treat every `p_a` as 0 in the scale factors.
    pub force_certain: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ce_inv_unlabeled: 10.0,
            lambda_ce_inv_labeled: 10.0,
            lambda_a: 0.1,
            lambda_s: 0.1,
            prior_ambiguity: 0.6,
            confidence_tau: 0.95,
            target_order: TargetOrder::Descending,
            force_certain: false,
        }
    }
}

impl LossWeights {
    /// All extension weights zero and `p_a` ignored.
    pub fn disabled() -> Self {
        LossWeights {
            lambda_ce_inv_unlabeled: 0.0,
            lambda_ce_inv_labeled: 0.0,
            lambda_a: 0.0,
            lambda_s: 0.0,
            force_certain: true,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [
            self.lambda_ce_inv_unlabeled,
            self.lambda_ce_inv_labeled,
            self.lambda_a,
            self.lambda_s,
        ];
        if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::InvalidConfig("loss weights must be finite and >= 0".into()));
        }
        if !(self.prior_ambiguity > 0.0 && self.prior_ambiguity < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "prior_ambiguity must be in (0, 1), got {}",
                self.prior_ambiguity
            )));
        }
        if !(self.confidence_tau > 0.0 && self.confidence_tau <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "confidence_tau must be in (0, 1], got {}",
                self.confidence_tau
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub supervised_term: f64,
    pub ssl_term: f64,
    pub ce_inv_labeled: f64,
    pub ce_inv_unlabeled: f64,
    pub ambiguity_term: f64,
    pub similarity_term: f64,
    pub fraction_predicted_fuzzy: f64,
    pub weights: Option<LossWeights>,
}

impl LossBreakdown {
    /// Weighted sum of the individual terms.
    pub fn recomputed_total(&self) -> f64 {
        let w = self.weights.unwrap_or_else(LossWeights::disabled);
        self.supervised_term
            + self.ssl_term
            + w.lambda_ce_inv_unlabeled * self.ce_inv_unlabeled
            + w.lambda_ce_inv_labeled * self.ce_inv_labeled
            + w.lambda_a * self.ambiguity_term
            + w.lambda_s * self.similarity_term
    }

    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.supervised_term,
            self.ssl_term,
            self.ce_inv_labeled,
            self.ce_inv_unlabeled,
            self.ambiguity_term,
            self.similarity_term,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total={} sup={} ssl={} ce_inv_l={} ce_inv_u={} amb={} sim={} fuzzy={:.3}",
            self.total,
            self.supervised_term,
            self.ssl_term,
            self.ce_inv_labeled,
            self.ce_inv_unlabeled,
            self.ambiguity_term,
            self.similarity_term,
            self.fraction_predicted_fuzzy
        )
    }
}

/// `−Σ_c p_c · ln(max(1 − p_neg_c, eps))`.
pub fn inverse_cross_entropy(p: &[f64], p_neg: &[f64], eps: f64) -> Result<f64> {
    check_len(p.len(), p_neg.len())?;
    Ok(-p
        .iter()
        .zip(p_neg)
        .map(|(pc, qc)| pc * (1.0 - qc).max(eps).ln())
        .sum::<f64>())
}

/// For every position, a uniformly chosen other position with a different
/// label, or `None` when no such position exists.
///
/// Draws one number from `rng` per position that has at least one eligible
/// partner, in position order.
pub fn select_negative_partners<R: Rng + ?Sized>(labels: &[usize], rng: &mut R) -> Vec<Option<usize>> {
    labels
        .iter()
        .map(|&li| {
            let eligible: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|&(_, &lj)| lj != li)
                .map(|(j, _)| j)
                .collect();
            if eligible.is_empty() {
                None
            } else {
                Some(eligible[rng.random_range(0..eligible.len())])
            }
        })
        .collect()
}

/// Binary ambiguity pseudo-labels: exactly `floor(B·p_A)` ones.
///
/// Ties in `p_a` resolve by batch position (earlier first).
pub fn pseudo_ambiguity_targets(p_a: &[f64], prior: f64, order: TargetOrder) -> Vec<f64> {
    let b = p_a.len();
    let m = ((b as f64) * prior).floor() as usize;
    let mut idx: Vec<usize> = (0..b).collect();
    match order {
        TargetOrder::Descending => idx.sort_by(|&i, &j| p_a[j].total_cmp(&p_a[i])),
        TargetOrder::AscendingLiteral => idx.sort_by(|&i, &j| p_a[i].total_cmp(&p_a[j])),
    }
    let mut targets = vec![0.0; b];
    for &i in idx.iter().take(m.min(b)) {
        targets[i] = 1.0;
    }
    targets
}

/// Mean binary cross-entropy between targets `h` and clamped `p_a`.
pub fn ambiguity_loss(p_a: &[f64], targets: &[f64]) -> Result<f64> {
    check_len(p_a.len(), targets.len())?;
    if p_a.is_empty() {
        return Err(Error::EmptyBatch("ambiguity loss"));
    }
    let sum: f64 = p_a
        .iter()
        .zip(targets)
        .map(|(&p, &h)| bce(p, h))
        .sum();
    Ok(sum / p_a.len() as f64)
}

fn bce(p_a: f64, h: f64) -> f64 {
    let p = p_a.clamp(LOG_EPS, 1.0 - LOG_EPS);
    -(1.0 - h) * (1.0 - p).ln() - h * p.ln()
}

/// `p_a · (−Σ_c p_o_c · ln(p_o_aug_c + eps))`, with `p_a` a constant.
pub fn similarity_loss(p_o: &[f64], p_o_aug: &[f64], p_a: f64) -> Result<f64> {
    check_len(p_o.len(), p_o_aug.len())?;
    Ok(p_a * cross_entropy(p_o, p_o_aug))
}

fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    -p.iter()
        .zip(q)
        .map(|(pc, qc)| pc * (qc + LOG_EPS).ln())
        .sum::<f64>()
}

/// 1 where `max p_n >= tau`, else 0.
pub fn confidence_mask(p_n: &[Vec<f64>], tau: f64) -> Vec<f64> {
    p_n.iter()
        .map(|p| if max(p) >= tau { 1.0 } else { 0.0 })
        .collect()
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::LengthMismatch { expected, actual });
    }
    Ok(())
}

/// Per-sample SSL losses on the unlabeled batch, with their gradients with
/// respect to the classification logits.
#[derive(Debug, Clone, Default)]
pub struct SslContribution {
    /// One value per unlabeled sample.
    pub per_sample: Vec<f64>,
    /// `d per_sample[i] / d logits_n(u_i)`; `None` when no gradient is needed.
    pub grad_unlabeled: Option<Vec<Vec<f64>>>,
    /// `d per_sample[i] / d logits_n(u'_i)` for the second view.
    pub grad_unlabeled_aug: Option<Vec<Vec<f64>>>,
    /// Supervised per-sample losses on the labeled batch.
    pub supervised: Vec<f64>,
    pub grad_supervised: Option<Vec<Vec<f64>>>,
}

/// Everything the total loss treats as a constant.
#[derive(Debug, Clone, PartialEq)]
pub struct Detached {
    pub partners_labeled: Vec<Option<usize>>,
    pub partners_unlabeled: Vec<Option<usize>>,
    pub pseudo_labels: Vec<usize>,
    pub mask: Vec<f64>,
    pub targets: Vec<f64>,
    /// `p_a` per unlabeled sample as used in scale factors.
    pub ambiguous_scale: Vec<f64>,
    pub labeled_ambiguous_scale: Vec<f64>,
}

impl Detached {
    /// Computes the detached quantities. Partner draws consume `rng`:
    /// labeled positions first, then unlabeled.
    pub fn compute<R: Rng + ?Sized>(
        labeled: &[ModelOutputs],
        labels: &[usize],
        unlabeled: &[ModelOutputs],
        weights: &LossWeights,
        rng: &mut R,
    ) -> Self {
        let partners_labeled = select_negative_partners(labels, rng);
        let pseudo_labels: Vec<usize> = unlabeled.iter().map(|o| argmax(&o.p_n)).collect();
        let partners_unlabeled = select_negative_partners(&pseudo_labels, rng);
        let p_n: Vec<Vec<f64>> = unlabeled.iter().map(|o| o.p_n.clone()).collect();
        let mask = confidence_mask(&p_n, weights.confidence_tau);
        let p_a: Vec<f64> = unlabeled.iter().map(|o| o.p_a).collect();
        let targets = pseudo_ambiguity_targets(&p_a, weights.prior_ambiguity, weights.target_order);
        let scale = |o: &ModelOutputs| if weights.force_certain { 0.0 } else { o.p_a };
        Detached {
            partners_labeled,
            partners_unlabeled,
            pseudo_labels,
            mask,
            targets,
            ambiguous_scale: unlabeled.iter().map(scale).collect(),
            labeled_ambiguous_scale: labeled.iter().map(scale).collect(),
        }
    }
}

/// Gradients of the total with respect to each sample's raw output vector
/// (`k` class logits, `k'` cluster logits, 1 ambiguity logit).
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub labeled: Vec<Vec<f64>>,
    pub unlabeled: Vec<Vec<f64>>,
    pub unlabeled_aug: Option<Vec<Vec<f64>>>,
}

/// Batched inputs to the total loss.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub labeled: &'a [ModelOutputs],
    pub labels: &'a [usize],
    pub unlabeled: &'a [ModelOutputs],
    /// Second augmented view of the unlabeled batch, index-aligned.
    pub unlabeled_aug: Option<&'a [ModelOutputs]>,
}

/// Evaluates the total loss and its gradients with fixed detached values.
pub fn evaluate(
    head: &HeadConfig,
    inputs: LossInputs<'_>,
    ssl: &SslContribution,
    detached: &Detached,
    weights: &LossWeights,
) -> Result<(LossBreakdown, LossGradients)> {
    let LossInputs {
        labeled,
        labels,
        unlabeled,
        unlabeled_aug,
    } = inputs;
    let bu = unlabeled.len();
    let bl = labeled.len();
    if bu == 0 {
        return Err(Error::EmptyBatch("unlabeled"));
    }
    check_len(bu, ssl.per_sample.len())?;
    check_len(bl, labels.len())?;
    check_len(bl, ssl.supervised.len())?;
    if let Some(aug) = unlabeled_aug {
        check_len(bu, aug.len())?;
    }
    let (k, kp) = (head.k, head.k_prime);
    let raw = head.raw_len();
    let a_idx = head.ambiguity_index();

    let mut g_l = vec![vec![0.0; raw]; bl];
    let mut g_u = vec![vec![0.0; raw]; bu];
    let mut g_u2 = unlabeled_aug.map(|_| vec![vec![0.0; raw]; bu]);
    // gradients w.r.t. the cluster probabilities, pulled through softmax at the end
    let mut gpo_l = vec![vec![0.0; kp]; bl];
    let mut gpo_u = vec![vec![0.0; kp]; bu];
    let mut gpo_u2 = unlabeled_aug.map(|_| vec![vec![0.0; kp]; bu]);

    // supervised
    let mut supervised_term = 0.0;
    if bl > 0 {
        let s = 1.0 / bl as f64;
        supervised_term = ssl.supervised.iter().sum::<f64>() / bl as f64;
        if let Some(gs) = &ssl.grad_supervised {
            for (g, d) in g_l.iter_mut().zip(gs) {
                for c in 0..k {
                    g[c] += d[c] * s;
                }
            }
        }
    }

    // SSL · (1 − p_a)
    let certain: Vec<f64> = detached.ambiguous_scale.iter().map(|a| 1.0 - a).collect();
    let ssl_term = ssl
        .per_sample
        .iter()
        .zip(&certain)
        .map(|(v, c)| v * c)
        .sum::<f64>()
        / bu as f64;
    for i in 0..bu {
        let s = certain[i] / bu as f64;
        if let Some(gu) = &ssl.grad_unlabeled {
            for c in 0..k {
                g_u[i][c] += gu[i][c] * s;
            }
        }
        if let (Some(gu2), Some(dst)) = (&ssl.grad_unlabeled_aug, g_u2.as_mut()) {
            for c in 0..k {
                dst[i][c] += gu2[i][c] * s;
            }
        }
    }

    // CE⁻¹ on the labeled batch
    let wol = weights.lambda_ce_inv_labeled;
    let mut ce_inv_labeled = 0.0;
    if bl > 0 {
        let mut sum = 0.0;
        for i in 0..bl {
            let Some(j) = detached.partners_labeled[i] else { continue };
            let (p, q) = (&labeled[i].p_o, &labeled[j].p_o);
            sum += inverse_cross_entropy(p, q, LOG_EPS)?;
            let s = wol / bl as f64;
            for c in 0..kp {
                let one_minus_q = 1.0 - q[c];
                gpo_l[i][c] += -one_minus_q.max(LOG_EPS).ln() * s;
                if one_minus_q > LOG_EPS {
                    gpo_l[j][c] += p[c] / one_minus_q * s;
                }
            }
        }
        ce_inv_labeled = sum / bl as f64;
    }

    // CE⁻¹ on the unlabeled batch, masked and scaled by (1 − p_a)
    let wou = weights.lambda_ce_inv_unlabeled;
    let mut sum = 0.0;
    for i in 0..bu {
        let Some(j) = detached.partners_unlabeled[i] else { continue };
        let (p, q) = (&unlabeled[i].p_o, &unlabeled[j].p_o);
        let scale = detached.mask[i] * certain[i];
        sum += inverse_cross_entropy(p, q, LOG_EPS)? * scale;
        let s = wou * scale / bu as f64;
        for c in 0..kp {
            let one_minus_q = 1.0 - q[c];
            gpo_u[i][c] += -one_minus_q.max(LOG_EPS).ln() * s;
            if one_minus_q > LOG_EPS {
                gpo_u[j][c] += p[c] / one_minus_q * s;
            }
        }
    }
    let ce_inv_unlabeled = sum / bu as f64;

    // ambiguity BCE against detached pseudo-labels
    let p_a: Vec<f64> = unlabeled.iter().map(|o| o.p_a).collect();
    let ambiguity_term = ambiguity_loss(&p_a, &detached.targets)?;
    let wa = weights.lambda_a;
    for i in 0..bu {
        let pa = p_a[i];
        if pa > LOG_EPS && pa < 1.0 - LOG_EPS {
            let h = detached.targets[i];
            let d_pa = (-h / pa + (1.0 - h) / (1.0 - pa)) / bu as f64;
            g_u[i][a_idx] += wa * d_pa * pa * (1.0 - pa);
        }
    }

    // similarity between the two views, scaled by p_a
    let mut similarity_term = 0.0;
    if let (Some(aug), Some(gpo2)) = (unlabeled_aug, gpo_u2.as_mut()) {
        let ws = weights.lambda_s;
        let mut sum = 0.0;
        for i in 0..bu {
            let a = detached.ambiguous_scale[i];
            let (p, q) = (&unlabeled[i].p_o, &aug[i].p_o);
            sum += similarity_loss(p, q, a)?;
            let s = ws * a / bu as f64;
            for c in 0..kp {
                gpo_u[i][c] += -(q[c] + LOG_EPS).ln() * s;
                gpo2[i][c] += -p[c] / (q[c] + LOG_EPS) * s;
            }
        }
        similarity_term = sum / bu as f64;
    }

    let pull = |outs: &[ModelOutputs], gpo: &[Vec<f64>], g: &mut [Vec<f64>]| {
        for ((o, gp), dst) in outs.iter().zip(gpo).zip(g.iter_mut()) {
            let dz = softmax_backward(&o.p_o, gp);
            for c in 0..kp {
                dst[k + c] += dz[c];
            }
        }
    };
    pull(labeled, &gpo_l, &mut g_l);
    pull(unlabeled, &gpo_u, &mut g_u);
    if let (Some(aug), Some(gpo2), Some(g2)) = (unlabeled_aug, &gpo_u2, g_u2.as_mut()) {
        pull(aug, gpo2, g2);
    }

    let total = supervised_term
        + ssl_term
        + wou * ce_inv_unlabeled
        + wol * ce_inv_labeled
        + wa * ambiguity_term
        + weights.lambda_s * similarity_term;
    let breakdown = LossBreakdown {
        total,
        supervised_term,
        ssl_term,
        ce_inv_labeled,
        ce_inv_unlabeled,
        ambiguity_term,
        similarity_term,
        fraction_predicted_fuzzy: p_a.iter().filter(|&&p| p >= 0.5).count() as f64 / bu as f64,
        weights: Some(*weights),
    };
    Ok((
        breakdown,
        LossGradients {
            labeled: g_l,
            unlabeled: g_u,
            unlabeled_aug: g_u2,
        },
    ))
}

/// Total loss for one batch. `outputs_u2` is the optional second view; without
/// it the similarity term is zero.
#[allow(clippy::too_many_arguments)]
pub fn dc3_total_loss<R: Rng + ?Sized>(
    head: &HeadConfig,
    ssl_per_sample: &[f64],
    outputs_l: &[ModelOutputs],
    outputs_u: &[ModelOutputs],
    outputs_u2: Option<&[ModelOutputs]>,
    labels_l: &[usize],
    weights: &LossWeights,
    rng: &mut R,
) -> Result<LossBreakdown> {
    if outputs_u.is_empty() {
        return Err(Error::EmptyBatch("unlabeled"));
    }
    let detached = Detached::compute(outputs_l, labels_l, outputs_u, weights, rng);
    let ssl = SslContribution {
        per_sample: ssl_per_sample.to_vec(),
        supervised: vec![0.0; outputs_l.len()],
        ..Default::default()
    };
    let inputs = LossInputs {
        labeled: outputs_l,
        labels: labels_l,
        unlabeled: outputs_u,
        unlabeled_aug: outputs_u2,
    };
    evaluate(head, inputs, &ssl, &detached, weights).map(|(b, _)| b)
}
