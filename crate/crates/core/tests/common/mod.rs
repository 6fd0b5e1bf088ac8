//! Shared fixtures and an independent scalar re-implementation of the loss
//! formulas. Nothing here calls the library's loss code; partners are the
//! only input taken from the library, since they are random draws.

#![allow(dead_code)]

pub mod grad;
pub mod loss;

use std::path::Path;

use dc3::dataset::{generate_synthetic, DatasetManifest, SyntheticConfig};
use dc3::model::ModelOutputs;
use rand::Rng;

pub const EPS: f64 = 1e-7;

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..p.len() {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

pub fn inverse_ce(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for c in 0..p.len() {
        s -= p[c] * (1.0 - q[c]).max(EPS).ln();
    }
    s
}

pub fn bce(pa: f64, h: f64) -> f64 {
    let pa = pa.clamp(EPS, 1.0 - EPS);
    -(1.0 - h) * (1.0 - pa).ln() - h * pa.ln()
}

pub fn similarity(po: &[f64], po2: &[f64], pa: f64) -> f64 {
    let mut s = 0.0;
    for c in 0..po.len() {
        s -= po[c] * (po2[c] + EPS).ln();
    }
    pa * s
}

/// Indices of the `floor(B·p_A)` largest values, ties to the earlier
/// position.
pub fn top_m(pa: &[f64], prior: f64) -> Vec<f64> {
    let m = (pa.len() as f64 * prior).floor() as usize;
    let mut h = vec![0.0; pa.len()];
    let mut taken = vec![false; pa.len()];
    for _ in 0..m {
        let mut best: Option<usize> = None;
        for i in 0..pa.len() {
            if taken[i] {
                continue;
            }
            if best.is_none_or(|b| pa[i] > pa[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        h[b] = 1.0;
    }
    h
}

pub struct OracleWeights {
    pub wou: f64,
    pub wol: f64,
    pub wa: f64,
    pub ws: f64,
    pub prior: f64,
    pub tau: f64,
}

/// Scalar total loss with detached scale factors and given partners.
#[allow(clippy::too_many_arguments)]
pub fn total(
    ssl: &[f64],
    ol: &[ModelOutputs],
    ou: &[ModelOutputs],
    ou2: Option<&[ModelOutputs]>,
    partners_l: &[Option<usize>],
    partners_u: &[Option<usize>],
    w: &OracleWeights,
) -> f64 {
    let bu = ou.len() as f64;
    let mut ssl_term = 0.0;
    let mut ce_u = 0.0;
    let mut sim = 0.0;
    for i in 0..ou.len() {
        let pa = ou[i].p_a;
        ssl_term += ssl[i] * (1.0 - pa);
        let conf = ou[i].p_n.iter().cloned().fold(0.0, f64::max) >= w.tau;
        if let Some(j) = partners_u[i] {
            if conf {
                ce_u += inverse_ce(&ou[i].p_o, &ou[j].p_o) * (1.0 - pa);
            }
        }
        if let Some(v2) = ou2 {
            sim += similarity(&ou[i].p_o, &v2[i].p_o, pa);
        }
    }
    let mut ce_l = 0.0;
    for i in 0..ol.len() {
        if let Some(j) = partners_l[i] {
            ce_l += inverse_ce(&ol[i].p_o, &ol[j].p_o);
        }
    }
    let ce_l = if ol.is_empty() { 0.0 } else { ce_l / ol.len() as f64 };
    let pa: Vec<f64> = ou.iter().map(|o| o.p_a).collect();
    let h = top_m(&pa, w.prior);
    let amb: f64 = pa.iter().zip(&h).map(|(p, t)| bce(*p, *t)).sum::<f64>() / bu;
    ssl_term / bu + w.wou * ce_u / bu + w.wol * ce_l + w.wa * amb + w.ws * sim / bu
}

/// Random raw head output; a fraction of entries are pushed to extremes so
/// the log clamps are exercised.
pub fn random_raw<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| {
            if rng.random_bool(0.1) {
                rng.random_range(-40.0..40.0)
            } else {
                rng.random_range(-3.0..3.0)
            }
        })
        .collect()
}

/// The synthetic dataset used by the directional experiments.
pub fn acceptance_dataset(dir: &Path) -> DatasetManifest {
    let cfg = SyntheticConfig {
        name: "synthetic-k2".into(),
        k: 2,
        n_images: 1000,
        fuzzy_fraction: 0.2,
        ambiguity_range: (0.2, 0.8),
        image_size: 16,
        annotators_per_image: 10,
        seed: 0,
        supervised_fraction: 0.1,
        val_fraction: 0.2,
    };
    generate_synthetic(&cfg, dir).expect("synthetic dataset")
}

/// A small dataset for fast trainer tests.
pub fn small_dataset(dir: &Path, n: usize, size: usize) -> DatasetManifest {
    let cfg = SyntheticConfig {
        name: "small".into(),
        k: 2,
        n_images: n,
        image_size: size,
        annotators_per_image: 5,
        seed: 3,
        supervised_fraction: 0.2,
        val_fraction: 0.2,
        ..SyntheticConfig::default()
    };
    generate_synthetic(&cfg, dir).expect("synthetic dataset")
}
