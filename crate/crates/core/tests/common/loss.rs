//! Random-batch comparisons between the library losses and the scalar oracle.

use dc3::losses::{
    ambiguity_loss, dc3_total_loss, inverse_cross_entropy, select_negative_partners, similarity_loss, LossWeights,
};
use dc3::model::{split_head, HeadConfig, ModelOutputs};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

pub fn batch(rng: &mut ChaCha8Rng, head: &HeadConfig, n: usize) -> Vec<ModelOutputs> {
    (0..n)
        .map(|_| split_head(&random_raw(rng, head.raw_len()), head).unwrap())
        .collect()
}

/// Largest absolute deviation of CE⁻¹, similarity and BCE over `cases`
/// random inputs. Errors if a library call fails or CE⁻¹ goes negative.
pub fn scalar_terms(seed: u64, cases: usize) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let k = rng.random_range(2..7);
        let p = softmax(&random_raw(&mut rng, k));
        let q = softmax(&random_raw(&mut rng, k));
        let a = inverse_cross_entropy(&p, &q, EPS).map_err(|e| e.to_string())?;
        if a < 0.0 {
            return Err(format!("negative inverse cross-entropy {a}"));
        }
        worst = worst.max((a - inverse_ce(&p, &q)).abs());
        let pa = sigmoid(rng.random_range(-20.0..20.0));
        let s = similarity_loss(&p, &q, pa).map_err(|e| e.to_string())?;
        worst = worst.max((s - similarity(&p, &q, pa)).abs());
        let h: f64 = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        let b = ambiguity_loss(&[pa], &[h]).map_err(|e| e.to_string())?;
        worst = worst.max((b - bce(pa, h)).abs());
    }
    Ok(worst)
}

/// Largest absolute deviation of the total loss over `rounds` random batches
/// with random shapes, weights and optional second view.
pub fn total_batches(seed: u64, rounds: usize) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for round in 0..rounds {
        let k = rng.random_range(2..5);
        let head = HeadConfig {
            k,
            k_prime: rng.random_range(k + 1..=3 * k),
            embedding_dim: 4,
        };
        let bl = rng.random_range(2..12);
        let bu = rng.random_range(2..12);
        let ol = batch(&mut rng, &head, bl);
        let ou = batch(&mut rng, &head, bu);
        let ou2 = rng.random_bool(0.5).then(|| batch(&mut rng, &head, bu));
        // every fifth batch has a single label so all labeled partners skip
        let labels: Vec<usize> = (0..bl)
            .map(|_| if round % 5 == 0 { 0 } else { rng.random_range(0..k) })
            .collect();
        let ssl: Vec<f64> = (0..bu).map(|_| rng.random_range(0.0..3.0)).collect();
        let weights = LossWeights {
            prior_ambiguity: rng.random_range(0.05..0.95),
            confidence_tau: rng.random_range(0.3..1.0),
            ..LossWeights::default()
        };

        let seed = rng.random::<u64>();
        let got = dc3_total_loss(
            &head,
            &ssl,
            &ol,
            &ou,
            ou2.as_deref(),
            &labels,
            &weights,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .map_err(|e| format!("round {round}: {e}"))?;
        if !got.is_finite() || (got.recomputed_total() - got.total).abs() > 1e-5 {
            return Err(format!("round {round}: inconsistent breakdown {got:?}"));
        }

        let mut prng = ChaCha8Rng::seed_from_u64(seed);
        let partners_l = select_negative_partners(&labels, &mut prng);
        let pseudo: Vec<usize> = ou.iter().map(|o| argmax(&o.p_n)).collect();
        let partners_u = select_negative_partners(&pseudo, &mut prng);
        let w = OracleWeights {
            wou: weights.lambda_ce_inv_unlabeled,
            wol: weights.lambda_ce_inv_labeled,
            wa: weights.lambda_a,
            ws: weights.lambda_s,
            prior: weights.prior_ambiguity,
            tau: weights.confidence_tau,
        };
        let want = total(&ssl, &ol, &ou, ou2.as_deref(), &partners_l, &partners_u, &w);
        worst = worst.max((got.total - want).abs());
    }
    Ok(worst)
}
