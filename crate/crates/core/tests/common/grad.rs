//! Finite-difference gradient checks through a two-layer network.

use dc3::losses::{evaluate, Detached, LossInputs, LossWeights, SslContribution};
use dc3::model::{split_head, BackboneConfig, BackboneKind, Dc3Model, HeadConfig, ModelOutputs};
use dc3::ssl::{contribution, SslName, SslSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

#[derive(Clone, Copy)]
pub enum Ssl {
    Off,
    On(SslName),
}

pub struct Case {
    model: Dc3Model,
    xl: Vec<Vec<f64>>,
    labels: Vec<usize>,
    xu: Vec<Vec<f64>>,
    xu2: Vec<Vec<f64>>,
}

pub fn case(seed: u64) -> Case {
    let backbone = BackboneConfig {
        kind: BackboneKind::Mlp,
        image_size: 4,
        widths: vec![],
    };
    let head = HeadConfig {
        k: 2,
        k_prime: 4,
        embedding_dim: 8,
    };
    let mut model = Dc3Model::new(backbone, head, seed).unwrap();
    assert!(model.net.num_params() <= 1000);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // larger weights give confident, varied outputs
    for p in &mut model.net.params {
        *p *= 3.0;
    }
    let img = |rng: &mut ChaCha8Rng| (0..16).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<f64>>();
    Case {
        xl: (0..4).map(|_| img(&mut rng)).collect(),
        labels: vec![0, 1, 1, 0],
        xu: (0..6).map(|_| img(&mut rng)).collect(),
        xu2: (0..6).map(|_| img(&mut rng)).collect(),
        model,
    }
}

fn outputs(model: &Dc3Model, params: &[f64], xs: &[Vec<f64>]) -> Vec<ModelOutputs> {
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    model
        .net
        .forward_batch_with(params, &refs)
        .iter()
        .map(|t| model.outputs_from_trace(t))
        .collect()
}

/// `teacher` holds fixed teacher outputs on the second view.
fn ssl_part(
    ssl: Ssl,
    ol: &[ModelOutputs],
    labels: &[usize],
    ou: &[ModelOutputs],
    ou2: &[ModelOutputs],
    teacher: &[ModelOutputs],
) -> SslContribution {
    match ssl {
        Ssl::Off => SslContribution {
            per_sample: vec![0.0; ou.len()],
            supervised: vec![0.0; ol.len()],
            ..Default::default()
        },
        Ssl::On(name) => {
            let mut spec = SslSpec {
                name,
                ..Default::default()
            };
            // low threshold so every sample carries a pseudo-label loss
            spec.pseudo_label.threshold = 0.01;
            let teacher = (name == SslName::MeanTeacher).then_some(teacher);
            let second = spec.uses_second_view().then_some(ou2);
            contribution(&spec, ol, labels, ou, second, teacher, 1.0).unwrap()
        }
    }
}

/// Returns `(analytic, numeric)` parameter gradients of the total.
pub fn gradients(c: &Case, ssl: Ssl, weights: &LossWeights, with_second: bool) -> (Vec<f64>, Vec<f64>) {
    let params = c.model.net.params.clone();
    let ol = outputs(&c.model, &params, &c.xl);
    let ou = outputs(&c.model, &params, &c.xu);
    let ou2 = outputs(&c.model, &params, &c.xu2);
    let detached = Detached::compute(&ol, &c.labels, &ou, weights, &mut ChaCha8Rng::seed_from_u64(5));
    let teacher = ou2.clone();

    let loss_at = |p: &[f64]| -> f64 {
        let ol = outputs(&c.model, p, &c.xl);
        let ou = outputs(&c.model, p, &c.xu);
        let ou2 = outputs(&c.model, p, &c.xu2);
        let s = ssl_part(ssl, &ol, &c.labels, &ou, &ou2, &teacher);
        let inputs = LossInputs {
            labeled: &ol,
            labels: &c.labels,
            unlabeled: &ou,
            unlabeled_aug: with_second.then_some(ou2.as_slice()),
        };
        evaluate(&c.model.head, inputs, &s, &detached, weights).unwrap().0.total
    };

    let s = ssl_part(ssl, &ol, &c.labels, &ou, &ou2, &teacher);
    let inputs = LossInputs {
        labeled: &ol,
        labels: &c.labels,
        unlabeled: &ou,
        unlabeled_aug: with_second.then_some(ou2.as_slice()),
    };
    let (_, g) = evaluate(&c.model.head, inputs, &s, &detached, weights).unwrap();
    let refs: Vec<&[f64]> = c.xl.iter().chain(&c.xu).chain(&c.xu2).map(Vec::as_slice).collect();
    let traces = c.model.net.forward_batch(&refs);
    let mut d_out: Vec<Option<Vec<f64>>> = g.labeled.into_iter().chain(g.unlabeled).map(Some).collect();
    match g.unlabeled_aug {
        Some(a) => d_out.extend(a.into_iter().map(Some)),
        None => d_out.extend((0..c.xu2.len()).map(|_| None)),
    }
    let mut analytic = vec![0.0; params.len()];
    c.model.net.backward_batch(&traces, &d_out, &mut analytic);

    let mut numeric = vec![0.0; params.len()];
    let mut p = params.clone();
    for i in 0..params.len() {
        p[i] = params[i] + H;
        let up = loss_at(&p);
        p[i] = params[i] - H;
        let down = loss_at(&p);
        p[i] = params[i];
        numeric[i] = (up - down) / (2.0 * H);
    }
    (analytic, numeric)
}

pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

pub fn only(f: impl FnOnce(&mut LossWeights)) -> LossWeights {
    let mut w = LossWeights {
        lambda_ce_inv_unlabeled: 0.0,
        lambda_ce_inv_labeled: 0.0,
        lambda_a: 0.0,
        lambda_s: 0.0,
        confidence_tau: 0.5,
        ..LossWeights::default()
    };
    f(&mut w);
    w
}

// seeds whose unlabeled batch has both pseudo-labels, so unlabeled
// partners exist
pub const SEEDS: [u64; 3] = [2, 4, 7];

/// Worst norm-relative error over [`SEEDS`]; fails if the gradient vanishes.
pub fn check(ssl: Ssl, weights: &LossWeights, second: bool) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in SEEDS {
        let c = case(seed);
        let (a, n) = gradients(&c, ssl, weights, second);
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-6 {
            return Err(format!("seed {seed}: gradient vanished"));
        }
        worst = worst.max(relative_error(&a, &n));
    }
    Ok(worst)
}

/// Every loss term in isolation, then the full objective.
pub fn terms() -> Vec<(&'static str, Ssl, LossWeights, bool)> {
    vec![
        ("pseudo_label", Ssl::On(SslName::PseudoLabel), only(|_| {}), false),
        ("pi_model", Ssl::On(SslName::PiModel), only(|_| {}), true),
        ("mean_teacher", Ssl::On(SslName::MeanTeacher), only(|_| {}), true),
        ("ce_inv_labeled", Ssl::Off, only(|w| w.lambda_ce_inv_labeled = 1.0), false),
        ("ce_inv_unlabeled", Ssl::Off, only(|w| w.lambda_ce_inv_unlabeled = 1.0), false),
        ("ambiguity", Ssl::Off, only(|w| w.lambda_a = 1.0), false),
        ("similarity", Ssl::Off, only(|w| w.lambda_s = 1.0), true),
        (
            "total",
            Ssl::On(SslName::PiModel),
            LossWeights {
                confidence_tau: 0.5,
                ..LossWeights::default()
            },
            true,
        ),
    ]
}

/// With `wa = 0`, the largest analytic and finite-difference derivative of
/// the total with respect to any ambiguity logit.
pub fn ambiguity_logit_gradient() -> (f64, f64) {
    let head = HeadConfig {
        k: 3,
        k_prime: 5,
        embedding_dim: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let weights = LossWeights {
        lambda_a: 0.0,
        confidence_tau: 0.4,
        ..LossWeights::default()
    };
    let raw = |rng: &mut ChaCha8Rng| (0..head.raw_len()).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>();
    let rl: Vec<Vec<f64>> = (0..5).map(|_| raw(&mut rng)).collect();
    let ru: Vec<Vec<f64>> = (0..7).map(|_| raw(&mut rng)).collect();
    let ru2: Vec<Vec<f64>> = (0..7).map(|_| raw(&mut rng)).collect();
    let labels = vec![0, 1, 2, 0, 1];
    let split = |rs: &[Vec<f64>]| rs.iter().map(|r| split_head(r, &head).unwrap()).collect::<Vec<_>>();
    let (ol, ou, ou2) = (split(&rl), split(&ru), split(&ru2));
    let detached = Detached::compute(&ol, &labels, &ou, &weights, &mut rng);
    let ssl = SslContribution {
        per_sample: (0..7).map(|i| i as f64).collect(),
        supervised: vec![0.5; 5],
        ..Default::default()
    };
    let total = |ou: &[ModelOutputs]| {
        let inputs = LossInputs {
            labeled: &ol,
            labels: &labels,
            unlabeled: ou,
            unlabeled_aug: Some(&ou2),
        };
        evaluate(&head, inputs, &ssl, &detached, &weights).unwrap()
    };
    let (_, g) = total(&ou);
    let a = head.ambiguity_index();
    let analytic = g
        .labeled
        .iter()
        .chain(&g.unlabeled)
        .chain(g.unlabeled_aug.as_ref().unwrap())
        .map(|row| row[a].abs())
        .fold(0.0, f64::max);
    let mut numeric: f64 = 0.0;
    for i in 0..ru.len() {
        let mut shifted = ru.clone();
        shifted[i][a] += H;
        let up = total(&split(&shifted)).0.total;
        shifted[i][a] -= 2.0 * H;
        let down = total(&split(&shifted)).0.total;
        numeric = numeric.max(((up - down) / (2.0 * H)).abs());
    }
    (analytic, numeric)
}
