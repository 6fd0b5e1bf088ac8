//! Central finite differences against the analytic gradients of every loss
//! term, through a two-layer network.

mod common;

use common::grad::{self, Ssl};
use dc3::losses::LossWeights;
use dc3::ssl::SslName;

fn check(name: &str, ssl: Ssl, weights: LossWeights, second: bool) {
    let err = grad::check(ssl, &weights, second).unwrap_or_else(|e| panic!("{name}: {e}"));
    assert!(err < 1e-4, "{name}: relative error {err:e}");
}

#[test]
fn supervised_and_pseudo_label() {
    check("pseudo_label", Ssl::On(SslName::PseudoLabel), grad::only(|_| {}), false);
}

#[test]
fn pi_model_consistency() {
    check("pi_model", Ssl::On(SslName::PiModel), grad::only(|_| {}), true);
}

#[test]
fn mean_teacher_consistency() {
    check("mean_teacher", Ssl::On(SslName::MeanTeacher), grad::only(|_| {}), true);
}

#[test]
fn inverse_ce_labeled() {
    check("ce_inv_labeled", Ssl::Off, grad::only(|w| w.lambda_ce_inv_labeled = 1.0), false);
}

#[test]
fn inverse_ce_unlabeled() {
    check("ce_inv_unlabeled", Ssl::Off, grad::only(|w| w.lambda_ce_inv_unlabeled = 1.0), false);
}

#[test]
fn ambiguity_bce() {
    check("ambiguity", Ssl::Off, grad::only(|w| w.lambda_a = 1.0), false);
}

#[test]
fn similarity() {
    check("similarity", Ssl::Off, grad::only(|w| w.lambda_s = 1.0), true);
}

#[test]
fn full_objective() {
    let w = LossWeights {
        confidence_tau: 0.5,
        ..LossWeights::default()
    };
    check("total", Ssl::On(SslName::PiModel), w, true);
}

#[test]
fn ambiguity_logit_only_receives_gradient_from_its_own_term() {
    let (analytic, numeric) = grad::ambiguity_logit_gradient();
    assert!(analytic <= 1e-8, "analytic {analytic:e}");
    assert!(numeric <= 1e-8, "numeric {numeric:e}");
}
