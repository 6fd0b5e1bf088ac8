mod common;

use common::loss::batch;
use dc3::losses::{dc3_total_loss, LossWeights, TargetOrder};
use dc3::model::HeadConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn scalar_terms_match_oracle() {
    let err = common::loss::scalar_terms(11, 200).unwrap();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn total_matches_oracle_on_random_batches() {
    let err = common::loss::total_batches(12, 60).unwrap();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn disabled_weights_reduce_to_ssl_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let head = HeadConfig::with_classes(3);
    let ou = batch(&mut rng, &head, 8);
    let ssl: Vec<f64> = (0..8).map(|i| i as f64 * 0.25).collect();
    let b = dc3_total_loss(&head, &ssl, &[], &ou, None, &[], &LossWeights::disabled(), &mut rng).unwrap();
    assert_eq!(b.total, ssl.iter().sum::<f64>() / 8.0);
}

#[test]
fn ambiguous_batch_silences_certain_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let head = HeadConfig::with_classes(2);
    let mut ou = batch(&mut rng, &head, 6);
    for o in &mut ou {
        o.p_a = 1.0;
    }
    let labels = [0, 1, 0];
    let ol = batch(&mut rng, &head, 3);
    let b = dc3_total_loss(&head, &[1.0; 6], &ol, &ou, None, &labels, &LossWeights::default(), &mut rng).unwrap();
    assert_eq!(b.ssl_term, 0.0);
    assert_eq!(b.ce_inv_unlabeled, 0.0);
}

#[test]
fn target_order_flag_is_respected() {
    let t = dc3::losses::pseudo_ambiguity_targets(&[0.1, 0.9, 0.5, 0.8, 0.2], 0.6, TargetOrder::Descending);
    assert_eq!(t, common::top_m(&[0.1, 0.9, 0.5, 0.8, 0.2], 0.6));
}
