//! Evaluation on the validation split.
//!
//! Certain-routed images are scored with a support-weighted F1 against the
//! majority class of their soft ground truth. Fuzzy-routed images are scored
//! with the mean inner distance of their soft labels to each cluster's
//! centroid. The two combine into `diff = d − F1` (lower is better).
//! Undefined values are `None`, never 0.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::SoftLabel;
use crate::error::{Error, Result};
use crate::model::{route_all_certain, route_prediction, ModelOutputs, Prediction, Route};
use crate::numeric::euclidean;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub prediction: Prediction,
    pub gt_soft: SoftLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Route on `p_a`.
    #[default]
    Routed,
    /// Every image is certain (vanilla baselines without `p_a`).
    AllCertain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceSource {
    /// Fuzzy-routed images grouped by cluster.
    Clusters,
    /// All images grouped by predicted class (all-certain evaluation).
    Classes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub f1_weighted: Option<f64>,
    pub inner_distance: Option<f64>,
    pub distance_source: DistanceSource,
    pub diff: Option<f64>,
    pub fraction_fuzzy_predicted: f64,
    pub degenerated: bool,
    pub n_certain: usize,
    pub n_fuzzy: usize,
    /// F1 per class over certain-routed images.
    pub per_class_f1: Vec<f64>,
    /// Member count per non-empty cluster (or class, see `distance_source`).
    pub cluster_sizes: BTreeMap<usize, usize>,
}

/// Support-weighted F1 over hard labels in `[0, k)`.
///
/// Returns the weighted score and the per-class scores; `None` for an empty
/// input.
pub fn weighted_f1_labels(truth: &[usize], predicted: &[usize], k: usize) -> Option<(f64, Vec<f64>)> {
    assert_eq!(truth.len(), predicted.len(), "aligned labels");
    if truth.is_empty() {
        return None;
    }
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fnn = vec![0usize; k];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fnn[t] += 1;
        }
    }
    let per_class: Vec<f64> = (0..k)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fnn[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect();
    let support: Vec<usize> = (0..k).map(|c| tp[c] + fnn[c]).collect();
    let total: usize = support.iter().sum();
    let weighted = (0..k)
        .map(|c| per_class[c] * support[c] as f64)
        .sum::<f64>()
        / total as f64;
    Some((weighted, per_class))
}

/// Weighted F1 over the certain-routed records.
pub fn weighted_f1(records: &[EvalRecord]) -> Option<f64> {
    let k = records.first()?.gt_soft.num_classes();
    let (truth, pred): (Vec<usize>, Vec<usize>) = records
        .iter()
        .filter_map(|r| match r.prediction.route {
            Route::Certain { class } => Some((r.gt_soft.argmax(), class)),
            Route::Fuzzy { .. } => None,
        })
        .unzip();
    weighted_f1_labels(&truth, &pred, k).map(|(w, _)| w)
}

/// Mean over groups of the mean distance of members to the group centroid.
pub fn inner_distance_of_groups<'a, I>(groups: I) -> Option<f64>
where
    I: IntoIterator<Item = &'a [&'a SoftLabel]>,
{
    let mut per_group = Vec::new();
    for members in groups {
        if members.is_empty() {
            continue;
        }
        let k = members[0].num_classes();
        let n = members.len() as f64;
        let mut centroid = vec![0.0; k];
        for m in members {
            for (c, p) in centroid.iter_mut().zip(m.probs()) {
                *c += p / n;
            }
        }
        let mean_dist = members
            .iter()
            .map(|m| euclidean(m.probs(), &centroid))
            .sum::<f64>()
            / n;
        per_group.push(mean_dist);
    }
    if per_group.is_empty() {
        None
    } else {
        Some(per_group.iter().sum::<f64>() / per_group.len() as f64)
    }
}

fn group_by<F>(records: &[EvalRecord], key: F) -> BTreeMap<usize, Vec<&SoftLabel>>
where
    F: Fn(&Route) -> Option<usize>,
{
    let mut groups: BTreeMap<usize, Vec<&SoftLabel>> = BTreeMap::new();
    for r in records {
        if let Some(g) = key(&r.prediction.route) {
            groups.entry(g).or_default().push(&r.gt_soft);
        }
    }
    groups
}

/// Inner distance over fuzzy-routed records grouped by cluster.
pub fn inner_distance(records: &[EvalRecord]) -> Option<f64> {
    let groups = group_by(records, |r| match *r {
        Route::Fuzzy { cluster } => Some(cluster),
        Route::Certain { .. } => None,
    });
    inner_distance_of_groups(groups.values().map(Vec::as_slice))
}

/// Inner distance with predicted classes standing in for clusters.
pub fn inner_distance_by_class(records: &[EvalRecord]) -> Option<f64> {
    let groups = group_by(records, |r| match *r {
        Route::Certain { class } => Some(class),
        Route::Fuzzy { .. } => None,
    });
    inner_distance_of_groups(groups.values().map(Vec::as_slice))
}

/// True when at most 10% or at least 90% of records are routed fuzzy.
pub fn degeneration_check(records: &[EvalRecord]) -> bool {
    let n = records.len();
    let n_fuzzy = records.iter().filter(|r| r.prediction.is_fuzzy()).count();
    n_fuzzy * 10 <= n || n_fuzzy * 10 >= n * 9
}

pub fn diff_score(f1: Option<f64>, d: Option<f64>) -> Option<f64> {
    Some(d? - f1?)
}

/// All metrics for a set of routed records.
pub fn compute_metrics(records: &[EvalRecord], mode: EvalMode) -> Result<RunMetrics> {
    let first = records.first().ok_or(Error::EmptyBatch("validation set"))?;
    let k = first.gt_soft.num_classes();
    let n_fuzzy = records.iter().filter(|r| r.prediction.is_fuzzy()).count();
    let n_certain = records.len() - n_fuzzy;

    let (truth, pred): (Vec<usize>, Vec<usize>) = records
        .iter()
        .filter_map(|r| match r.prediction.route {
            Route::Certain { class } => Some((r.gt_soft.argmax(), class)),
            Route::Fuzzy { .. } => None,
        })
        .unzip();
    let (f1_weighted, per_class_f1) = match weighted_f1_labels(&truth, &pred, k) {
        Some((w, per)) => (Some(w), per),
        None => (None, vec![0.0; k]),
    };

    let (inner_distance, distance_source, groups, degenerated) = match mode {
        EvalMode::Routed => {
            let groups = group_by(records, |r| match *r {
                Route::Fuzzy { cluster } => Some(cluster),
                Route::Certain { .. } => None,
            });
            let d = inner_distance_of_groups(groups.values().map(Vec::as_slice));
            (d, DistanceSource::Clusters, groups, degeneration_check(records))
        }
        EvalMode::AllCertain => {
            let groups = group_by(records, |r| match *r {
                Route::Certain { class } => Some(class),
                Route::Fuzzy { .. } => None,
            });
            let d = inner_distance_of_groups(groups.values().map(Vec::as_slice));
            (d, DistanceSource::Classes, groups, false)
        }
    };

    Ok(RunMetrics {
        f1_weighted,
        inner_distance,
        distance_source,
        diff: diff_score(f1_weighted, inner_distance),
        fraction_fuzzy_predicted: n_fuzzy as f64 / records.len() as f64,
        degenerated,
        n_certain,
        n_fuzzy,
        per_class_f1,
        cluster_sizes: groups.into_iter().map(|(g, m)| (g, m.len())).collect(),
    })
}

/// Routes model outputs and pairs them with ground truth.
pub fn records_from_outputs(
    ids: &[String],
    outputs: &[ModelOutputs],
    gt: &[SoftLabel],
    mode: EvalMode,
) -> Vec<EvalRecord> {
    ids.iter()
        .zip(outputs)
        .zip(gt)
        .map(|((id, o), g)| EvalRecord {
            image_id: id.clone(),
            prediction: match mode {
                EvalMode::Routed => route_prediction(o),
                EvalMode::AllCertain => route_all_certain(o),
            },
            gt_soft: g.clone(),
        })
        .collect()
}

/// Index of the lowest diff among non-degenerated runs with a defined diff.
pub fn select_best_run(runs: &[RunMetrics]) -> Option<usize> {
    runs.iter()
        .enumerate()
        .filter(|(_, r)| !r.degenerated)
        .filter_map(|(i, r)| r.diff.map(|d| (i, d)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn soft(p: &[f64]) -> SoftLabel {
        SoftLabel::new(p.to_vec()).unwrap()
    }

    fn rec(route: Route, gt: &[f64]) -> EvalRecord {
        EvalRecord {
            image_id: String::new(),
            prediction: Prediction { route, p_a: 0.0 },
            gt_soft: soft(gt),
        }
    }

    fn certain(class: usize, gt: &[f64]) -> EvalRecord {
        rec(Route::Certain { class }, gt)
    }

    fn fuzzy(cluster: usize, gt: &[f64]) -> EvalRecord {
        rec(Route::Fuzzy { cluster }, gt)
    }

    #[test]
    fn f1_perfect() {
        let r = vec![certain(0, &[1.0, 0.0]), certain(1, &[0.2, 0.8]), certain(0, &[0.6, 0.4])];
        assert_eq!(weighted_f1(&r), Some(1.0));
    }

    #[test]
    fn f1_support_weighted() {
        // class 0: support 3, all correct; class 1: support 1, predicted as class 2
        let (w, per) = weighted_f1_labels(&[0, 0, 0, 1], &[0, 0, 0, 2], 3).unwrap();
        assert_eq!(per[0], 1.0);
        assert_eq!(per[1], 0.0);
        assert_eq!(w, 0.75);
    }

    #[test]
    fn f1_undefined_without_certain() {
        assert_eq!(weighted_f1(&[fuzzy(0, &[0.5, 0.5])]), None);
        assert_eq!(weighted_f1(&[]), None);
    }

    #[test]
    fn distance_examples() {
        let same = vec![fuzzy(0, &[0.3, 0.7]), fuzzy(0, &[0.3, 0.7])];
        assert_eq!(inner_distance(&same), Some(0.0));

        let d = inner_distance(&[fuzzy(1, &[1.0, 0.0]), fuzzy(1, &[0.0, 1.0])]).unwrap();
        assert!((d - 0.5f64.sqrt()).abs() < 1e-12);

        let d = inner_distance(&[
            fuzzy(0, &[1.0, 0.0]),
            fuzzy(0, &[1.0, 0.0]),
            fuzzy(4, &[0.5, 0.5]),
            fuzzy(4, &[0.7, 0.3]),
        ])
        .unwrap();
        // second cluster: centroid (0.6, 0.4), both members at sqrt(0.02)
        assert!((d - 0.02f64.sqrt() / 2.0).abs() < 1e-12);
        assert!((d - 0.0707).abs() < 1e-4);

        assert_eq!(inner_distance(&[certain(0, &[1.0, 0.0])]), None);
    }

    #[test]
    fn degeneration_boundaries() {
        let make = |n_fuzzy: usize| -> Vec<EvalRecord> {
            (0..100)
                .map(|i| {
                    if i < n_fuzzy {
                        fuzzy(0, &[0.5, 0.5])
                    } else {
                        certain(0, &[1.0, 0.0])
                    }
                })
                .collect()
        };
        assert!(degeneration_check(&make(5)));
        assert!(degeneration_check(&make(10)));
        assert!(!degeneration_check(&make(11)));
        assert!(!degeneration_check(&make(50)));
        assert!(!degeneration_check(&make(89)));
        assert!(degeneration_check(&make(90)));
    }

    #[test]
    fn diff_examples() {
        assert!((diff_score(Some(0.8), Some(0.3)).unwrap() + 0.5).abs() < 1e-12);
        assert_eq!(diff_score(Some(0.0), Some(0.0)), Some(0.0));
        assert_eq!(diff_score(Some(1.0), Some(0.0)), Some(-1.0));
        assert_eq!(diff_score(None, Some(0.0)), None);
        assert_eq!(diff_score(Some(1.0), None), None);
    }

    fn run(diff: f64, degenerated: bool) -> RunMetrics {
        RunMetrics {
            f1_weighted: Some(0.0),
            inner_distance: Some(diff),
            distance_source: DistanceSource::Clusters,
            diff: Some(diff),
            fraction_fuzzy_predicted: 0.5,
            degenerated,
            n_certain: 1,
            n_fuzzy: 1,
            per_class_f1: vec![],
            cluster_sizes: BTreeMap::new(),
        }
    }

    #[test]
    fn best_run_selection() {
        let runs = vec![run(-0.2, false), run(-0.5, true), run(-0.3, false)];
        assert_eq!(select_best_run(&runs), Some(2));
        assert_eq!(select_best_run(&runs[..1]), Some(0));
        assert_eq!(select_best_run(&[run(-0.2, true), run(-0.9, true)]), None);
    }

    #[test]
    fn all_certain_perfect_model() {
        let r: Vec<_> = (0..10).map(|i| certain(i % 2, if i % 2 == 0 { &[1.0, 0.0] } else { &[0.0, 1.0] })).collect();
        let m = compute_metrics(&r, EvalMode::Routed).unwrap();
        assert_eq!(m.f1_weighted, Some(1.0));
        assert_eq!(m.inner_distance, None);
        assert_eq!(m.diff, None);
        assert!(m.degenerated);

        let m = compute_metrics(&r, EvalMode::AllCertain).unwrap();
        assert_eq!(m.n_fuzzy, 0);
        assert_eq!(m.distance_source, DistanceSource::Classes);
        assert_eq!(m.inner_distance, Some(0.0));
        assert!(!m.degenerated);
    }

    #[test]
    fn empty_records_rejected() {
        assert!(compute_metrics(&[], EvalMode::Routed).is_err());
    }

    proptest::proptest! {
        #[test]
        fn distance_bounded_and_relabel_invariant(
            probs in proptest::collection::vec((0.0f64..1.0, 0usize..4), 1..40),
            shift in 1usize..50,
        ) {
            let recs: Vec<_> = probs.iter().map(|&(p, c)| fuzzy(c, &[p, 1.0 - p])).collect();
            let d = inner_distance(&recs).unwrap();
            proptest::prop_assert!(d <= 2f64.sqrt() + 1e-12);
            let relabeled: Vec<_> = probs.iter().map(|&(p, c)| fuzzy((c * 7 + shift) % 97, &[p, 1.0 - p])).collect();
            let d2 = inner_distance(&relabeled).unwrap();
            proptest::prop_assert!((d - d2).abs() < 1e-12);
        }

        #[test]
        fn f1_order_invariant(pairs in proptest::collection::vec((0usize..3, 0usize..3), 1..40), rot in 0usize..40) {
            let (t, p): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let a = weighted_f1_labels(&t, &p, 3).unwrap().0;
            let mut rotated = pairs.clone();
            let r = rot % rotated.len();
            rotated.rotate_left(r);
            let (t2, p2): (Vec<_>, Vec<_>) = rotated.into_iter().unzip();
            let b = weighted_f1_labels(&t2, &p2, 3).unwrap().0;
            proptest::prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
