use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{select_best_run, RunMetrics};
use crate::numeric::{mean, sample_std};

use super::{train, RunConfig, TrainingData};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        (!values.is_empty()).then(|| MeanStd {
            mean: mean(values),
            std: sample_std(values),
            n: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRun {
    pub seed: u64,
    pub metrics: RunMetrics,
    pub run_dir: Option<PathBuf>,
}

/// Best run plus mean ± std over the non-degenerated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub runs: Vec<SuiteRun>,
    pub best: Option<usize>,
    pub f1: Option<MeanStd>,
    pub inner_distance: Option<MeanStd>,
    pub diff: Option<MeanStd>,
    pub excluded: usize,
    pub all_degenerated: bool,
}

impl SuiteSummary {
    pub fn best_run(&self) -> Option<&SuiteRun> {
        self.best.map(|i| &self.runs[i])
    }
}

pub fn summarize(runs: Vec<SuiteRun>) -> SuiteSummary {
    let metrics: Vec<RunMetrics> = runs.iter().map(|r| r.metrics.clone()).collect();
    let kept: Vec<&RunMetrics> = metrics.iter().filter(|m| !m.degenerated).collect();
    let collect = |f: fn(&RunMetrics) -> Option<f64>| MeanStd::of(&kept.iter().filter_map(|m| f(m)).collect::<Vec<_>>());
    SuiteSummary {
        best: select_best_run(&metrics),
        f1: collect(|m| m.f1_weighted),
        inner_distance: collect(|m| m.inner_distance),
        diff: collect(|m| m.diff),
        excluded: metrics.len() - kept.len(),
        all_degenerated: kept.is_empty(),
        runs,
    }
}

/// Trains `n_seeds` runs with seeds `config.seed, config.seed + 1, …` and
/// summarizes them. Run directories go under `out_dir/seed_<s>`.
pub fn run_suite(config: &RunConfig, data: &TrainingData, n_seeds: usize, out_dir: Option<&Path>) -> Result<SuiteSummary> {
    if n_seeds == 0 {
        return Err(Error::InvalidConfig("n_seeds must be >= 1".into()));
    }
    let mut runs = Vec::with_capacity(n_seeds);
    for i in 0..n_seeds as u64 {
        let seed = config.seed + i;
        let cfg = RunConfig { seed, ..config.clone() };
        let dir = out_dir.map(|d| d.join(format!("seed_{seed}")));
        let run = train(&cfg, data, dir.as_deref())?;
        runs.push(SuiteRun {
            seed,
            metrics: run.artifacts.final_metrics,
            run_dir: dir,
        });
    }
    Ok(summarize(runs))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn cell_ms(v: Option<MeanStd>) -> String {
    v.map_or_else(|| "-".into(), |m| format!("{:.4} ± {:.4}", m.mean, m.std))
}

/// Plain-text table: one row per seed, then best and mean ± std.
pub fn format_summary(s: &SuiteSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:>10} {:>10} {:>10} {:>8} {:>12}", "seed", "F1", "d", "diff", "fuzzy", "degenerated");
    for r in &s.runs {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{:<10} {:>10} {:>10} {:>10} {:>8.3} {:>12}",
            r.seed,
            cell(m.f1_weighted),
            cell(m.inner_distance),
            cell(m.diff),
            m.fraction_fuzzy_predicted,
            m.degenerated
        );
    }
    match s.best_run() {
        Some(b) => {
            let m = &b.metrics;
            let _ = writeln!(
                out,
                "best (seed {}): F1 {}  d {}  diff {}",
                b.seed,
                cell(m.f1_weighted),
                cell(m.inner_distance),
                cell(m.diff)
            );
        }
        None => {
            let _ = writeln!(out, "best: none (all runs degenerated)");
        }
    }
    let _ = writeln!(
        out,
        "mean ± std over {} runs ({} excluded): F1 {}  d {}  diff {}",
        s.runs.len() - s.excluded,
        s.excluded,
        cell_ms(s.f1),
        cell_ms(s.inner_distance),
        cell_ms(s.diff)
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::DistanceSource;
    use std::collections::BTreeMap;

    fn run(seed: u64, diff: f64, degenerated: bool) -> SuiteRun {
        SuiteRun {
            seed,
            metrics: RunMetrics {
                f1_weighted: Some(0.9),
                inner_distance: Some(0.9 + diff),
                distance_source: DistanceSource::Clusters,
                diff: Some(diff),
                fraction_fuzzy_predicted: 0.5,
                degenerated,
                n_certain: 5,
                n_fuzzy: 5,
                per_class_f1: vec![0.9, 0.9],
                cluster_sizes: BTreeMap::new(),
            },
            run_dir: None,
        }
    }

    #[test]
    fn summary_excludes_degenerated() {
        let s = summarize(vec![run(0, -0.2, false), run(1, -0.5, true), run(2, -0.4, false)]);
        assert_eq!(s.best, Some(2));
        assert_eq!(s.excluded, 1);
        let d = s.diff.unwrap();
        assert!((d.mean + 0.3).abs() < 1e-12);
        assert!((d.std - 0.1414).abs() < 1e-4);
        assert!(format_summary(&s).contains("best (seed 2)"));
    }

    #[test]
    fn all_degenerated_flagged() {
        let s = summarize(vec![run(0, -0.2, true)]);
        assert!(s.all_degenerated);
        assert_eq!(s.best, None);
        assert_eq!(s.diff, None);
        assert!(format_summary(&s).contains("none"));
    }
}
