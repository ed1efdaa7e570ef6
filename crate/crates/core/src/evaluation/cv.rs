//! The nested cross-validation driver and its report.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{stratified_folds, stratified_holdout, EvalError, MetricSet};
use crate::data::ScanRecord;
use crate::model::ModelConfig;
use crate::seed::derive_seed;
use crate::training::{evaluate, fit, CaseFailure, CasePrediction, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub test_cases: Vec<String>,
    pub train_cases: usize,
    pub val_cases: usize,
    pub best_epoch: Option<usize>,
    pub metrics: Option<MetricSet>,
    pub predictions: Vec<CasePrediction>,
    /// Test cases that could not be scored.
    pub excluded: Vec<CaseFailure>,
    /// Why the fold produced no metrics.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    /// Number of fold values behind each mean.
    pub folds: usize,
}

/// Mean and sample standard deviation of each metric over folds.
pub fn summarize(name: &str, metrics: &[MetricSet]) -> Result<MetricSummary, EvalError> {
    if metrics.is_empty() {
        return Err(EvalError::NoSuccessfulFolds(name.to_string()));
    }
    let col = |f: fn(&MetricSet) -> f64| MeanStd::of(&metrics.iter().map(f).collect::<Vec<_>>());
    Ok(MetricSummary {
        accuracy: col(|m| m.accuracy),
        precision: col(|m| m.precision),
        recall: col(|m| m.recall),
        folds: metrics.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVReport {
    pub name: String,
    pub folds: usize,
    pub seed: u64,
    /// SHA-256 over the model config, training config, and fold count.
    pub fingerprint: String,
    pub outcomes: Vec<FoldOutcome>,
    pub failed_folds: usize,
    pub summary: Option<MetricSummary>,
    pub warnings: Vec<String>,
    pub averaging: String,
}

pub fn config_fingerprint(cfg: &ModelConfig, tcfg: &TrainConfig, folds: usize) -> String {
    let json = serde_json::to_string(&(cfg, tcfg, folds)).expect("configs serialize");
    Sha256::digest(json.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Outer folds test each case once; within a fold a stratified hold-out of
/// the remaining cases picks the epoch.
///
/// Folds run in parallel and each derives its own training seed, so the
/// report does not depend on scheduling.
pub fn nested_cv(
    records: &[ScanRecord],
    folds: usize,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<CVReport, EvalError> {
    let cases: Vec<(&str, usize)> = records
        .iter()
        .map(|r| (r.case_id.as_str(), r.label))
        .collect();
    let plan = stratified_folds(&cases, folds, tcfg.seed)?;
    let outcomes: Vec<FoldOutcome> = (0..folds)
        .into_par_iter()
        .map(|f| {
            run_fold(
                records,
                &plan.test_indices(f),
                &plan.train_indices(f),
                f,
                cfg,
                tcfg,
            )
        })
        .collect();

    let mut tested: Vec<&str> = outcomes
        .iter()
        .flat_map(|o| o.test_cases.iter().map(String::as_str))
        .collect();
    tested.sort_unstable();
    let mut all: Vec<&str> = cases.iter().map(|c| c.0).collect();
    all.sort_unstable();
    if tested != all {
        return Err(EvalError::Validation(
            "outer test sets do not partition the cases".into(),
        ));
    }

    let name = cfg.fusion.label().to_string();
    let ok: Vec<MetricSet> = outcomes.iter().filter_map(|o| o.metrics.clone()).collect();
    Ok(CVReport {
        summary: summarize(&name, &ok).ok(),
        failed_folds: folds - ok.len(),
        name,
        folds,
        seed: tcfg.seed,
        fingerprint: config_fingerprint(cfg, tcfg, folds),
        outcomes,
        warnings: plan.warnings,
        averaging: "macro".into(),
    })
}

fn run_fold(
    records: &[ScanRecord],
    test: &[usize],
    rest: &[usize],
    fold: usize,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> FoldOutcome {
    let mut out = FoldOutcome {
        fold,
        test_cases: test.iter().map(|&i| records[i].case_id.clone()).collect(),
        train_cases: 0,
        val_cases: 0,
        best_epoch: None,
        metrics: None,
        predictions: Vec::new(),
        excluded: Vec::new(),
        error: None,
    };
    let fold_seed = derive_seed(tcfg.seed, &[fold as u64]);
    let labels: Vec<usize> = rest.iter().map(|&i| records[i].label).collect();
    let result = stratified_holdout(&labels, tcfg.inner_val_fraction, fold_seed)
        .map_err(|e| e.to_string())
        .and_then(|(t, v)| {
            let pick = |idx: &[usize]| {
                idx.iter()
                    .map(|&j| records[rest[j]].clone())
                    .collect::<Vec<_>>()
            };
            let (train, val) = (pick(&t), pick(&v));
            out.train_cases = train.len();
            out.val_cases = val.len();
            let fold_cfg = TrainConfig {
                seed: fold_seed,
                ..tcfg.clone()
            };
            let fitted = fit(&train, &val, cfg, &fold_cfg, None).map_err(|e| e.to_string())?;
            out.best_epoch = Some(fitted.log.best_epoch);
            let test_records: Vec<ScanRecord> = test.iter().map(|&i| records[i].clone()).collect();
            evaluate(&fitted.params, cfg, &test_records).map_err(|e| e.to_string())
        });
    match result {
        Ok(ev) => {
            out.metrics = ev.metrics;
            out.predictions = ev.predictions;
            out.excluded = ev.failures;
            if out.metrics.is_none() {
                out.error = Some("no test case could be scored".into());
            }
        }
        Err(e) => out.error = Some(e),
    }
    out
}

/// Plain-text table with one row per configuration and `mean ± std` cells.
pub fn render_table(rows: &[(&str, &MetricSummary)]) -> String {
    let headers = ["Input", "Accuracy", "Precision", "Recall"];
    let body: Vec<[String; 4]> = rows
        .iter()
        .map(|(name, s)| {
            [
                name.to_string(),
                s.accuracy.to_string(),
                s.precision.to_string(),
                s.recall.to_string(),
            ]
        })
        .collect();
    let width = |c: usize| {
        body.iter()
            .map(|r| r[c].chars().count())
            .chain([headers[c].len()])
            .max()
            .unwrap_or(0)
    };
    let widths: Vec<usize> = (0..4).map(width).collect();
    let line = |cells: [&str; 4]| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            let pad = widths[i] - c.chars().count();
            s.push_str(c);
            if i < 3 {
                s.push_str(&" ".repeat(pad + 3));
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(headers);
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 9));
    out.push('\n');
    for r in &body {
        out.push_str(&line([&r[0], &r[1], &r[2], &r[3]]));
    }
    let folds: Vec<String> = rows.iter().map(|(_, s)| s.folds.to_string()).collect();
    out.push_str(&format!(
        "\nmean ± sample std over folds ({}); precision and recall are macro-averaged, empty denominators count as 0\n",
        folds.join("/")
    ));
    out
}
