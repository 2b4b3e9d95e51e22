//! Resampled validation of summary methods: stratified splits, internal
//! and external runs, the cluster-selection study, and their CSV reports.
//!
//! Every split is an independent job. All randomness is derived from the
//! master seed before dispatch, so results do not depend on scheduling.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::classifier::{
    default_lambda_grid, evaluate, fit_ridge_logistic, loo_cv_lambda, ClassifierError, Design,
    PerformanceReport,
};
use crate::data::{DataError, Labels, PeakTable, SampleSet};
use crate::mixed::MixedConfig;
use crate::selection::{apply_plan, optimize_fraction, select_fixed_fraction, SelectionError};
use crate::variants::{
    common_clusters, cr_pred_from, cr_prep, cr_reest_from, fit_side, summarize_baseline, CrSide,
    CrSplit, Method, MethodSpec, ParameterSource, Shrinkage, SummaryMatrix,
};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("cannot stratify: {0}")]
    Stratify(String),
    #[error("calibration fraction must lie in (0, 1), got {0}")]
    BadRatio(f64),
    #[error("{0} is not a censored-regression variant")]
    NotCensoredRegression(MethodSpec),
    #[error("malformed report: {0}")]
    Malformed(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    pub splits: usize,
    /// Calibration fraction of each class.
    pub cal_frac: f64,
    pub mixed: MixedConfig,
    /// Ascending λ grid; `None` uses [`default_lambda_grid`].
    pub lambda_grid: Option<Vec<f64>>,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            splits: 10,
            cal_frac: 159.0 / 273.0,
            mixed: MixedConfig::default(),
            lambda_grid: None,
            threshold: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitScheme {
    pub split_id: usize,
    /// Ascending row indices.
    pub cal_rows: Vec<usize>,
    pub val_rows: Vec<usize>,
    pub seed: u64,
}

/// `r` stratified calibration/validation splits. Each class contributes
/// `round(ratio·n_class)` calibration rows.
pub fn make_splits(
    labels: &Labels,
    r: usize,
    ratio: f64,
    seed: u64,
) -> Result<Vec<SplitScheme>, HarnessError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(HarnessError::BadRatio(ratio));
    }
    let cases: Vec<usize> = (0..labels.len()).filter(|&i| labels.outcome[i]).collect();
    let controls: Vec<usize> = (0..labels.len()).filter(|&i| !labels.outcome[i]).collect();
    let take = |class: &[usize], name: &str| -> Result<usize, HarnessError> {
        let n_cal = (ratio * class.len() as f64).round() as usize;
        if n_cal < 2 || class.len() - n_cal < 1 {
            return Err(HarnessError::Stratify(format!(
                "{} {name} give {n_cal} calibration and {} validation rows",
                class.len(),
                class.len().saturating_sub(n_cal)
            )));
        }
        Ok(n_cal)
    };
    let (n_case, n_ctrl) = (take(&cases, "cases")?, take(&controls, "controls")?);
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..r).map(|_| master.next_u64()).collect();
    Ok(seeds
        .into_iter()
        .enumerate()
        .map(|(split_id, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut cal = Vec::with_capacity(n_case + n_ctrl);
            let mut val = Vec::new();
            for (class, n_cal) in [(&cases, n_case), (&controls, n_ctrl)] {
                let mut idx = class.clone();
                idx.shuffle(&mut rng);
                cal.extend_from_slice(&idx[..n_cal]);
                val.extend_from_slice(&idx[n_cal..]);
            }
            cal.sort_unstable();
            val.sort_unstable();
            SplitScheme {
                split_id,
                cal_rows: cal,
                val_rows: val,
                seed: s,
            }
        })
        .collect())
}

/// Validated metrics of one (method, split) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMetrics {
    pub error_rate: f64,
    pub brier: f64,
    pub deviance: f64,
    pub auc: Option<f64>,
    pub n_val: usize,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: MethodSpec,
    pub split: usize,
    /// Cluster fraction, for selection runs.
    pub fraction: Option<f64>,
    pub outcome: Result<CellMetrics, String>,
}

/// Mean and standard error of one metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    /// Sample SD / √R; `None` for a single split.
    pub se: Option<f64>,
}

fn estimate(values: &[f64], with_se: bool) -> Option<Estimate> {
    if values.is_empty() {
        return None;
    }
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    let se = (with_se && values.len() > 1).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
        (var / r).sqrt()
    });
    Some(Estimate { mean, se })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub method: MethodSpec,
    pub n_ok: usize,
    pub n_failed: usize,
    pub error_rate: Option<Estimate>,
    pub brier: Option<Estimate>,
    pub deviance: Option<Estimate>,
    /// Over splits whose validation rows hold both classes.
    pub auc: Option<Estimate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<TableRow>,
    pub per_split: Vec<ReportRow>,
    /// Single fixed split: no standard errors.
    pub external: bool,
}

impl ComparisonTable {
    /// Aggregate per-split rows, one table row per method in first-seen
    /// order. Failed cells are counted and left out of the means.
    pub fn from_rows(per_split: Vec<ReportRow>, external: bool) -> Self {
        let mut order: Vec<MethodSpec> = Vec::new();
        for r in &per_split {
            if !order.contains(&r.method) {
                order.push(r.method);
            }
        }
        let rows = order
            .into_iter()
            .map(|m| {
                let ok: Vec<&CellMetrics> = per_split
                    .iter()
                    .filter(|r| r.method == m)
                    .filter_map(|r| r.outcome.as_ref().ok())
                    .collect();
                let n_failed = per_split
                    .iter()
                    .filter(|r| r.method == m && r.outcome.is_err())
                    .count();
                let col = |f: fn(&CellMetrics) -> f64| {
                    estimate(&ok.iter().map(|c| f(c)).collect::<Vec<_>>(), !external)
                };
                let aucs: Vec<f64> = ok.iter().filter_map(|c| c.auc).collect();
                TableRow {
                    method: m,
                    n_ok: ok.len(),
                    n_failed,
                    error_rate: col(|c| c.error_rate),
                    brier: col(|c| c.brier),
                    deviance: col(|c| c.deviance),
                    auc: estimate(&aucs, !external),
                }
            })
            .collect();
        Self {
            rows,
            per_split,
            external,
        }
    }

    pub fn row(&self, method: MethodSpec) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// `method,n_ok,n_failed,error_rate,error_rate_se,brier,brier_se,deviance,deviance_se,auc,auc_se`.
    pub fn write_summary_csv<W: Write>(&self, writer: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "method",
            "n_ok",
            "n_failed",
            "error_rate",
            "error_rate_se",
            "brier",
            "brier_se",
            "deviance",
            "deviance_se",
            "auc",
            "auc_se",
        ])?;
        for r in &self.rows {
            let mut rec = vec![
                r.method.to_string(),
                r.n_ok.to_string(),
                r.n_failed.to_string(),
            ];
            for e in [r.error_rate, r.brier, r.deviance, r.auc] {
                rec.push(e.map_or(String::new(), |e| e.mean.to_string()));
                rec.push(
                    e.and_then(|e| e.se)
                        .map_or(String::new(), |s| s.to_string()),
                );
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Successful cells as `method,split,error_rate,brier,deviance,auc,n_val,lambda,F`.
    pub fn write_report_csv<W: Write>(&self, writer: W) -> Result<(), HarnessError> {
        write_report(&self.per_split, writer)
    }

    /// Failed cells as `method,split,F,reason`.
    pub fn write_failures_csv<W: Write>(&self, writer: W) -> Result<(), HarnessError> {
        write_failures(&self.per_split, writer)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

pub fn write_report<W: Write>(rows: &[ReportRow], writer: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "method",
        "split",
        "error_rate",
        "brier",
        "deviance",
        "auc",
        "n_val",
        "lambda",
        "F",
    ])?;
    for r in rows {
        if let Ok(c) = &r.outcome {
            w.write_record([
                r.method.to_string(),
                r.split.to_string(),
                c.error_rate.to_string(),
                c.brier.to_string(),
                c.deviance.to_string(),
                fmt_opt(c.auc),
                c.n_val.to_string(),
                c.lambda.to_string(),
                fmt_opt(r.fraction),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parse a report written by [`write_report`]; every row is a success.
pub fn read_report<R: std::io::Read>(reader: R) -> Result<Vec<ReportRow>, HarnessError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| HarnessError::Malformed(format!("missing column `{name}`")))
    };
    let idx = [
        col("method")?,
        col("split")?,
        col("error_rate")?,
        col("brier")?,
        col("deviance")?,
        col("auc")?,
        col("n_val")?,
        col("lambda")?,
        col("F")?,
    ];
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(idx[i]).unwrap_or("");
        let bad = |i: usize| {
            HarnessError::Malformed(format!(
                "bad value `{}` in line {}",
                field(i),
                rows.len() + 2
            ))
        };
        let num = |i: usize| field(i).parse::<f64>().map_err(|_| bad(i));
        let opt = |i: usize| {
            if field(i).is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        rows.push(ReportRow {
            method: field(0).parse().map_err(|_| bad(0))?,
            split: field(1).parse().map_err(|_| bad(1))?,
            fraction: opt(8)?,
            outcome: Ok(CellMetrics {
                error_rate: num(2)?,
                brier: num(3)?,
                deviance: num(4)?,
                auc: opt(5)?,
                n_val: field(6).parse().map_err(|_| bad(6))?,
                lambda: num(7)?,
            }),
        });
    }
    Ok(rows)
}

pub fn write_failures<W: Write>(rows: &[ReportRow], writer: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["method", "split", "F", "reason"])?;
    for r in rows {
        if let Err(reason) = &r.outcome {
            w.write_record([
                r.method.to_string(),
                r.split.to_string(),
                fmt_opt(r.fraction),
                reason.clone(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Tune λ by leave-one-out on the calibration matrix, refit, and score the
/// validation matrix. Both matrices are first reduced to common clusters.
pub fn evaluate_pair(
    cal: &SummaryMatrix,
    g_cal: &[bool],
    val: &SummaryMatrix,
    g_val: &[bool],
    config: &HarnessConfig,
) -> Result<(CellMetrics, PerformanceReport), ClassifierError> {
    let (cal, val) = common_clusters(cal, val);
    let grid = config
        .lambda_grid
        .clone()
        .unwrap_or_else(|| default_lambda_grid(cal.n_rows(), cal.n_cols()));
    let x = Design::from_matrix(&cal)?;
    let lambda = loo_cv_lambda(&x, g_cal, &grid)?.lambda_star;
    fit_and_score(&x, g_cal, &val, g_val, lambda, config.threshold)
}

fn fit_and_score(
    x: &Design<'_>,
    g_cal: &[bool],
    val: &SummaryMatrix,
    g_val: &[bool],
    lambda: f64,
    threshold: f64,
) -> Result<(CellMetrics, PerformanceReport), ClassifierError> {
    let model = fit_ridge_logistic(x, g_cal, lambda)?;
    let report = evaluate(&model, &Design::from_matrix(val)?, g_val, threshold)?;
    let cell = CellMetrics {
        error_rate: report.error_rate,
        brier: report.brier,
        deviance: report.deviance,
        auc: report.auc,
        n_val: report.n_val,
        lambda,
    };
    Ok((cell, report))
}

/// Summaries of one split for every requested method. CR Prep fits come
/// from `prep` (all rows); CR Pred and CR Reest share one calibration fit.
struct SplitSummaries<'a> {
    cal: SampleSet<'a>,
    val: SampleSet<'a>,
    cal_rows: Vec<usize>,
    val_rows: Vec<usize>,
    prep: Option<&'a Result<CrSide, String>>,
    pred: Option<Result<CrSplit, String>>,
    reest: Option<Result<CrSplit, String>>,
}

impl<'a> SplitSummaries<'a> {
    fn new(
        cal: SampleSet<'a>,
        val: SampleSet<'a>,
        cal_rows: Vec<usize>,
        val_rows: Vec<usize>,
        prep: Option<&'a Result<CrSide, String>>,
        methods: &[MethodSpec],
        config: &MixedConfig,
    ) -> Self {
        let uses = |m: Method| methods.iter().any(|s| s.method == m);
        let cal_side = (uses(Method::CrPred) || uses(Method::CrReest)).then(|| {
            fit_side(&cal, Method::CrPred, ParameterSource::Calibration, config)
                .map_err(|e| e.to_string())
        });
        let derive = |m: Method| -> Option<Result<CrSplit, String>> {
            if !uses(m) {
                return None;
            }
            let side = match cal_side.as_ref()? {
                Ok(s) => s.clone(),
                Err(e) => return Some(Err(e.clone())),
            };
            let out = if m == Method::CrPred {
                cr_pred_from(side, &val, config)
            } else {
                cr_reest_from(side, &val, config)
            };
            Some(out.map_err(|e| e.to_string()))
        };
        let pred = derive(Method::CrPred);
        let reest = derive(Method::CrReest);
        Self {
            cal,
            val,
            cal_rows,
            val_rows,
            prep,
            pred,
            reest,
        }
    }

    /// Calibration matrix, validation matrix, and calibration-side τ² per
    /// calibration column.
    fn matrices(
        &self,
        spec: MethodSpec,
    ) -> Result<(SummaryMatrix, SummaryMatrix, Option<Vec<f64>>), String> {
        let tau = |side: &CrSide, m: &SummaryMatrix| {
            let by_id: HashMap<usize, f64> = side
                .cluster_ids()
                .into_iter()
                .zip(side.tau2_by_cluster())
                .collect();
            m.cluster_ids
                .iter()
                .map(|c| by_id.get(c).copied().unwrap_or(0.0))
                .collect::<Vec<f64>>()
        };
        let shrinkage = if spec.shrinkage == Shrinkage::Unshrunken {
            Shrinkage::Unshrunken
        } else {
            Shrinkage::Shrunken
        };
        match spec.method {
            Method::CrPrep => {
                let side = self
                    .prep
                    .ok_or("CR Prep fits missing")?
                    .as_ref()
                    .map_err(Clone::clone)?;
                let m = side.matrix(shrinkage);
                let (c, v) = (m.select_rows(&self.cal_rows), m.select_rows(&self.val_rows));
                let t = tau(side, &c);
                Ok((c, v, Some(t)))
            }
            Method::CrPred | Method::CrReest => {
                let split = if spec.method == Method::CrPred {
                    &self.pred
                } else {
                    &self.reest
                };
                let split = split
                    .as_ref()
                    .ok_or("variant not prepared")?
                    .as_ref()
                    .map_err(Clone::clone)?;
                let (c, v) = split.pair(shrinkage);
                let t = tau(&split.cal, &c);
                Ok((c, v, Some(t)))
            }
            m => {
                let (c, v) =
                    summarize_baseline(m, &self.cal, Some(&self.val)).map_err(|e| e.to_string())?;
                Ok((c, v.expect("validation rows were supplied"), None))
            }
        }
    }
}

fn prep_side(
    all: &SampleSet<'_>,
    methods: &[MethodSpec],
    config: &MixedConfig,
) -> Option<Result<CrSide, String>> {
    methods
        .iter()
        .any(|s| s.method == Method::CrPrep)
        .then(|| cr_prep(all, config).map_err(|e| e.to_string()))
}

fn run_cells(
    summaries: &SplitSummaries<'_>,
    split: usize,
    methods: &[MethodSpec],
    g_cal: &[bool],
    g_val: &[bool],
    config: &HarnessConfig,
) -> Vec<ReportRow> {
    methods
        .iter()
        .map(|&method| {
            let outcome = summaries.matrices(method).and_then(|(c, v, _)| {
                evaluate_pair(&c, g_cal, &v, g_val, config)
                    .map(|(cell, _)| cell)
                    .map_err(|e| e.to_string())
            });
            ReportRow {
                method,
                split,
                fraction: None,
                outcome,
            }
        })
        .collect()
}

/// Repeated internal validation over stratified splits of one table.
pub fn run_internal(
    table: &PeakTable,
    labels: &Labels,
    methods: &[MethodSpec],
    config: &HarnessConfig,
) -> Result<ComparisonTable, HarnessError> {
    let g = labels.aligned(table.sample_ids())?;
    let relabeled = Labels::new(table.sample_ids().to_vec(), g.clone())?;
    let splits = make_splits(&relabeled, config.splits, config.cal_frac, config.seed)?;
    let all = SampleSet::whole(table);
    let prep = prep_side(&all, methods, &config.mixed);
    let per_split: Vec<Vec<ReportRow>> = splits
        .par_iter()
        .map(|s| {
            let pick = |rows: &[usize]| rows.iter().map(|&i| g[i]).collect::<Vec<bool>>();
            let (g_cal, g_val) = (pick(&s.cal_rows), pick(&s.val_rows));
            let sets = SampleSet::rows(table, &s.cal_rows)
                .and_then(|c| Ok((c, SampleSet::rows(table, &s.val_rows)?)));
            match sets {
                Ok((cal, val)) => {
                    let sums = SplitSummaries::new(
                        cal,
                        val,
                        s.cal_rows.clone(),
                        s.val_rows.clone(),
                        prep.as_ref(),
                        methods,
                        &config.mixed,
                    );
                    run_cells(&sums, s.split_id, methods, &g_cal, &g_val, config)
                }
                Err(e) => failed_rows(methods, s.split_id, &e.to_string()),
            }
        })
        .collect();
    Ok(ComparisonTable::from_rows(
        per_split.into_iter().flatten().collect(),
        false,
    ))
}

fn failed_rows(methods: &[MethodSpec], split: usize, reason: &str) -> Vec<ReportRow> {
    methods
        .iter()
        .map(|&method| ReportRow {
            method,
            split,
            fraction: None,
            outcome: Err(reason.to_string()),
        })
        .collect()
}

/// One evaluation per method with a fixed calibration table and an
/// independent validation table. CR Prep fits on both tables together.
pub fn run_external(
    cal_table: &PeakTable,
    cal_labels: &Labels,
    val_table: &PeakTable,
    val_labels: &Labels,
    methods: &[MethodSpec],
    config: &HarnessConfig,
) -> Result<ComparisonTable, HarnessError> {
    let g_cal = cal_labels.aligned(cal_table.sample_ids())?;
    let g_val = val_labels.aligned(val_table.sample_ids())?;
    let cal = SampleSet::whole(cal_table);
    let val = SampleSet::whole(val_table);
    let all = cal.concat(&val)?;
    let prep = prep_side(&all, methods, &config.mixed);
    let n_cal = cal.len();
    let cal_rows: Vec<usize> = (0..n_cal).collect();
    let val_rows: Vec<usize> = (n_cal..n_cal + val.len()).collect();
    let sums = SplitSummaries::new(
        cal,
        val,
        cal_rows,
        val_rows,
        prep.as_ref(),
        methods,
        &config.mixed,
    );
    let rows = run_cells(&sums, 0, methods, &g_cal, &g_val, config);
    Ok(ComparisonTable::from_rows(rows, true))
}

/// One arm of the selection study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FractionArm {
    Fixed(f64),
    /// Fraction chosen per split by [`optimize_fraction`].
    Cv,
}

impl std::fmt::Display for FractionArm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FractionArm::Fixed(x) => write!(f, "{x}"),
            FractionArm::Cv => f.write_str("cv"),
        }
    }
}

impl std::str::FromStr for FractionArm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("cv") {
            return Ok(FractionArm::Cv);
        }
        match s.parse::<f64>() {
            Ok(f) if f > 0.0 && f <= 1.0 => Ok(FractionArm::Fixed(f)),
            _ => Err(format!("`{s}` is neither a fraction in (0, 1] nor `cv`")),
        }
    }
}

impl FractionArm {
    pub fn standard() -> Vec<FractionArm> {
        vec![
            FractionArm::Fixed(1.0),
            FractionArm::Fixed(0.5),
            FractionArm::Fixed(0.2),
            FractionArm::Fixed(0.1),
            FractionArm::Cv,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRow {
    pub arm: FractionArm,
    pub split: usize,
    /// The applied fraction (the chosen one for the CV arm).
    pub fraction: Option<f64>,
    pub n_kept: Option<usize>,
    pub outcome: Result<CellMetrics, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionStudy {
    pub variant: MethodSpec,
    pub rows: Vec<SelectionRow>,
}

impl SelectionStudy {
    /// Validated error rates of one arm, by split, failures skipped.
    pub fn errors(&self, arm: FractionArm) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.arm == arm)
            .filter_map(|r| r.outcome.as_ref().ok().map(|c| c.error_rate))
            .collect()
    }

    /// Long format:
    /// `arm,split,F,n_kept,error_rate,brier,deviance,auc,n_val,lambda,status`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "arm",
            "split",
            "F",
            "n_kept",
            "error_rate",
            "brier",
            "deviance",
            "auc",
            "n_val",
            "lambda",
            "status",
        ])?;
        for r in &self.rows {
            let mut rec = vec![
                r.arm.to_string(),
                r.split.to_string(),
                fmt_opt(r.fraction),
                r.n_kept.map_or(String::new(), |k| k.to_string()),
            ];
            match &r.outcome {
                Ok(c) => {
                    rec.extend([
                        c.error_rate.to_string(),
                        c.brier.to_string(),
                        c.deviance.to_string(),
                        fmt_opt(c.auc),
                        c.n_val.to_string(),
                        c.lambda.to_string(),
                        "ok".to_string(),
                    ]);
                }
                Err(e) => {
                    rec.extend(std::iter::repeat(String::new()).take(6));
                    rec.push(format!("failed: {e}"));
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn selection_cell(
    arm: FractionArm,
    cal: &SummaryMatrix,
    val: &SummaryMatrix,
    tau2: &[f64],
    g_cal: &[bool],
    g_val: &[bool],
    config: &HarnessConfig,
) -> (Option<f64>, Option<usize>, Result<CellMetrics, String>) {
    let grid = config
        .lambda_grid
        .clone()
        .unwrap_or_else(|| default_lambda_grid(cal.n_rows(), cal.n_cols()));
    let run = || -> Result<(f64, usize, CellMetrics), String> {
        let err = |e: SelectionError| e.to_string();
        let (fraction, plan, lambda) = match arm {
            FractionArm::Fixed(f) => (
                f,
                select_fixed_fraction(&cal.cluster_ids, tau2, f).map_err(err)?,
                None,
            ),
            FractionArm::Cv => {
                let s = optimize_fraction(cal, g_cal, tau2, &grid).map_err(err)?;
                (s.fraction_star, s.plan, Some(s.lambda_star))
            }
        };
        if plan.kept_clusters.is_empty() {
            return Err("no cluster kept".to_string());
        }
        let c = apply_plan(&plan, cal).map_err(err)?;
        let v = apply_plan(&plan, val).map_err(err)?;
        let cell = match lambda {
            Some(l) => {
                let x = Design::from_matrix(&c).map_err(|e| e.to_string())?;
                fit_and_score(&x, g_cal, &v, g_val, l, config.threshold)
                    .map_err(|e| e.to_string())?
                    .0
            }
            None => {
                evaluate_pair(&c, g_cal, &v, g_val, config)
                    .map_err(|e| e.to_string())?
                    .0
            }
        };
        Ok((fraction, plan.kept_clusters.len(), cell))
    };
    match run() {
        Ok((f, k, cell)) => (Some(f), Some(k), Ok(cell)),
        Err(e) => (None, None, Err(e)),
    }
}

/// Validated performance of `variant` after keeping the clusters with the
/// largest calibration-side τ², per split and arm.
pub fn run_selection_study(
    table: &PeakTable,
    labels: &Labels,
    variant: MethodSpec,
    arms: &[FractionArm],
    config: &HarnessConfig,
) -> Result<SelectionStudy, HarnessError> {
    if !variant.method.is_censored_regression() {
        return Err(HarnessError::NotCensoredRegression(variant));
    }
    let g = labels.aligned(table.sample_ids())?;
    let relabeled = Labels::new(table.sample_ids().to_vec(), g.clone())?;
    let splits = make_splits(&relabeled, config.splits, config.cal_frac, config.seed)?;
    let all = SampleSet::whole(table);
    let methods = [variant];
    let prep = prep_side(&all, &methods, &config.mixed);
    let rows: Vec<Vec<SelectionRow>> = splits
        .par_iter()
        .map(|s| {
            let pick = |rows: &[usize]| rows.iter().map(|&i| g[i]).collect::<Vec<bool>>();
            let (g_cal, g_val) = (pick(&s.cal_rows), pick(&s.val_rows));
            let fail = |e: String| {
                arms.iter()
                    .map(|&arm| SelectionRow {
                        arm,
                        split: s.split_id,
                        fraction: None,
                        n_kept: None,
                        outcome: Err(e.clone()),
                    })
                    .collect::<Vec<_>>()
            };
            let sets = SampleSet::rows(table, &s.cal_rows)
                .and_then(|c| Ok((c, SampleSet::rows(table, &s.val_rows)?)));
            let (cal, val) = match sets {
                Ok(x) => x,
                Err(e) => return fail(e.to_string()),
            };
            let sums = SplitSummaries::new(
                cal,
                val,
                s.cal_rows.clone(),
                s.val_rows.clone(),
                prep.as_ref(),
                &methods,
                &config.mixed,
            );
            let (c, v, tau2) = match sums.matrices(variant) {
                Ok((c, v, t)) => {
                    let (c2, v2) = common_clusters(&c, &v);
                    let t = t.unwrap_or_default();
                    let by_id: HashMap<usize, f64> = c.cluster_ids.iter().copied().zip(t).collect();
                    let t2 = c2
                        .cluster_ids
                        .iter()
                        .map(|id| by_id[id])
                        .collect::<Vec<_>>();
                    (c2, v2, t2)
                }
                Err(e) => return fail(e),
            };
            arms.iter()
                .map(|&arm| {
                    let (fraction, n_kept, outcome) =
                        selection_cell(arm, &c, &v, &tau2, &g_cal, &g_val, config);
                    SelectionRow {
                        arm,
                        split: s.split_id,
                        fraction,
                        n_kept,
                        outcome,
                    }
                })
                .collect()
        })
        .collect();
    Ok(SelectionStudy {
        variant,
        rows: rows.into_iter().flatten().collect(),
    })
}

/// Key-value record of a run: tool version, configuration and seed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunManifest {
    pub entries: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        let mut m = Self::default();
        m.push("tool", "lod-censor");
        m.push("version", env!("CARGO_PKG_VERSION"));
        m.push("command", command);
        m
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn with_config(mut self, config: &HarnessConfig) -> Self {
        self.push("seed", config.seed);
        self.push("splits", config.splits);
        self.push("cal_frac", config.cal_frac);
        self.push("n_quad", config.mixed.n_quad);
        self.push("threshold", config.threshold);
        let grid = config
            .lambda_grid
            .as_ref()
            .map_or("default".to_string(), |g| {
                g.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
            });
        self.push("lambda_grid", grid);
        self
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (k, v) in &self.entries {
            writeln!(w, "{k}={v}")?;
        }
        Ok(())
    }
}
