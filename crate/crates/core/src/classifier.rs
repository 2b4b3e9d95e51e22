//! Ridge-penalized logistic regression, leave-one-out penalty selection
//! and validation metrics.
//!
//! Predictors are standardized on the training rows (population SD).
//! Columns that are constant on the training rows are excluded and carry a
//! zero coefficient. The intercept is not penalized. Fits run Newton's
//! method on the primal problem when there are fewer predictors than rows
//! and on the dual (`β = Zᵀc`) otherwise; both stop at a gradient
//! max-norm of 1e-8.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::variants::SummaryMatrix;

const GRAD_TOL: f64 = 1e-8;
const MAX_NEWTON: usize = 200;
const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClassifierError {
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("non-finite predictor value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("penalty must be positive, got {0}")]
    NonPositiveLambda(f64),
    #[error("penalty grid is empty")]
    EmptyGrid,
    #[error("penalty grid must be sorted ascending")]
    UnsortedGrid,
    #[error("need at least 2 training rows")]
    TooFewRows,
}

/// Row-major predictor matrix.
#[derive(Debug, Clone, Copy)]
pub struct Design<'a> {
    values: &'a [f64],
    rows: usize,
    cols: usize,
}

impl<'a> Design<'a> {
    pub fn new(values: &'a [f64], rows: usize, cols: usize) -> Result<Self, ClassifierError> {
        if values.len() != rows * cols {
            return Err(ClassifierError::LengthMismatch(format!(
                "{} values for {rows}×{cols}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(ClassifierError::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(Self { values, rows, cols })
    }

    pub fn from_matrix(m: &'a SummaryMatrix) -> Result<Self, ClassifierError> {
        Self::new(m.values(), m.n_rows(), m.n_cols())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    pub intercept: f64,
    /// Per-column coefficients on the standardized scale; 0 for excluded
    /// columns.
    pub coefficients: Vec<f64>,
    pub means: Vec<f64>,
    /// Training SD per column; 0 marks a column excluded as constant.
    pub sds: Vec<f64>,
    pub lambda: f64,
    pub converged: bool,
}

impl RidgeModel {
    pub fn linear_predictor(&self, x: &[f64]) -> Result<f64, ClassifierError> {
        if x.len() != self.coefficients.len() {
            return Err(ClassifierError::LengthMismatch(format!(
                "{} predictors for a model with {}",
                x.len(),
                self.coefficients.len()
            )));
        }
        let mut eta = self.intercept;
        for j in 0..x.len() {
            if self.sds[j] > 0.0 {
                eta += self.coefficients[j] * (x[j] - self.means[j]) / self.sds[j];
            }
        }
        Ok(eta)
    }
}

/// `P(case | x)`.
pub fn predict_prob(model: &RidgeModel, x: &[f64]) -> Result<f64, ClassifierError> {
    Ok(logistic(model.linear_predictor(x)?))
}

#[inline]
fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eᵗ)` without overflow.
#[inline]
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Training rows standardized over the non-constant columns.
struct Standardized {
    z: DMatrix<f64>,
    kept: Vec<usize>,
    means: Vec<f64>,
    sds: Vec<f64>,
}

fn standardize(x: &Design<'_>, rows: &[usize]) -> Standardized {
    let n = rows.len() as f64;
    let mut means = vec![0.0; x.cols];
    let mut sds = vec![0.0; x.cols];
    let mut kept = Vec::new();
    for j in 0..x.cols {
        let col = rows.iter().map(|&i| x.values[i * x.cols + j]);
        let (lo, hi) = col
            .clone()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
        let mean = col.clone().sum::<f64>() / n;
        means[j] = mean;
        if hi > lo {
            let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                sds[j] = var.sqrt();
                kept.push(j);
            }
        }
    }
    let z = DMatrix::from_fn(rows.len(), kept.len(), |r, k| {
        let j = kept[k];
        (x.values[rows[r] * x.cols + j] - means[j]) / sds[j]
    });
    Standardized {
        z,
        kept,
        means,
        sds,
    }
}

/// Coefficients on the kept columns plus, for dual fits, `c` with `β = Zᵀc`.
#[derive(Clone)]
struct Solution {
    b0: f64,
    beta: DVector<f64>,
    dual: Option<DVector<f64>>,
    converged: bool,
}

fn intercept_only(y: &[f64]) -> f64 {
    let prev = y.iter().sum::<f64>() / y.len() as f64;
    (prev / (1.0 - prev)).ln()
}

fn penalized_loglik(eta: &DVector<f64>, y: &[f64], penalty: f64) -> f64 {
    eta.iter()
        .zip(y)
        .map(|(&e, &g)| g * e - softplus(e))
        .sum::<f64>()
        - penalty
}

fn solve_primal(z: &DMatrix<f64>, y: &[f64], lambda: f64, warm: Option<&Solution>) -> Solution {
    let (n, q) = z.shape();
    let mut b0 = warm.map_or_else(|| intercept_only(y), |w| w.b0);
    let mut beta = warm
        .filter(|w| w.beta.len() == q)
        .map_or_else(|| DVector::zeros(q), |w| w.beta.clone());
    let yv = DVector::from_column_slice(y);
    let eta_of = |b0: f64, beta: &DVector<f64>| z * beta + DVector::from_element(n, b0);
    let mut eta = eta_of(b0, &beta);
    let mut obj = penalized_loglik(&eta, y, 0.5 * lambda * beta.norm_squared());
    let mut converged = false;
    for _ in 0..MAX_NEWTON {
        let p = eta.map(logistic);
        let r = &yv - &p;
        let g0 = r.sum();
        let gb = z.tr_mul(&r) - lambda * &beta;
        if g0.abs().max(gb.amax()) <= GRAD_TOL {
            converged = true;
            break;
        }
        let w = p.map(|v| (v * (1.0 - v)).max(PROB_CLAMP));
        let mut h = DMatrix::zeros(q + 1, q + 1);
        h[(0, 0)] = w.sum();
        let zw = DMatrix::from_fn(n, q, |i, j| z[(i, j)] * w[i]);
        let cross = zw.row_sum();
        for j in 0..q {
            h[(0, j + 1)] = cross[j];
            h[(j + 1, 0)] = cross[j];
        }
        let zwz = z.tr_mul(&zw);
        for a in 0..q {
            for b in 0..q {
                h[(a + 1, b + 1)] = zwz[(a, b)];
            }
            h[(a + 1, a + 1)] += lambda;
        }
        let mut grad = DVector::zeros(q + 1);
        grad[0] = g0;
        grad.rows_mut(1, q).copy_from(&gb);
        let Some(chol) = Cholesky::new(h) else { break };
        let step = chol.solve(&grad);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let nb0 = b0 + t * step[0];
            let nbeta = &beta + t * step.rows(1, q);
            let neta = eta_of(nb0, &nbeta);
            let nobj = penalized_loglik(&neta, y, 0.5 * lambda * nbeta.norm_squared());
            if nobj >= obj - 1e-12 * obj.abs() {
                b0 = nb0;
                beta = nbeta;
                eta = neta;
                obj = nobj;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Solution {
        b0,
        beta,
        dual: None,
        converged,
    }
}

fn solve_dual(z: &DMatrix<f64>, y: &[f64], lambda: f64, warm: Option<&Solution>) -> Solution {
    let n = z.nrows();
    let k = z * z.transpose();
    let yv = DVector::from_column_slice(y);
    let ones = DVector::from_element(n, 1.0);
    let (mut b0, mut c) = match warm.and_then(|w| {
        w.dual
            .as_ref()
            .filter(|c| c.len() == n)
            .map(|c| (w.b0, c.clone()))
    }) {
        Some(state) => state,
        None => (intercept_only(y), DVector::zeros(n)),
    };
    let mut kc = &k * &c;
    let mut obj = penalized_loglik(&(&kc + &ones * b0), y, 0.5 * lambda * c.dot(&kc));
    let mut converged = false;
    for _ in 0..MAX_NEWTON {
        let eta = &kc + &ones * b0;
        let p = eta.map(logistic);
        let r = &yv - &p;
        let resid = &r - lambda * &c;
        let g0 = r.sum();
        let gb = z.tr_mul(&resid);
        if g0.abs().max(gb.amax()) <= GRAD_TOL {
            converged = true;
            break;
        }
        let w = p.map(|v| (v * (1.0 - v)).max(PROB_CLAMP));
        let mut a = k.clone();
        for i in 0..n {
            a[(i, i)] += lambda / w[i];
        }
        let Some(chol) = Cholesky::new(a) else { break };
        let v = resid.component_div(&w);
        let a1 = chol.solve(&ones);
        let av = chol.solve(&v);
        let db0 = (av.sum() + c.sum()) / a1.sum();
        let dc = &av - &a1 * db0;
        let kdc = &k * &dc;
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let nc = &c + t * &dc;
            let nkc = &kc + t * &kdc;
            let nb0 = b0 + t * db0;
            let nobj = penalized_loglik(&(&nkc + &ones * nb0), y, 0.5 * lambda * nc.dot(&nkc));
            if nobj >= obj - 1e-12 * obj.abs() {
                c = nc;
                kc = nkc;
                b0 = nb0;
                obj = nobj;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let beta = z.tr_mul(&c);
    Solution {
        b0,
        beta,
        dual: Some(c),
        converged,
    }
}

fn solve(z: &DMatrix<f64>, y: &[f64], lambda: f64, warm: Option<&Solution>) -> Solution {
    if z.ncols() < z.nrows() {
        solve_primal(z, y, lambda, warm)
    } else {
        solve_dual(z, y, lambda, warm)
    }
}

fn check_labels(g: &[bool], rows: &[usize]) -> Result<Vec<f64>, ClassifierError> {
    if rows.len() < 2 {
        return Err(ClassifierError::TooFewRows);
    }
    let y: Vec<f64> = rows.iter().map(|&i| f64::from(u8::from(g[i]))).collect();
    let cases = y.iter().sum::<f64>();
    if cases == 0.0 || cases == y.len() as f64 {
        return Err(ClassifierError::SingleClass);
    }
    Ok(y)
}

fn model_from(std: &Standardized, sol: &Solution, cols: usize, lambda: f64) -> RidgeModel {
    let mut coefficients = vec![0.0; cols];
    for (k, &j) in std.kept.iter().enumerate() {
        coefficients[j] = sol.beta[k];
    }
    RidgeModel {
        intercept: sol.b0,
        coefficients,
        means: std.means.clone(),
        sds: std.sds.clone(),
        lambda,
        converged: sol.converged,
    }
}

fn fit_rows(
    x: &Design<'_>,
    g: &[bool],
    rows: &[usize],
    lambda: f64,
) -> Result<RidgeModel, ClassifierError> {
    if !(lambda > 0.0) {
        return Err(ClassifierError::NonPositiveLambda(lambda));
    }
    let y = check_labels(g, rows)?;
    let std = standardize(x, rows);
    let sol = solve(&std.z, &y, lambda, None);
    Ok(model_from(&std, &sol, x.cols, lambda))
}

/// Maximize `Σ gᵢ ln pᵢ + (1−gᵢ) ln(1−pᵢ) − (λ/2)‖β‖²` over the intercept
/// and the standardized-scale coefficients.
pub fn fit_ridge_logistic(
    x: &Design<'_>,
    g: &[bool],
    lambda: f64,
) -> Result<RidgeModel, ClassifierError> {
    if g.len() != x.rows {
        return Err(ClassifierError::LengthMismatch(format!(
            "{} labels for {} rows",
            g.len(),
            x.rows
        )));
    }
    let rows: Vec<usize> = (0..x.rows).collect();
    fit_rows(x, g, &rows, lambda)
}

/// 25 log-spaced penalties spanning `[1e-4, 1e4]·(n/C)`.
pub fn default_lambda_grid(n: usize, c: usize) -> Vec<f64> {
    let scale = n as f64 / c.max(1) as f64;
    (0..25)
        .map(|i| scale * 10f64.powf(-4.0 + 8.0 * i as f64 / 24.0))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvPoint {
    pub lambda: f64,
    /// Leave-one-out misclassification rate at threshold 0.5.
    pub error: f64,
    /// Leave-one-out deviance `−2Σ ln(1 − |p̂ − g|)`.
    pub deviance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub lambda_star: f64,
    pub curve: Vec<CvPoint>,
}

impl CvResult {
    pub fn best(&self) -> CvPoint {
        *self
            .curve
            .iter()
            .find(|p| p.lambda == self.lambda_star)
            .expect("lambda_star on the curve")
    }
}

/// Index of the preferred point: lowest error, then lowest deviance, then
/// the largest λ.
pub(crate) fn preferred(curve: &[CvPoint]) -> usize {
    let mut best = 0;
    for (i, p) in curve.iter().enumerate().skip(1) {
        let b = &curve[best];
        let better = p.error < b.error
            || (p.error == b.error && p.deviance < b.deviance)
            || (p.error == b.error && p.deviance == b.deviance && p.lambda > b.lambda);
        if better {
            best = i;
        }
    }
    best
}

fn validate_grid(grid: &[f64]) -> Result<(), ClassifierError> {
    if grid.is_empty() {
        return Err(ClassifierError::EmptyGrid);
    }
    if let Some(&bad) = grid.iter().find(|&&l| !(l > 0.0)) {
        return Err(ClassifierError::NonPositiveLambda(bad));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(ClassifierError::UnsortedGrid);
    }
    Ok(())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn deviance_term(p: f64, g: bool) -> f64 {
    let p = clamp_prob(p);
    -2.0 * (1.0 - (p - f64::from(u8::from(g))).abs()).ln()
}

/// Leave-one-out predictions for every grid value: `out[fold][grid index]`.
fn loo_predictions(
    x: &Design<'_>,
    g: &[bool],
    grid: &[f64],
) -> Result<Vec<Vec<f64>>, ClassifierError> {
    use rayon::prelude::*;
    (0..x.rows)
        .into_par_iter()
        .map(|held| {
            let rows: Vec<usize> = (0..x.rows).filter(|&i| i != held).collect();
            let y = check_labels(g, &rows)?;
            let std = standardize(x, &rows);
            let mut probs = vec![0.0; grid.len()];
            let mut warm: Option<Solution> = None;
            for (gi, &lambda) in grid.iter().enumerate().rev() {
                let sol = solve(&std.z, &y, lambda, warm.as_ref());
                let model = model_from(&std, &sol, x.cols, lambda);
                probs[gi] = predict_prob(&model, x.row(held))?;
                warm = Some(sol);
            }
            Ok(probs)
        })
        .collect()
}

/// Leave-one-out choice of λ over an ascending grid.
pub fn loo_cv_lambda(
    x: &Design<'_>,
    g: &[bool],
    grid: &[f64],
) -> Result<CvResult, ClassifierError> {
    validate_grid(grid)?;
    if g.len() != x.rows {
        return Err(ClassifierError::LengthMismatch(format!(
            "{} labels for {} rows",
            g.len(),
            x.rows
        )));
    }
    check_labels(g, &(0..x.rows).collect::<Vec<_>>())?;
    let preds = loo_predictions(x, g, grid)?;
    let n = x.rows as f64;
    let curve: Vec<CvPoint> = grid
        .iter()
        .enumerate()
        .map(|(gi, &lambda)| {
            let mut wrong = 0usize;
            let mut dev = 0.0;
            for (i, row) in preds.iter().enumerate() {
                let p = row[gi];
                if (p > 0.5) != g[i] {
                    wrong += 1;
                }
                dev += deviance_term(p, g[i]);
            }
            CvPoint {
                lambda,
                error: wrong as f64 / n,
                deviance: dev,
            }
        })
        .collect();
    let lambda_star = curve[preferred(&curve)].lambda;
    Ok(CvResult { lambda_star, curve })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceReport {
    pub error_rate: f64,
    pub brier: f64,
    pub deviance: f64,
    /// `None` when the validation rows lack a class.
    pub auc: Option<f64>,
    pub n_val: usize,
    pub probs: Vec<f64>,
}

/// Metrics of predicted case probabilities against labels.
pub fn report_from_probs(
    probs: Vec<f64>,
    g: &[bool],
    threshold: f64,
) -> Result<PerformanceReport, ClassifierError> {
    if probs.len() != g.len() {
        return Err(ClassifierError::LengthMismatch(format!(
            "{} probabilities for {} labels",
            probs.len(),
            g.len()
        )));
    }
    let n = probs.len() as f64;
    let error_rate = probs
        .iter()
        .zip(g)
        .filter(|(&p, &gi)| (p > threshold) != gi)
        .count() as f64
        / n;
    let brier = probs
        .iter()
        .zip(g)
        .map(|(&p, &gi)| (p - f64::from(u8::from(gi))).powi(2))
        .sum::<f64>()
        / n;
    let deviance = probs
        .iter()
        .zip(g)
        .map(|(&p, &gi)| deviance_term(p, gi))
        .sum();
    Ok(PerformanceReport {
        error_rate,
        brier,
        deviance,
        auc: auc(&probs, g),
        n_val: probs.len(),
        probs,
    })
}

/// Mann–Whitney AUC with ties counted ½.
pub fn auc(scores: &[f64], g: &[bool]) -> Option<f64> {
    let cases: Vec<f64> = scores
        .iter()
        .zip(g)
        .filter(|(_, &c)| c)
        .map(|(&s, _)| s)
        .collect();
    let controls: Vec<f64> = scores
        .iter()
        .zip(g)
        .filter(|(_, &c)| !c)
        .map(|(&s, _)| s)
        .collect();
    if cases.is_empty() || controls.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &a in &cases {
        for &b in &controls {
            wins += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (cases.len() * controls.len()) as f64)
}

/// Apply a model to labelled validation rows. The AUC ranks linear
/// predictors, which equals ranking probabilities without saturation ties.
pub fn evaluate(
    model: &RidgeModel,
    x_val: &Design<'_>,
    g_val: &[bool],
    threshold: f64,
) -> Result<PerformanceReport, ClassifierError> {
    if g_val.len() != x_val.rows {
        return Err(ClassifierError::LengthMismatch(format!(
            "{} labels for {} rows",
            g_val.len(),
            x_val.rows
        )));
    }
    let eta = (0..x_val.rows)
        .map(|i| model.linear_predictor(x_val.row(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let probs = eta.iter().map(|&e| logistic(e)).collect();
    let mut report = report_from_probs(probs, g_val, threshold)?;
    // probabilities saturate at 1.0 for large η; ranks come from η itself
    report.auc = auc(&eta, g_val);
    Ok(report)
}
