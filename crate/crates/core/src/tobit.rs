//! Per-patient censored normal regression of a cluster's intensities on the
//! cluster's mean pattern, `ỹⱼ = α + β·ȳⱼ + εⱼ`, `εⱼ ~ N(0, σ²)`.

use crate::numerics::{log_norm_cdf, maximize_smooth, mills_lower, OptimOptions, LN_SQRT_2PI};

/// Lower bound on σ; keeps the likelihood bounded on noiseless data.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TobitError {
    #[error("series lengths differ: y {y}, observed {observed}, covariate {covariate}")]
    LengthMismatch {
        y: usize,
        observed: usize,
        covariate: usize,
    },
    #[error("empty series")]
    Empty,
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("every cell is censored; the regression is not estimable")]
    NotEstimable,
    #[error("optimizer failed: {0}")]
    Optimizer(#[from] crate::numerics::NumericsError),
}

/// Cells of one censored series. Censored cells carry their threshold as
/// the stored value `y`.
#[derive(Debug, Clone, Copy)]
pub struct CensoredSeries<'a> {
    pub y: &'a [f64],
    pub observed: &'a [bool],
    pub covariate: &'a [f64],
}

impl<'a> CensoredSeries<'a> {
    pub fn new(
        y: &'a [f64],
        observed: &'a [bool],
        covariate: &'a [f64],
    ) -> Result<Self, TobitError> {
        if y.len() != observed.len() || y.len() != covariate.len() {
            return Err(TobitError::LengthMismatch {
                y: y.len(),
                observed: observed.len(),
                covariate: covariate.len(),
            });
        }
        if y.is_empty() {
            return Err(TobitError::Empty);
        }
        Ok(Self {
            y,
            observed,
            covariate,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TobitParams {
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
}

/// `Σⱼ δⱼ ln[φ((yⱼ−α−βxⱼ)/σ)/σ] + (1−δⱼ) ln Φ((yⱼ−α−βxⱼ)/σ)`.
pub fn tobit_loglik(params: &TobitParams, series: &CensoredSeries<'_>) -> Result<f64, TobitError> {
    if !(params.sigma > 0.0) {
        return Err(TobitError::NonPositiveSigma(params.sigma));
    }
    Ok(loglik_and_grad(
        params.alpha,
        params.beta,
        params.sigma,
        series,
        None,
    ))
}

/// Log-likelihood and, optionally, its gradient in `(α, β, ln σ)`.
fn loglik_and_grad(
    alpha: f64,
    beta: f64,
    sigma: f64,
    s: &CensoredSeries<'_>,
    grad: Option<&mut [f64; 3]>,
) -> f64 {
    let log_sigma = sigma.ln();
    let mut ll = 0.0;
    let mut g = [0.0; 3];
    for ((&y, &obs), &x) in s.y.iter().zip(s.observed).zip(s.covariate) {
        let resid = y - alpha - beta * x;
        let z = resid / sigma;
        if obs {
            ll += -0.5 * z * z - LN_SQRT_2PI - log_sigma;
            g[0] += z / sigma;
            g[1] += x * z / sigma;
            g[2] += z * z - 1.0;
        } else {
            ll += log_norm_cdf(z);
            let lambda = mills_lower(z);
            g[0] -= lambda / sigma;
            g[1] -= x * lambda / sigma;
            g[2] -= z * lambda;
        }
    }
    if let Some(out) = grad {
        *out = g;
    }
    ll
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TobitFit {
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
    pub loglik: f64,
    pub converged: bool,
    pub n_observed: usize,
    /// Intercept-only fit (β fixed at 0) because the design has a single
    /// peak or a constant covariate.
    pub degenerate: bool,
}

impl TobitFit {
    pub fn params(&self) -> TobitParams {
        TobitParams {
            alpha: self.alpha,
            beta: self.beta,
            sigma: self.sigma,
        }
    }
}

/// Least-squares start on observed cells only.
fn start_values(s: &CensoredSeries<'_>, with_slope: bool) -> (f64, f64, f64) {
    let obs: Vec<(f64, f64)> =
        s.y.iter()
            .zip(s.covariate)
            .zip(s.observed)
            .filter(|(_, &o)| o)
            .map(|((&y, &x), _)| (x, y))
            .collect();
    let n = obs.len() as f64;
    if obs.len() == 1 {
        return (obs[0].1, 0.0, 0.5);
    }
    let mx = obs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = obs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = obs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = obs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let beta = if with_slope && sxx > 0.0 {
        sxy / sxx
    } else {
        0.0
    };
    let alpha = my - beta * mx;
    let rss: f64 = obs.iter().map(|p| (p.1 - alpha - beta * p.0).powi(2)).sum();
    let sd = (rss / n).sqrt();
    let sigma = if sd > 0.0 && sd.is_finite() {
        sd.max(SIGMA_FLOOR)
    } else {
        0.5
    };
    (alpha, beta, sigma)
}

/// Maximum-likelihood fit. Requires at least one observed cell. A single
/// peak or a constant covariate yields an intercept-only fit flagged
/// `degenerate`.
pub fn fit_tobit(series: &CensoredSeries<'_>) -> Result<TobitFit, TobitError> {
    let n_observed = series.n_observed();
    if n_observed == 0 {
        return Err(TobitError::NotEstimable);
    }
    let first = series.covariate[0];
    let degenerate = series.len() == 1 || series.covariate.iter().all(|&x| x == first);
    let (a0, b0, s0) = start_values(series, !degenerate);
    let opts = OptimOptions {
        grad_tol: 1e-10,
        f_tol: 1e-14,
        x_tol: 1e-10,
        max_iter: 2000,
    };
    let floor = SIGMA_FLOOR.ln();

    let (alpha, beta, sigma, converged) = if degenerate {
        let res = maximize_smooth(
            |p: &[f64], g: &mut [f64]| {
                let mut full = [0.0; 3];
                let ll = loglik_and_grad(p[0], 0.0, p[1].exp(), series, Some(&mut full));
                g[0] = full[0];
                g[1] = full[2];
                ll
            },
            &[a0, s0.ln()],
            &[f64::NEG_INFINITY, floor],
            &opts,
        )?;
        (res.argmax[0], 0.0, res.argmax[1].exp(), res.converged)
    } else {
        let res = maximize_smooth(
            |p: &[f64], g: &mut [f64]| {
                let mut full = [0.0; 3];
                let ll = loglik_and_grad(p[0], p[1], p[2].exp(), series, Some(&mut full));
                g.copy_from_slice(&full);
                ll
            },
            &[a0, b0, s0.ln()],
            &[f64::NEG_INFINITY, f64::NEG_INFINITY, floor],
            &opts,
        )?;
        (
            res.argmax[0],
            res.argmax[1],
            res.argmax[2].exp(),
            res.converged,
        )
    };
    let sigma = sigma.max(SIGMA_FLOOR);
    let loglik = loglik_and_grad(alpha, beta, sigma, series, None);
    Ok(TobitFit {
        alpha,
        beta,
        sigma,
        loglik,
        converged,
        n_observed,
        degenerate,
    })
}

/// Cluster summary `α̂ + β̂·ȳ̄`, the average of the fitted line over the
/// cluster's peaks.
pub fn tobit_summary(fit: &TobitFit, grand_mean: f64) -> f64 {
    fit.alpha + fit.beta * grand_mean
}
