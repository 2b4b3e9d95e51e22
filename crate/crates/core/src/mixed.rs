//! Random-intercept censored regression for one cluster:
//! `ỹᵢⱼ = α + β·ȳⱼ + aᵢ + εᵢⱼ`, `aᵢ ~ N(0, τ²)`, `εᵢⱼ ~ N(0, σ²)`.
//!
//! The marginal likelihood integrates each patient's censored likelihood
//! over `aᵢ` with a Gauss–Hermite rule recentred at the patient's posterior
//! mode. Patients with identical cell profiles are evaluated once.

use std::collections::HashMap;
use std::io::Write;

use crate::data::{ClusterView, SampleSet};
use crate::numerics::{
    adapt_into, gauss_hermite_cached, log_norm_cdf, log_norm_pdf, maximize_smooth,
    trunc_mean_unchecked, NumericsError, OptimOptions, QuadratureRule, LN_SQRT_2PI,
};
use crate::tobit::{fit_tobit, tobit_loglik, CensoredSeries, TobitError, TobitParams, SIGMA_FLOOR};

pub const DEFAULT_N_QUAD: usize = 100;

/// Lower bound on `ln(τ/σ)` during optimization.
pub const LOG_TAU_RATIO_FLOOR: f64 = -18.420_680_743_952_367;

/// Log-likelihood gain over the τ² = 0 fit below which τ² is reported as 0.
const BOUNDARY_GAIN: f64 = 1e-7;
/// Shrinkage weight below which τ² is reported as 0.
const BOUNDARY_WEIGHT: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum MixedError {
    #[error("sigma2 must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("tau2 must be non-negative, got {0}")]
    NegativeTau(f64),
    #[error("cluster has no patients")]
    EmptyCluster,
    #[error("malformed cluster data: {0}")]
    Shape(String),
    #[error("only {informative} patient(s) with an observed cell; at least 2 are needed")]
    NotEstimable { informative: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Tobit(#[from] TobitError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Cells of every patient in one cluster plus the cluster's mean pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterData {
    pub cluster_id: usize,
    covariate: Vec<f64>,
    grand_mean: f64,
    y: Vec<f64>,
    observed: Vec<bool>,
}

impl ClusterData {
    /// `y` and `observed` are patient-major with `covariate.len()` cells per
    /// patient; censored cells hold their threshold.
    pub fn new(
        cluster_id: usize,
        covariate: Vec<f64>,
        y: Vec<f64>,
        observed: Vec<bool>,
    ) -> Result<Self, MixedError> {
        let k = covariate.len();
        if k == 0 {
            return Err(MixedError::Shape("cluster has no peaks".into()));
        }
        if y.len() != observed.len() || y.len() % k != 0 {
            return Err(MixedError::Shape(format!(
                "{} values and {} flags for {k} peaks",
                y.len(),
                observed.len()
            )));
        }
        if y.is_empty() {
            return Err(MixedError::EmptyCluster);
        }
        let grand_mean = covariate.iter().sum::<f64>() / k as f64;
        Ok(Self {
            cluster_id,
            covariate,
            grand_mean,
            y,
            observed,
        })
    }

    /// Cells of every sample in `set` for the peaks of `view`, with the
    /// view's mean pattern as covariate.
    pub fn from_set(set: &SampleSet<'_>, view: &ClusterView) -> Result<Self, MixedError> {
        let mut y = Vec::with_capacity(set.len() * view.peak_indices.len());
        let mut observed = Vec::with_capacity(y.capacity());
        for s in 0..set.len() {
            for &j in &view.peak_indices {
                y.push(set.value(s, j));
                observed.push(set.is_observed(s, j));
            }
        }
        Self::new(view.cluster_id, view.mean_pattern.clone(), y, observed)
    }

    pub fn k(&self) -> usize {
        self.covariate.len()
    }

    pub fn n_patients(&self) -> usize {
        self.y.len() / self.k()
    }

    pub fn covariate(&self) -> &[f64] {
        &self.covariate
    }

    pub fn grand_mean(&self) -> f64 {
        self.grand_mean
    }

    pub fn patient(&self, i: usize) -> CensoredSeries<'_> {
        let k = self.k();
        let span = i * k..(i + 1) * k;
        CensoredSeries {
            y: &self.y[span.clone()],
            observed: &self.observed[span],
            covariate: &self.covariate,
        }
    }

    /// Patients with at least one observed cell.
    pub fn n_informative(&self) -> usize {
        (0..self.n_patients())
            .filter(|&i| self.patient(i).observed.iter().any(|&o| o))
            .count()
    }

    fn covariate_is_constant(&self) -> bool {
        self.k() == 1 || self.covariate.iter().all(|&x| x == self.covariate[0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedParams {
    pub alpha: f64,
    pub beta: f64,
    pub tau2: f64,
    pub sigma2: f64,
}

impl MixedParams {
    fn check(&self) -> Result<(), MixedError> {
        if !(self.sigma2 > 0.0) {
            return Err(MixedError::NonPositiveSigma(self.sigma2));
        }
        if !(self.tau2 >= 0.0) {
            return Err(MixedError::NegativeTau(self.tau2));
        }
        Ok(())
    }
}

/// Distinct patient profiles with multiplicities, in first-occurrence order.
struct Profile {
    mult: f64,
    obs_x: Vec<f64>,
    obs_y: Vec<f64>,
    cens_x: Vec<f64>,
    cens_t: Vec<f64>,
}

impl Profile {
    fn from_series(s: &CensoredSeries<'_>) -> Self {
        let mut p = Profile {
            mult: 1.0,
            obs_x: Vec::new(),
            obs_y: Vec::new(),
            cens_x: Vec::new(),
            cens_t: Vec::new(),
        };
        for ((&y, &o), &x) in s.y.iter().zip(s.observed).zip(s.covariate) {
            if o {
                p.obs_x.push(x);
                p.obs_y.push(y);
            } else {
                p.cens_x.push(x);
                p.cens_t.push(y);
            }
        }
        p
    }
}

/// Profiles plus the profile index of every patient.
fn profiles(data: &ClusterData) -> (Vec<Profile>, Vec<usize>) {
    let mut index: HashMap<Vec<(u64, bool)>, usize> = HashMap::new();
    let mut out: Vec<Profile> = Vec::new();
    let mut assignment = Vec::with_capacity(data.n_patients());
    for i in 0..data.n_patients() {
        let s = data.patient(i);
        let key: Vec<(u64, bool)> =
            s.y.iter()
                .zip(s.observed)
                .map(|(&y, &o)| (y.to_bits(), o))
                .collect();
        let next = out.len();
        let slot = *index.entry(key).or_insert(next);
        if slot == next {
            out.push(Profile::from_series(&s));
        } else {
            out[slot].mult += 1.0;
        }
        assignment.push(slot);
    }
    (out, assignment)
}

/// A profile's sufficient quantities at fixed `(α, β, σ)`.
struct Prepared<'p> {
    profile: &'p Profile,
    sigma: f64,
    n_o: f64,
    /// mean observed residual `r̄`
    rbar: f64,
    /// `Σ (r − r̄)²`
    ss: f64,
    sum_x: f64,
    sum_xr: f64,
    /// censored thresholds minus the population line
    c: Vec<f64>,
    base: f64,
}

#[derive(Clone, Copy, Default)]
struct NodeTerms {
    ll: f64,
    d_a: f64,
    d_beta: f64,
    d_logsigma: f64,
}

impl<'p> Prepared<'p> {
    fn new(profile: &'p Profile, alpha: f64, beta: f64, sigma: f64) -> Self {
        let n_o = profile.obs_y.len() as f64;
        let resid: Vec<f64> = profile
            .obs_y
            .iter()
            .zip(&profile.obs_x)
            .map(|(y, x)| y - alpha - beta * x)
            .collect();
        let rbar = if n_o > 0.0 {
            resid.iter().sum::<f64>() / n_o
        } else {
            0.0
        };
        let ss = resid.iter().map(|r| (r - rbar).powi(2)).sum();
        let sum_x = profile.obs_x.iter().sum();
        let sum_xr = profile.obs_x.iter().zip(&resid).map(|(x, r)| x * r).sum();
        let c = profile
            .cens_t
            .iter()
            .zip(&profile.cens_x)
            .map(|(t, x)| t - alpha - beta * x)
            .collect();
        let base = -n_o * (LN_SQRT_2PI + sigma.ln());
        Self {
            profile,
            sigma,
            n_o,
            rbar,
            ss,
            sum_x,
            sum_xr,
            c,
            base,
        }
    }

    fn quad_dev(&self, a: f64) -> f64 {
        self.ss + self.n_o * (a - self.rbar).powi(2)
    }

    /// `ℓ(a)`, `ℓ'(a)`, `ℓ''(a)` of the cells given the intercept.
    fn a_derivs(&self, a: f64) -> (f64, f64, f64) {
        let s2 = self.sigma * self.sigma;
        let mut ll = self.base - 0.5 * self.quad_dev(a) / s2;
        let mut d1 = self.n_o * (self.rbar - a) / s2;
        let mut d2 = -self.n_o / s2;
        for &c in &self.c {
            let z = (c - a) / self.sigma;
            let lc = log_norm_cdf(z);
            let lambda = (log_norm_pdf(z) - lc).exp();
            ll += lc;
            d1 -= lambda / self.sigma;
            d2 -= lambda * (z + lambda) / s2;
        }
        (ll, d1, d2)
    }

    fn terms(&self, a: f64, with_grad: bool) -> NodeTerms {
        let s2 = self.sigma * self.sigma;
        let dev = self.quad_dev(a);
        let mut t = NodeTerms {
            ll: self.base - 0.5 * dev / s2,
            ..NodeTerms::default()
        };
        if with_grad {
            t.d_a = self.n_o * (self.rbar - a) / s2;
            t.d_beta = (self.sum_xr - a * self.sum_x) / s2;
            t.d_logsigma = -self.n_o + dev / s2;
        }
        for (&c, &x) in self.c.iter().zip(&self.profile.cens_x) {
            let z = (c - a) / self.sigma;
            let lc = log_norm_cdf(z);
            t.ll += lc;
            if with_grad {
                let lambda = (log_norm_pdf(z) - lc).exp();
                t.d_a -= lambda / self.sigma;
                t.d_beta -= x * lambda / self.sigma;
                t.d_logsigma -= z * lambda;
            }
        }
        t
    }

    /// Mode of `ℓ(a) − a²/(2τ²)` by safeguarded Newton, and the negative
    /// second derivative there.
    fn mode(&self, tau: f64) -> (f64, f64) {
        let prec = 1.0 / (tau * tau);
        let s2 = self.sigma * self.sigma;
        let h = |a: f64| {
            let (l, d1, d2) = self.a_derivs(a);
            (l - 0.5 * prec * a * a, d1 - prec * a, d2 - prec)
        };
        let mut a = if self.n_o > 0.0 {
            (self.n_o * self.rbar / s2) / (self.n_o / s2 + prec)
        } else {
            0.0
        };
        let (mut hv, mut h1, mut h2) = h(a);
        for _ in 0..100 {
            let step = -h1 / h2;
            if !step.is_finite() {
                break;
            }
            let mut frac = 1.0;
            let mut moved = false;
            for _ in 0..50 {
                let cand = a + frac * step;
                let (cv, c1, c2) = h(cand);
                if cv.is_finite() && cv >= hv - 1e-12 * hv.abs() {
                    a = cand;
                    (hv, h1, h2) = (cv, c1, c2);
                    moved = true;
                    break;
                }
                frac *= 0.5;
            }
            if !moved || (frac * step).abs() <= 1e-11 * (1.0 + a.abs()) {
                break;
            }
        }
        (a, -h2)
    }
}

/// Buffers reused across profiles.
#[derive(Default)]
struct Scratch {
    u: Vec<f64>,
    lw: Vec<f64>,
    a: Vec<f64>,
    post: Vec<f64>,
    terms: Vec<NodeTerms>,
}

/// `ln ∫ exp(ℓ(a)) N(a; 0, τ²) da` for `τ > 0`. Leaves the nodes in `a` and
/// normalized posterior weights in `post`.
///
/// The rule is first centred at the posterior mode with the Laplace scale,
/// then re-centred at the posterior mean and standard deviation that pass
/// reports. Censored profiles have skewed posteriors (sharp on the side of
/// the detection limit, prior-wide on the other), which the mode curvature
/// alone under-covers.
fn integrate(
    prep: &Prepared<'_>,
    tau: f64,
    rule: &QuadratureRule,
    sc: &mut Scratch,
    with_grad: bool,
) -> f64 {
    let (m, curv) = prep.mode(tau);
    integrate_at(prep, tau, rule, sc, false, m, 1.0 / curv.sqrt());
    let mean: f64 = sc.post.iter().zip(&sc.a).map(|(w, a)| w * a).sum();
    let var: f64 = sc.post.iter().zip(&sc.a).map(|(w, a)| w * (a - mean).powi(2)).sum();
    integrate_at(prep, tau, rule, sc, with_grad, mean, var.sqrt())
}

fn integrate_at(
    prep: &Prepared<'_>,
    tau: f64,
    rule: &QuadratureRule,
    sc: &mut Scratch,
    with_grad: bool,
    center: f64,
    scale: f64,
) -> f64 {
    adapt_into(rule, center / tau, scale / tau, &mut sc.u, &mut sc.lw);
    sc.a.clear();
    sc.post.clear();
    sc.terms.clear();
    let mut top = f64::NEG_INFINITY;
    for (&u, &lw) in sc.u.iter().zip(&sc.lw) {
        let a = tau * u;
        let t = prep.terms(a, with_grad);
        let lp = lw + t.ll;
        top = top.max(lp);
        sc.a.push(a);
        sc.post.push(lp);
        sc.terms.push(t);
    }
    let total: f64 = sc.post.iter().map(|lp| (lp - top).exp()).sum();
    let log_l = top + total.ln();
    for lp in sc.post.iter_mut() {
        *lp = (*lp - log_l).exp();
    }
    log_l
}

/// Marginal log-likelihood and its gradient in `(α, β, ln(τ/σ), ln σ)`.
fn loglik_and_grad(
    profiles: &[Profile],
    alpha: f64,
    beta: f64,
    rho: f64,
    log_sigma: f64,
    rule: &QuadratureRule,
    sc: &mut Scratch,
    grad: Option<&mut [f64; 4]>,
) -> f64 {
    let sigma = log_sigma.exp();
    let tau = sigma * rho.exp();
    let with_grad = grad.is_some();
    let mut total = 0.0;
    let mut g = [0.0; 4];
    for p in profiles {
        let prep = Prepared::new(p, alpha, beta, sigma);
        total += p.mult * integrate(&prep, tau, rule, sc, with_grad);
        if with_grad {
            let mut e = [0.0; 4];
            for ((&w, &a), t) in sc.post.iter().zip(&sc.a).zip(&sc.terms) {
                e[0] += w * t.d_a;
                e[1] += w * t.d_beta;
                e[2] += w * t.d_a * a;
                e[3] += w * (t.d_logsigma + t.d_a * a);
            }
            for (gi, ei) in g.iter_mut().zip(e) {
                *gi += p.mult * ei;
            }
        }
    }
    if let Some(out) = grad {
        *out = g;
    }
    total
}

/// `Σᵢ ln ∫ Πⱼ f(yᵢⱼ|a)^δ F(yᵢⱼ|a)^(1−δ) N(a; 0, τ²) da`. At `τ² = 0` the
/// integral is the integrand at `a = 0`.
pub fn marginal_loglik(
    params: &MixedParams,
    data: &ClusterData,
    rule: &QuadratureRule,
) -> Result<f64, MixedError> {
    params.check()?;
    let (profs, assignment) = profiles(data);
    let sigma = params.sigma2.sqrt();
    if params.tau2 == 0.0 {
        let tp = TobitParams {
            alpha: params.alpha,
            beta: params.beta,
            sigma,
        };
        let mut total = 0.0;
        let mut seen = vec![false; profs.len()];
        for (i, &slot) in assignment.iter().enumerate() {
            if !seen[slot] {
                seen[slot] = true;
                total += profs[slot].mult * tobit_loglik(&tp, &data.patient(i))?;
            }
        }
        return Ok(total);
    }
    let rho = 0.5 * (params.tau2 / params.sigma2).ln();
    let mut sc = Scratch::default();
    Ok(loglik_and_grad(
        &profs,
        params.alpha,
        params.beta,
        rho,
        sigma.ln(),
        rule,
        &mut sc,
        None,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedConfig {
    pub n_quad: usize,
}

impl Default for MixedConfig {
    fn default() -> Self {
        Self {
            n_quad: DEFAULT_N_QUAD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedCensoredFit {
    pub cluster_id: usize,
    pub alpha: f64,
    pub beta: f64,
    pub tau2: f64,
    pub sigma2: f64,
    pub loglik: f64,
    pub converged: bool,
    pub n_patients_used: usize,
    /// β fixed at 0 because the mean pattern is constant.
    pub degenerate: bool,
}

impl MixedCensoredFit {
    pub fn params(&self) -> MixedParams {
        MixedParams {
            alpha: self.alpha,
            beta: self.beta,
            tau2: self.tau2,
            sigma2: self.sigma2,
        }
    }

    /// `α̂ + β̂·ȳ̄`.
    pub fn population_line(&self, grand_mean: f64) -> f64 {
        self.alpha + self.beta * grand_mean
    }

    /// `τ̂²/(τ̂² + σ̂²/k)`.
    pub fn shrink_weight(&self, k: usize) -> f64 {
        if self.tau2 == 0.0 {
            0.0
        } else {
            self.tau2 / (self.tau2 + self.sigma2 / k as f64)
        }
    }
}

fn pooled_series(data: &ClusterData) -> (Vec<f64>, Vec<bool>, Vec<f64>) {
    let n = data.n_patients();
    let x: Vec<f64> = (0..n)
        .flat_map(|_| data.covariate.iter().copied())
        .collect();
    (data.y.clone(), data.observed.clone(), x)
}

/// Maximum-likelihood fit of the random-intercept censored model.
///
/// τ is optimized as `ln(τ/σ)` above [`LOG_TAU_RATIO_FLOOR`]. The τ² = 0
/// model (a pooled censored regression) is fitted alongside; τ² is reported
/// as exactly 0 when the interior optimum does not beat it by more than
/// 1e-7 in log-likelihood, sits on the floor, or has shrinkage weight
/// below 1e-6.
pub fn fit_mixed_censored(
    data: &ClusterData,
    config: &MixedConfig,
) -> Result<MixedCensoredFit, MixedError> {
    let informative = data.n_informative();
    if informative < 2 {
        return Err(MixedError::NotEstimable { informative });
    }
    let rule = gauss_hermite_cached(config.n_quad)?;
    let degenerate = data.covariate_is_constant();
    let (py, po, px) = pooled_series(data);
    let pooled = fit_tobit(&CensoredSeries::new(&py, &po, &px)?)?;
    let (profs, _) = profiles(data);
    let k = data.k();

    let mut sc = Scratch::default();
    let mut eval = |alpha: f64, beta: f64, rho: f64, ls: f64, g: Option<&mut [f64; 4]>| {
        loglik_and_grad(&profs, alpha, beta, rho, ls, &rule, &mut sc, g)
    };

    // pick a starting split of the pooled variance between τ² and σ²
    let var_p = pooled.sigma * pooled.sigma;
    let mut start = (f64::NEG_INFINITY, 0.0, 0.0);
    for rho in [-2.5, -1.0, 0.0, 1.0] {
        let ls = 0.5
            * (var_p / (1.0 + (2.0 * rho as f64).exp()))
                .max(SIGMA_FLOOR * SIGMA_FLOOR)
                .ln();
        let v = eval(pooled.alpha, pooled.beta, rho, ls, None);
        if v > start.0 {
            start = (v, rho, ls);
        }
    }

    let opts = OptimOptions {
        grad_tol: 1e-9,
        f_tol: 1e-13,
        x_tol: 1e-10,
        max_iter: 1000,
    };
    let ls_floor = SIGMA_FLOOR.ln();
    let (alpha, beta, rho, ls, converged) = if degenerate {
        let res = maximize_smooth(
            |p: &[f64], g: &mut [f64]| {
                let mut full = [0.0; 4];
                let v = eval(p[0], 0.0, p[1], p[2], Some(&mut full));
                g[0] = full[0];
                g[1] = full[2];
                g[2] = full[3];
                v
            },
            &[pooled.alpha, start.1, start.2],
            &[f64::NEG_INFINITY, LOG_TAU_RATIO_FLOOR, ls_floor],
            &opts,
        )?;
        (
            res.argmax[0],
            0.0,
            res.argmax[1],
            res.argmax[2],
            res.converged,
        )
    } else {
        let res = maximize_smooth(
            |p: &[f64], g: &mut [f64]| {
                let mut full = [0.0; 4];
                let v = eval(p[0], p[1], p[2], p[3], Some(&mut full));
                g.copy_from_slice(&full);
                v
            },
            &[pooled.alpha, pooled.beta, start.1, start.2],
            &[
                f64::NEG_INFINITY,
                f64::NEG_INFINITY,
                LOG_TAU_RATIO_FLOOR,
                ls_floor,
            ],
            &opts,
        )?;
        (
            res.argmax[0],
            res.argmax[1],
            res.argmax[2],
            res.argmax[3],
            res.converged,
        )
    };

    let sigma2 = (2.0 * ls).exp();
    let tau2 = sigma2 * (2.0 * rho).exp();
    let interior = MixedParams {
        alpha,
        beta,
        tau2,
        sigma2,
    };
    let interior_ll = marginal_loglik(&interior, data, &rule)?;
    let weight = tau2 / (tau2 + sigma2 / k as f64);
    let on_boundary = interior_ll - pooled.loglik <= BOUNDARY_GAIN
        || rho <= LOG_TAU_RATIO_FLOOR + 1e-9
        || weight < BOUNDARY_WEIGHT;

    let (params, converged) = if on_boundary {
        (
            MixedParams {
                alpha: pooled.alpha,
                beta: pooled.beta,
                tau2: 0.0,
                sigma2: pooled.sigma * pooled.sigma,
            },
            pooled.converged,
        )
    } else {
        (interior, converged)
    };
    let loglik = marginal_loglik(&params, data, &rule)?;
    Ok(MixedCensoredFit {
        cluster_id: data.cluster_id,
        alpha: params.alpha,
        beta: params.beta,
        tau2: params.tau2,
        sigma2: params.sigma2,
        loglik,
        converged,
        n_patients_used: data.n_patients(),
        degenerate,
    })
}

/// The τ² = 0 model alone: a pooled censored regression over every cell.
/// Needs only one observed cell, so it serves as the population line for
/// clusters where [`fit_mixed_censored`] is not estimable.
pub fn fit_population_line(data: &ClusterData) -> Result<MixedCensoredFit, MixedError> {
    let (py, po, px) = pooled_series(data);
    let pooled = fit_tobit(&CensoredSeries::new(&py, &po, &px)?)?;
    Ok(MixedCensoredFit {
        cluster_id: data.cluster_id,
        alpha: pooled.alpha,
        beta: pooled.beta,
        tau2: 0.0,
        sigma2: pooled.sigma * pooled.sigma,
        loglik: pooled.loglik,
        converged: pooled.converged,
        n_patients_used: data.n_patients(),
        degenerate: pooled.degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatientPosterior {
    /// `E(aᵢ | yᵢ, δᵢ, θ̂)`
    pub a_hat: f64,
    /// `E(ȳ̃ᵢ | yᵢ, δᵢ, θ̂)`
    pub cond_mean: f64,
    pub shrink_weight: f64,
}

fn profile_posterior(
    p: &Profile,
    k: usize,
    fit: &MixedCensoredFit,
    rule: &QuadratureRule,
    sc: &mut Scratch,
) -> PatientPosterior {
    let sigma = fit.sigma2.sqrt();
    let observed_sum: f64 = p.obs_y.iter().sum();
    let mu = |x: f64| fit.alpha + fit.beta * x;
    if fit.tau2 == 0.0 {
        let cens: f64 = p
            .cens_t
            .iter()
            .zip(&p.cens_x)
            .map(|(&t, &x)| trunc_mean_unchecked(mu(x), sigma, t))
            .sum();
        return PatientPosterior {
            a_hat: 0.0,
            cond_mean: (observed_sum + cens) / k as f64,
            shrink_weight: 0.0,
        };
    }
    let prep = Prepared::new(p, fit.alpha, fit.beta, sigma);
    integrate(&prep, fit.tau2.sqrt(), rule, sc, false);
    let a_hat: f64 = sc.post.iter().zip(&sc.a).map(|(w, a)| w * a).sum();
    let mut cens = 0.0;
    for (&t, &x) in p.cens_t.iter().zip(&p.cens_x) {
        cens += sc
            .post
            .iter()
            .zip(&sc.a)
            .map(|(w, a)| w * trunc_mean_unchecked(mu(x) + a, sigma, t))
            .sum::<f64>();
    }
    PatientPosterior {
        a_hat,
        cond_mean: (observed_sum + cens) / k as f64,
        shrink_weight: fit.shrink_weight(k),
    }
}

/// Posterior mean of one patient's intercept and of the patient's latent
/// cluster average under a fitted model.
pub fn posterior_intercept(
    cells: &CensoredSeries<'_>,
    fit: &MixedCensoredFit,
    rule: &QuadratureRule,
) -> PatientPosterior {
    let p = Profile::from_series(cells);
    profile_posterior(&p, cells.len(), fit, rule, &mut Scratch::default())
}

/// [`posterior_intercept`] for every patient of `data`, in patient order.
pub fn cluster_posteriors(
    data: &ClusterData,
    fit: &MixedCensoredFit,
    rule: &QuadratureRule,
) -> Vec<PatientPosterior> {
    let (profs, assignment) = profiles(data);
    let mut sc = Scratch::default();
    let per_profile: Vec<PatientPosterior> = profs
        .iter()
        .map(|p| profile_posterior(p, data.k(), fit, rule, &mut sc))
        .collect();
    assignment
        .into_iter()
        .map(|slot| per_profile[slot])
        .collect()
}

/// `ŷᵢ = α̂ + β̂·ȳ̄ + âᵢ`.
pub fn shrunken_summary(
    posterior: &PatientPosterior,
    fit: &MixedCensoredFit,
    grand_mean: f64,
) -> f64 {
    fit.population_line(grand_mean) + posterior.a_hat
}

/// `E(ȳ̃ᵢ | yᵢ, δᵢ, θ̂)`; the plain average for a fully observed patient.
pub fn unshrunken_summary(posterior: &PatientPosterior) -> f64 {
    posterior.cond_mean
}

/// CSV dump `cluster_id,alpha,beta,tau2,sigma2,loglik,converged`.
pub fn write_fit_dump<W: Write>(fits: &[MixedCensoredFit], writer: W) -> Result<(), MixedError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "cluster_id",
        "alpha",
        "beta",
        "tau2",
        "sigma2",
        "loglik",
        "converged",
    ])?;
    for f in fits {
        w.write_record([
            f.cluster_id.to_string(),
            f.alpha.to_string(),
            f.beta.to_string(),
            f.tau2.to_string(),
            f.sigma2.to_string(),
            f.loglik.to_string(),
            u8::from(f.converged).to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gauss_hermite;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn simulate(
        seed: u64,
        n: usize,
        x: &[f64],
        p: MixedParams,
        censor_q: Option<f64>,
    ) -> ClusterData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = x.len();
        let mut y = Vec::with_capacity(n * k);
        for _ in 0..n {
            let a: f64 = p.tau2.sqrt() * rng.sample::<f64, _>(StandardNormal);
            for &xj in x {
                let e: f64 = rng.sample(StandardNormal);
                y.push(p.alpha + p.beta * xj + a + p.sigma2.sqrt() * e);
            }
        }
        let mut observed = vec![true; y.len()];
        if let Some(q) = censor_q {
            for j in 0..k {
                let mut col: Vec<f64> = (0..n).map(|i| y[i * k + j]).collect();
                col.sort_by(f64::total_cmp);
                let t = col[((q * n as f64) as usize).min(n - 2)];
                for i in 0..n {
                    if y[i * k + j] < t {
                        y[i * k + j] = t;
                        observed[i * k + j] = false;
                    }
                }
            }
        }
        ClusterData::new(7, x.to_vec(), y, observed).unwrap()
    }

    /// Compound-symmetric normal log-density via Sherman–Morrison.
    fn gaussian_marginal(p: &MixedParams, data: &ClusterData) -> f64 {
        let k = data.k() as f64;
        let (s2, t2) = (p.sigma2, p.tau2);
        let logdet = (k - 1.0) * s2.ln() + (s2 + k * t2).ln();
        (0..data.n_patients())
            .map(|i| {
                let s = data.patient(i);
                let r: Vec<f64> =
                    s.y.iter()
                        .zip(s.covariate)
                        .map(|(y, x)| y - p.alpha - p.beta * x)
                        .collect();
                let rr: f64 = r.iter().map(|v| v * v).sum();
                let rs: f64 = r.iter().sum();
                let quad = (rr - t2 / (s2 + k * t2) * rs * rs) / s2;
                -0.5 * (k * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
            })
            .sum()
    }

    #[test]
    fn single_observed_cell_is_gaussian_convolution() {
        let data = ClusterData::new(1, vec![0.7], vec![1.9], vec![true]).unwrap();
        let p = MixedParams {
            alpha: 0.4,
            beta: 1.3,
            tau2: 0.6,
            sigma2: 0.25,
        };
        let rule = gauss_hermite(100).unwrap();
        let got = marginal_loglik(&p, &data, &rule).unwrap();
        let sd = (p.sigma2 + p.tau2).sqrt();
        let want = log_norm_pdf((1.9 - 0.4 - 1.3 * 0.7) / sd) - sd.ln();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn uncensored_matches_compound_symmetric_normal() {
        let x = [0.3, 1.1, 2.0, 2.6];
        let p = MixedParams {
            alpha: 1.0,
            beta: 0.8,
            tau2: 0.4,
            sigma2: 0.2,
        };
        let data = simulate(3, 25, &x, p, None);
        let rule = gauss_hermite(20).unwrap();
        for q in [
            p,
            MixedParams { tau2: 3.0, ..p },
            MixedParams { tau2: 1e-4, ..p },
        ] {
            let got = marginal_loglik(&q, &data, &rule).unwrap();
            let want = gaussian_marginal(&q, &data);
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
    }

    #[test]
    fn zero_tau_is_sum_of_tobit_terms() {
        let x = [0.2, 0.9, 1.4];
        let p = MixedParams {
            alpha: 0.5,
            beta: 1.0,
            tau2: 0.3,
            sigma2: 0.4,
        };
        let data = simulate(5, 30, &x, p, Some(0.4));
        let q = MixedParams { tau2: 0.0, ..p };
        let got = marginal_loglik(&q, &data, &gauss_hermite(10).unwrap()).unwrap();
        let tp = TobitParams {
            alpha: 0.5,
            beta: 1.0,
            sigma: 0.4f64.sqrt(),
        };
        let want: f64 = (0..30)
            .map(|i| tobit_loglik(&tp, &data.patient(i)).unwrap())
            .sum();
        assert!((got - want).abs() < 1e-10 * want.abs());
    }

    #[test]
    fn rejects_invalid_parameters() {
        let data = ClusterData::new(1, vec![0.0], vec![1.0], vec![true]).unwrap();
        let rule = gauss_hermite(5).unwrap();
        let bad_sigma = MixedParams {
            alpha: 0.0,
            beta: 0.0,
            tau2: 1.0,
            sigma2: 0.0,
        };
        assert!(matches!(
            marginal_loglik(&bad_sigma, &data, &rule),
            Err(MixedError::NonPositiveSigma(_))
        ));
        let bad_tau = MixedParams {
            tau2: -1.0,
            sigma2: 1.0,
            ..bad_sigma
        };
        assert!(matches!(
            marginal_loglik(&bad_tau, &data, &rule),
            Err(MixedError::NegativeTau(_))
        ));
        assert!(matches!(
            ClusterData::new(1, vec![0.0], vec![], vec![]),
            Err(MixedError::EmptyCluster)
        ));
        assert!(ClusterData::new(1, vec![0.0, 1.0], vec![1.0], vec![true]).is_err());
    }

    #[test]
    fn one_informative_patient_is_not_estimable() {
        let data = ClusterData::new(
            1,
            vec![0.0, 1.0],
            vec![1.0, 2.0, 0.5, 0.5],
            vec![true, true, false, false],
        )
        .unwrap();
        assert!(matches!(
            fit_mixed_censored(&data, &MixedConfig::default()),
            Err(MixedError::NotEstimable { informative: 1 })
        ));
    }

    #[test]
    fn uncensored_posterior_is_blup() {
        let x = [0.5, 1.0, 1.8];
        let fit = MixedCensoredFit {
            cluster_id: 1,
            alpha: 0.3,
            beta: 1.1,
            tau2: 0.5,
            sigma2: 0.3,
            loglik: 0.0,
            converged: true,
            n_patients_used: 1,
            degenerate: false,
        };
        let y = [1.2, 1.9, 2.5];
        let s = CensoredSeries::new(&y, &[true; 3], &x).unwrap();
        let post = posterior_intercept(&s, &fit, &gauss_hermite(100).unwrap());
        let w = 0.5 / (0.5 + 0.3 / 3.0);
        let ybar = y.iter().sum::<f64>() / 3.0;
        let grand = x.iter().sum::<f64>() / 3.0;
        assert!((post.a_hat - w * (ybar - 0.3 - 1.1 * grand)).abs() < 1e-8);
        assert_eq!(unshrunken_summary(&post), ybar);
        assert!((post.shrink_weight - w).abs() < 1e-15);
    }

    #[test]
    fn zero_tau_posterior_is_population_line() {
        let fit = MixedCensoredFit {
            cluster_id: 1,
            alpha: 1.0,
            beta: 0.5,
            tau2: 0.0,
            sigma2: 0.2,
            loglik: 0.0,
            converged: true,
            n_patients_used: 1,
            degenerate: false,
        };
        let s = CensoredSeries::new(&[1.5, 0.9], &[true, false], &[1.0, 2.0]).unwrap();
        let post = posterior_intercept(&s, &fit, &gauss_hermite(100).unwrap());
        assert_eq!(post.a_hat, 0.0);
        assert_eq!(post.shrink_weight, 0.0);
        assert_eq!(shrunken_summary(&post, &fit, 1.5), 1.75);
    }

    #[test]
    fn censored_posteriors_satisfy_shrinkage_identity() {
        let x = [0.1, 0.8, 1.5, 2.4, 3.0];
        let p = MixedParams {
            alpha: 2.0,
            beta: 1.0,
            tau2: 0.25,
            sigma2: 0.09,
        };
        let data = simulate(11, 40, &x, p, Some(0.6));
        let fit = fit_mixed_censored(&data, &MixedConfig::default()).unwrap();
        assert!(fit.tau2 > 0.0);
        let rule = gauss_hermite(100).unwrap();
        let line = fit.population_line(data.grand_mean());
        for (i, post) in cluster_posteriors(&data, &fit, &rule).iter().enumerate() {
            let w = post.shrink_weight;
            assert!((0.0..=1.0).contains(&w));
            assert!(
                (post.a_hat - w * (post.cond_mean - line)).abs() < 1e-8,
                "patient {i}"
            );
            let alt = (1.0 - w) * line + w * post.cond_mean;
            assert!((shrunken_summary(post, &fit, data.grand_mean()) - alt).abs() < 1e-8);
            let single = posterior_intercept(&data.patient(i), &fit, &rule);
            assert_eq!(single, *post);
        }
    }

    #[test]
    fn fully_censored_patient_mean_is_below_thresholds() {
        let fit = MixedCensoredFit {
            cluster_id: 1,
            alpha: 1.0,
            beta: 1.0,
            tau2: 0.3,
            sigma2: 0.2,
            loglik: 0.0,
            converged: true,
            n_patients_used: 1,
            degenerate: false,
        };
        let t = [0.4, 0.6, 0.5];
        let s = CensoredSeries::new(&t, &[false; 3], &[0.0, 0.5, 1.0]).unwrap();
        let post = posterior_intercept(&s, &fit, &gauss_hermite(100).unwrap());
        assert!(post.cond_mean < 0.5);
        assert!(post.a_hat < 0.0);
    }

    #[test]
    fn no_between_patient_spread_gives_exact_zero_tau() {
        // residuals centred within each patient, so the pooled fit is the MLE
        let x = [0.0, 1.0, 2.0, 3.0];
        let noise = [0.3, -0.1, -0.4, 0.2];
        let mut y = Vec::new();
        for i in 0..12 {
            for j in 0..4 {
                let e = noise[(i + j) % 4] * (1.0 + 0.1 * i as f64);
                y.push(1.5 + 0.7 * x[j] + e);
            }
        }
        let data = ClusterData::new(2, x.to_vec(), y.clone(), vec![true; 48]).unwrap();
        let fit = fit_mixed_censored(&data, &MixedConfig::default()).unwrap();
        assert_eq!(fit.tau2, 0.0);
        let xs: Vec<f64> = (0..12).flat_map(|_| x).collect();
        let mx = xs.iter().sum::<f64>() / 48.0;
        let my = y.iter().sum::<f64>() / 48.0;
        let sxx: f64 = xs.iter().map(|v| (v - mx).powi(2)).sum();
        let sxy: f64 = xs.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let beta = sxy / sxx;
        let alpha = my - beta * mx;
        let s2 = xs
            .iter()
            .zip(&y)
            .map(|(a, b)| (b - alpha - beta * a).powi(2))
            .sum::<f64>()
            / 48.0;
        assert!(
            (fit.alpha - alpha).abs() < 1e-4
                && (fit.beta - beta).abs() < 1e-4
                && (fit.sigma2 - s2).abs() < 1e-4
        );
        let rule = gauss_hermite(100).unwrap();
        let line = fit.population_line(data.grand_mean());
        for post in cluster_posteriors(&data, &fit, &rule) {
            assert_eq!(post.a_hat, 0.0);
            assert_eq!(shrunken_summary(&post, &fit, data.grand_mean()), line);
        }
    }

    #[test]
    fn stored_loglik_matches_marginal_and_saturates() {
        let x = [0.2, 0.6, 1.3, 2.2];
        let p = MixedParams {
            alpha: 1.0,
            beta: 1.2,
            tau2: 0.5,
            sigma2: 0.1,
        };
        let data = simulate(21, 50, &x, p, Some(0.5));
        let fit = fit_mixed_censored(&data, &MixedConfig::default()).unwrap();
        let at100 = marginal_loglik(&fit.params(), &data, &gauss_hermite(100).unwrap()).unwrap();
        let at200 = marginal_loglik(&fit.params(), &data, &gauss_hermite(200).unwrap()).unwrap();
        assert_eq!(fit.loglik, at100);
        assert!((at100 - at200).abs() < 1e-6);
        assert!(fit.converged);
    }

    #[test]
    fn constant_pattern_fixes_slope() {
        let p = MixedParams {
            alpha: 1.0,
            beta: 0.0,
            tau2: 0.5,
            sigma2: 0.1,
        };
        let data = simulate(4, 30, &[1.0, 1.0, 1.0], p, Some(0.3));
        let fit = fit_mixed_censored(&data, &MixedConfig::default()).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.beta, 0.0);
    }

    #[test]
    fn fit_dump_columns() {
        let fit = MixedCensoredFit {
            cluster_id: 3,
            alpha: 1.0,
            beta: 0.5,
            tau2: 0.0,
            sigma2: 0.2,
            loglik: -4.5,
            converged: true,
            n_patients_used: 9,
            degenerate: false,
        };
        let mut out = Vec::new();
        write_fit_dump(&[fit], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "cluster_id,alpha,beta,tau2,sigma2,loglik,converged\n3,1,0.5,0,0.2,-4.5,1\n"
        );
    }
}
