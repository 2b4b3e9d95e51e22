//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Φ from `erfc`, independent of the library's implementation.
pub fn big_phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Composite Simpson rule with `n` (even) intervals.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}

/// Tobit log-likelihood written from the density directly.
pub fn tobit_ll(alpha: f64, beta: f64, sigma: f64, y: &[f64], obs: &[bool], x: &[f64]) -> f64 {
    let mut ll = 0.0;
    for ((&yj, &o), &xj) in y.iter().zip(obs).zip(x) {
        let z = (yj - alpha - beta * xj) / sigma;
        ll += if o {
            -0.5 * z * z - (2.0 * std::f64::consts::PI).sqrt().ln() - sigma.ln()
        } else {
            big_phi(z).ln()
        };
    }
    ll
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridBest {
    pub alpha: f64,
    pub beta: f64,
    pub log_sigma: f64,
    pub loglik: f64,
}

/// Grid maximum of the Tobit likelihood over the box `center ± half` in
/// `(α, β, ln σ)` with spacing `step`.
pub fn tobit_grid(
    center: [f64; 3],
    half: f64,
    step: f64,
    y: &[f64],
    obs: &[bool],
    x: &[f64],
) -> GridBest {
    let n = (half / step).round() as i64;
    let mut best = GridBest { alpha: 0.0, beta: 0.0, log_sigma: 0.0, loglik: f64::NEG_INFINITY };
    for i in -n..=n {
        let a = center[0] + i as f64 * step;
        for j in -n..=n {
            let b = center[1] + j as f64 * step;
            for k in -n..=n {
                let ls = center[2] + k as f64 * step;
                let ll = tobit_ll(a, b, ls.exp(), y, obs, x);
                if ll > best.loglik {
                    best = GridBest { alpha: a, beta: b, log_sigma: ls, loglik: ll };
                }
            }
        }
    }
    best
}

/// Brute-force argmax at resolution 1e-3 in `(α, β, ln σ)` inside the box
/// `(α, β, ln σ)_true ± 3`, reached by successive refinement of a unimodal
/// surface: 0.05 over the whole box, then 0.005 around the incumbent, then
/// 0.001 windows re-centred until the argmax is interior or on the box edge.
/// All grids share the lattice `true + 0.001·ℤ³`.
pub fn tobit_grid_oracle(truth: [f64; 3], y: &[f64], obs: &[bool], x: &[f64]) -> GridBest {
    let center = [truth[0], truth[1], truth[2].ln()];
    let snap = |g: &GridBest, half: f64| {
        let c = [g.alpha, g.beta, g.log_sigma];
        let mut out = [0.0; 3];
        for d in 0..3 {
            let v = c[d].clamp(center[d] - 3.0 + half, center[d] + 3.0 - half);
            out[d] = center[d] + ((v - center[d]) / 0.001).round() * 0.001;
        }
        out
    };
    let coarse = tobit_grid(center, 3.0, 0.05, y, obs, x);
    let mid = tobit_grid(snap(&coarse, 0.1), 0.1, 0.005, y, obs, x);
    let mut c = snap(&mid, 0.02);
    loop {
        let fine = tobit_grid(c, 0.02, 0.001, y, obs, x);
        let next = snap(&fine, 0.02);
        let interior = (0..3).all(|d| {
            let v = [fine.alpha, fine.beta, fine.log_sigma][d];
            (v - c[d]).abs() < 0.02 - 0.0005
        });
        if interior || next == c {
            return fine;
        }
        c = next;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmFit {
    pub alpha: f64,
    pub beta: f64,
    pub tau2: f64,
    pub sigma2: f64,
    pub iterations: usize,
}

/// Maximum likelihood for the fully observed random-intercept model
/// `yᵢⱼ = α + β xⱼ + aᵢ + εᵢⱼ` by expectation-maximization.
pub fn em_random_intercept(y: &[f64], x: &[f64]) -> EmFit {
    let k = x.len();
    let n = y.len() / k;
    let kf = k as f64;
    let x_bar = x.iter().sum::<f64>() / kf;
    let sxx: f64 = x.iter().map(|v| (v - x_bar).powi(2)).sum();
    // start from pooled least squares
    let ls = |target: &dyn Fn(usize, usize) -> f64| {
        let mut sxy = 0.0;
        let mut t_bar = 0.0;
        for i in 0..n {
            for j in 0..k {
                let t = target(i, j);
                t_bar += t;
                sxy += (x[j] - x_bar) * t;
            }
        }
        t_bar /= (n * k) as f64;
        let beta = if sxx > 0.0 { sxy / (n as f64 * sxx) } else { 0.0 };
        (t_bar - beta * x_bar, beta)
    };
    let (mut alpha, mut beta) = ls(&|i, j| y[i * k + j]);
    let mut tau2 = 0.1;
    let mut sigma2 = 0.1;
    let mut m = vec![0.0; n];
    for it in 0..2_000_000 {
        let w = tau2 / (tau2 + sigma2 / kf);
        let v = tau2 * sigma2 / (sigma2 + kf * tau2);
        for i in 0..n {
            let r: f64 = (0..k).map(|j| y[i * k + j] - alpha - beta * x[j]).sum::<f64>() / kf;
            m[i] = w * r;
        }
        let new_tau2 = m.iter().map(|mi| mi * mi + v).sum::<f64>() / n as f64;
        let (na, nb) = ls(&|i, j| y[i * k + j] - m[i]);
        let mut ss = 0.0;
        for i in 0..n {
            for j in 0..k {
                ss += (y[i * k + j] - na - nb * x[j] - m[i]).powi(2) + v;
            }
        }
        let new_sigma2 = ss / (n * k) as f64;
        let change = (na - alpha)
            .abs()
            .max((nb - beta).abs())
            .max((new_tau2 - tau2).abs())
            .max((new_sigma2 - sigma2).abs());
        alpha = na;
        beta = nb;
        tau2 = new_tau2;
        sigma2 = new_sigma2;
        if change < 1e-13 {
            return EmFit { alpha, beta, tau2, sigma2, iterations: it + 1 };
        }
    }
    EmFit { alpha, beta, tau2, sigma2, iterations: 2_000_000 }
}

/// One cluster from the random-intercept model, patient-major; cells below
/// `threshold` are censored and store it.
pub fn simulate_cluster(
    rng: &mut ChaCha8Rng,
    n: usize,
    x: &[f64],
    theta: [f64; 4],
    threshold: Option<f64>,
) -> (Vec<f64>, Vec<bool>) {
    let [alpha, beta, tau2, sigma2] = theta;
    let mut y = Vec::with_capacity(n * x.len());
    let mut obs = Vec::with_capacity(n * x.len());
    for _ in 0..n {
        let a = tau2.sqrt() * normal(rng);
        for &xj in x {
            let v = alpha + beta * xj + a + sigma2.sqrt() * normal(rng);
            match threshold {
                Some(t) if v < t => {
                    y.push(t);
                    obs.push(false);
                }
                _ => {
                    y.push(v);
                    obs.push(true);
                }
            }
        }
    }
    (y, obs)
}

/// Threshold censoring a `rate` share of cells in expectation.
pub fn threshold_for_rate(x: &[f64], theta: [f64; 4], rate: f64) -> f64 {
    let [alpha, beta, tau2, sigma2] = theta;
    let sd = (tau2 + sigma2).sqrt();
    let frac = |t: f64| x.iter().map(|&xj| big_phi((t - alpha - beta * xj) / sd)).sum::<f64>() / x.len() as f64;
    let (mut lo, mut hi) = (-100.0, 100.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if frac(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
