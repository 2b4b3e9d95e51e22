//! Maximizers for smooth objectives of a few parameters.
//!
//! [`maximize`] is derivative-free (Nelder–Mead) followed by a quasi-Newton
//! polish on finite-difference gradients. [`maximize_smooth`] is the
//! projected BFGS used by the likelihood fits, which supply analytic
//! gradients and may carry lower bounds on some coordinates.

use super::NumericsError;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub argmax: Vec<f64>,
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimOptions {
    /// Stationarity: `‖∇f‖∞ ≤ grad_tol·(1 + |f|)`.
    pub grad_tol: f64,
    /// Relative objective change treated as stalled progress.
    pub f_tol: f64,
    /// Parameter change treated as stalled progress.
    pub x_tol: f64,
    pub max_iter: usize,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-6,
            f_tol: 1e-8,
            x_tol: 1e-6,
            max_iter: 500,
        }
    }
}

/// Fourth-order central-difference gradient.
pub fn fd_gradient<F: Fn(&[f64]) -> f64>(objective: &F, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = 1e-3 * x[i].abs().max(1.0);
            let mut at = |delta: f64| {
                probe[i] = x[i] + delta;
                let v = objective(&probe);
                probe[i] = x[i];
                v
            };
            let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
            (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
        })
        .collect()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Maximize a smooth function without derivatives.
///
/// Runs Nelder–Mead to a loose tolerance and then polishes with BFGS on
/// finite-difference gradients. `converged` is set only when the
/// finite-difference gradient at the returned point satisfies
/// `‖∇f‖∞ ≤ tol·(1 + |f|)`. The returned value is never below `f(start)`.
pub fn maximize<F: Fn(&[f64]) -> f64>(
    objective: F,
    start: &[f64],
    tol: f64,
) -> Result<OptimResult, NumericsError> {
    let f0 = objective(start);
    if !f0.is_finite() {
        return Err(NumericsError::NonFiniteStart);
    }
    let opts = OptimOptions {
        grad_tol: tol,
        ..OptimOptions::default()
    };
    let simplex = nelder_mead(&objective, start, f0, &opts);
    let mut polish = maximize_smooth(
        |x: &[f64], grad: &mut [f64]| {
            let v = objective(x);
            grad.copy_from_slice(&fd_gradient(&objective, x));
            v
        },
        &simplex.argmax,
        &vec![f64::NEG_INFINITY; start.len()],
        &opts,
    )?;
    polish.iterations += simplex.iterations;
    if polish.value < simplex.value {
        polish.argmax = simplex.argmax;
        polish.value = simplex.value;
    }
    let grad = fd_gradient(&objective, &polish.argmax);
    polish.converged = inf_norm(&grad) <= tol * (1.0 + polish.value.abs());
    Ok(polish)
}

fn nelder_mead<F: Fn(&[f64]) -> f64>(
    objective: &F,
    start: &[f64],
    f_start: f64,
    opts: &OptimOptions,
) -> OptimResult {
    let d = start.len();
    // minimize the negated objective; non-finite values rank worst
    let cost = |x: &[f64]| {
        let v = -objective(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut pts: Vec<Vec<f64>> = vec![start.to_vec()];
    let mut vals = vec![-f_start];
    for i in 0..d {
        let mut p = start.to_vec();
        p[i] += 0.1 * start[i].abs().max(1.0);
        vals.push(cost(&p));
        pts.push(p);
    }
    let max_iter = 400 * (d + 1);
    let mut iter = 0;
    while iter < max_iter {
        iter += 1;
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();

        let spread = (vals[d] - vals[0]).abs();
        let diameter = pts[1..]
            .iter()
            .map(|p| {
                p.iter()
                    .zip(&pts[0])
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
            })
            .fold(0.0f64, f64::max);
        if spread <= 1e-3 * opts.f_tol.sqrt() * (1.0 + vals[0].abs()) && diameter <= opts.x_tol {
            break;
        }

        let centroid: Vec<f64> = (0..d)
            .map(|j| pts[..d].iter().map(|p| p[j]).sum::<f64>() / d as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            (0..d)
                .map(|j| centroid[j] + t * (pts[d][j] - centroid[j]))
                .collect()
        };

        let reflected = along(-1.0);
        let f_r = cost(&reflected);
        if f_r < vals[0] {
            let expanded = along(-2.0);
            let f_e = cost(&expanded);
            if f_e < f_r {
                pts[d] = expanded;
                vals[d] = f_e;
            } else {
                pts[d] = reflected;
                vals[d] = f_r;
            }
        } else if f_r < vals[d - 1] {
            pts[d] = reflected;
            vals[d] = f_r;
        } else {
            let (contracted, f_c) = if f_r < vals[d] {
                let c = along(-0.5);
                let f = cost(&c);
                (c, f)
            } else {
                let c = along(0.5);
                let f = cost(&c);
                (c, f)
            };
            if f_c < vals[d].min(f_r) {
                pts[d] = contracted;
                vals[d] = f_c;
            } else {
                for i in 1..=d {
                    for j in 0..d {
                        pts[i][j] = pts[0][j] + 0.5 * (pts[i][j] - pts[0][j]);
                    }
                    vals[i] = cost(&pts[i]);
                }
            }
        }
    }
    let best = (0..=d)
        .min_by(|&a, &b| vals[a].total_cmp(&vals[b]))
        .unwrap_or(0);
    OptimResult {
        argmax: pts[best].clone(),
        value: -vals[best],
        converged: false,
        iterations: iter,
    }
}

/// Projected BFGS maximization with analytic gradients.
///
/// `fg(x, grad)` returns `f(x)` and writes `∇f(x)` into `grad`. Coordinates
/// are kept `≥ lower[i]`; use `f64::NEG_INFINITY` for free coordinates.
/// Stationarity is judged on the projected gradient.
pub fn maximize_smooth<G>(
    mut fg: G,
    start: &[f64],
    lower: &[f64],
    opts: &OptimOptions,
) -> Result<OptimResult, NumericsError>
where
    G: FnMut(&[f64], &mut [f64]) -> f64,
{
    let d = start.len();
    assert_eq!(lower.len(), d, "lower bound length");
    let mut x: Vec<f64> = start.iter().zip(lower).map(|(&v, &lo)| v.max(lo)).collect();
    let mut grad = vec![0.0; d];
    let mut f = fg(&x, &mut grad);
    if !f.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(NumericsError::NonFiniteStart);
    }
    let mut hinv = identity(d);
    let mut fresh = true;
    let mut x_new = vec![0.0; d];
    let mut grad_new = vec![0.0; d];
    let mut stalled = 0;
    let mut iterations = 0;

    for iter in 0..opts.max_iter {
        iterations = iter + 1;
        let active: Vec<bool> = (0..d).map(|i| x[i] <= lower[i] && grad[i] < 0.0).collect();
        let pg: Vec<f64> = (0..d)
            .map(|i| if active[i] { 0.0 } else { grad[i] })
            .collect();
        if inf_norm(&pg) <= opts.grad_tol * (1.0 + f.abs()) {
            return Ok(OptimResult {
                argmax: x,
                value: f,
                converged: true,
                iterations: iter,
            });
        }

        // ascent direction H·g restricted to the free set
        let mut dir: Vec<f64> = (0..d)
            .map(|i| {
                if active[i] {
                    0.0
                } else {
                    (0..d)
                        .filter(|&j| !active[j])
                        .map(|j| hinv[i][j] * grad[j])
                        .sum()
                }
            })
            .collect();
        if dot(&dir, &pg) <= 0.0 {
            hinv = identity(d);
            fresh = true;
            dir = pg.clone();
        }
        if fresh {
            // first step on an identity metric: cap its length
            let len = inf_norm(&dir);
            if len > 1.0 {
                dir.iter_mut().for_each(|v| *v /= len);
            }
        }

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..d {
                x_new[i] = (x[i] + step * dir[i]).max(lower[i]);
            }
            let f_try = fg(&x_new, &mut grad_new);
            let gain: f64 = (0..d).map(|i| grad[i] * (x_new[i] - x[i])).sum();
            if f_try.is_finite()
                && grad_new.iter().all(|g| g.is_finite())
                && f_try >= f + 1e-4 * gain
            {
                accepted = true;
                let s: Vec<f64> = (0..d).map(|i| x_new[i] - x[i]).collect();
                // curvature pair for the minimization of −f
                let y: Vec<f64> = (0..d).map(|i| grad[i] - grad_new[i]).collect();
                let sy = dot(&s, &y);
                let f_old = f;
                x.copy_from_slice(&x_new);
                grad.copy_from_slice(&grad_new);
                f = f_try;
                if sy > 1e-12 * norm2(&s) * norm2(&y) {
                    if fresh {
                        let scale = sy / dot(&y, &y);
                        hinv = identity(d);
                        hinv.iter_mut()
                            .enumerate()
                            .for_each(|(i, row)| row[i] = scale);
                        fresh = false;
                    }
                    bfgs_update(&mut hinv, &s, &y, sy);
                }
                let small_f = (f - f_old).abs() <= opts.f_tol * (1.0 + f.abs());
                let small_x = inf_norm(&s) <= opts.x_tol * 1e-3 * (1.0 + inf_norm(&x));
                stalled = if small_f && small_x { stalled + 1 } else { 0 };
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            if fresh {
                break;
            }
            hinv = identity(d);
            fresh = true;
            continue;
        }
        if stalled >= 3 {
            break;
        }
    }
    let active: Vec<bool> = (0..d).map(|i| x[i] <= lower[i] && grad[i] < 0.0).collect();
    let pg: Vec<f64> = (0..d)
        .map(|i| if active[i] { 0.0 } else { grad[i] })
        .collect();
    let converged = inf_norm(&pg) <= opts.grad_tol * (1.0 + f.abs());
    Ok(OptimResult {
        argmax: x,
        value: f,
        converged,
        iterations,
    })
}

fn identity(d: usize) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Inverse-Hessian update `H ← (I − ρsyᵀ)H(I − ρysᵀ) + ρssᵀ`.
fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let d = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..d).map(|i| dot(&h[i], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..d {
        for j in 0..d {
            h[i][j] += (1.0 + rho * yhy) * rho * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}
