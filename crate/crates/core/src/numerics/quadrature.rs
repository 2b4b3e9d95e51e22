//! Gauss–Hermite rules in the probabilists' convention (weights integrate
//! against the standard normal density) and their Laplace-style adaptation.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};

use super::normal::log_norm_pdf;
use super::NumericsError;

pub const MAX_POINTS: usize = 200;

/// Nodes and weights such that `Σ wₘ g(zₘ) ≈ ∫ g(z) φ(z) dz`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    /// `ln` of `weights`, kept separately so that far-tail weights of large
    /// rules can be combined in log space without underflow.
    pub log_weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `Σ wₘ g(nodeₘ)`.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut g: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * g(z))
            .sum()
    }
}

/// Orthonormal probabilists' Hermite polynomials `p_0..=p_m` at `x`.
fn orthonormal_hermite(m: usize, x: f64, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    if m == 0 {
        return;
    }
    out.push(x);
    for n in 1..m {
        let next = (x * out[n] - (n as f64).sqrt() * out[n - 1]) / ((n + 1) as f64).sqrt();
        out.push(next);
    }
}

/// `m`-point Gauss–Hermite rule against the standard normal density.
///
/// Nodes start from the eigenvalues of the Jacobi matrix (Golub–Welsch),
/// are polished by Newton steps on the orthonormal recurrence, and weights
/// come from the Christoffel sum `1 / Σ_{n<m} p_n(x)²`.
pub fn gauss_hermite(m: usize) -> Result<QuadratureRule, NumericsError> {
    if m == 0 || m > MAX_POINTS {
        return Err(NumericsError::Domain(format!(
            "quadrature point count {m} outside 1..={MAX_POINTS}"
        )));
    }
    if m == 1 {
        return Ok(QuadratureRule {
            nodes: vec![0.0],
            weights: vec![1.0],
            log_weights: vec![0.0],
        });
    }

    let jacobi = DMatrix::from_fn(m, m, |i, j| {
        if i + 1 == j {
            (j as f64).sqrt()
        } else if j + 1 == i {
            (i as f64).sqrt()
        } else {
            0.0
        }
    });
    let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    nodes.sort_by(f64::total_cmp);

    let mut poly = Vec::with_capacity(m + 1);
    for x in nodes.iter_mut() {
        for _ in 0..3 {
            orthonormal_hermite(m, *x, &mut poly);
            // p_m'(x) = sqrt(m) p_{m-1}(x) for orthonormal Hermite polynomials
            let deriv = (m as f64).sqrt() * poly[m - 1];
            if deriv == 0.0 {
                break;
            }
            *x -= poly[m] / deriv;
        }
    }
    // exact symmetry about zero
    for i in 0..m / 2 {
        let half = 0.5 * (nodes[m - 1 - i] - nodes[i]);
        nodes[i] = -half;
        nodes[m - 1 - i] = half;
    }
    if m % 2 == 1 {
        nodes[m / 2] = 0.0;
    }

    let mut log_weights: Vec<f64> = nodes
        .iter()
        .map(|&x| {
            orthonormal_hermite(m - 1, x, &mut poly);
            -poly.iter().map(|p| p * p).sum::<f64>().ln()
        })
        .collect();
    for i in 0..m / 2 {
        let avg = 0.5 * (log_weights[i] + log_weights[m - 1 - i]);
        log_weights[i] = avg;
        log_weights[m - 1 - i] = avg;
    }
    let weights_sum: f64 = log_weights.iter().map(|lw| lw.exp()).sum();
    let log_norm = weights_sum.ln();
    for lw in log_weights.iter_mut() {
        *lw -= log_norm;
    }
    let weights = log_weights.iter().map(|lw| lw.exp()).collect();
    Ok(QuadratureRule {
        nodes,
        weights,
        log_weights,
    })
}

/// Shared copy of `gauss_hermite(m)`, built once per process.
pub fn gauss_hermite_cached(m: usize) -> Result<Arc<QuadratureRule>, NumericsError> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<QuadratureRule>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(rule) = cache.lock().expect("rule cache poisoned").get(&m) {
        return Ok(Arc::clone(rule));
    }
    let rule = Arc::new(gauss_hermite(m)?);
    cache
        .lock()
        .expect("rule cache poisoned")
        .entry(m)
        .or_insert_with(|| Arc::clone(&rule));
    Ok(rule)
}

/// Re-centre and rescale a standard-normal rule onto `N(center, scale²)`
/// and reweight by the density ratio, so the adapted rule still integrates
/// against the standard normal density:
/// `Σ w'ₘ g(z'ₘ) ≈ ∫ g(z) φ(z) dz` with `z'ₘ = center + scale·zₘ`.
pub fn adapt_rule(
    rule: &QuadratureRule,
    center: f64,
    scale: f64,
) -> Result<QuadratureRule, NumericsError> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(NumericsError::NonPositiveScale(scale));
    }
    let mut out = QuadratureRule {
        nodes: Vec::with_capacity(rule.len()),
        weights: Vec::with_capacity(rule.len()),
        log_weights: Vec::with_capacity(rule.len()),
    };
    adapt_into(rule, center, scale, &mut out.nodes, &mut out.log_weights);
    out.weights
        .extend(out.log_weights.iter().map(|lw| lw.exp()));
    Ok(out)
}

/// Allocation-free core of [`adapt_rule`]: fills adapted nodes and log weights.
#[inline]
pub(crate) fn adapt_into(
    rule: &QuadratureRule,
    center: f64,
    scale: f64,
    nodes: &mut Vec<f64>,
    log_weights: &mut Vec<f64>,
) {
    nodes.clear();
    log_weights.clear();
    let log_scale = scale.ln();
    for (&z, &lw) in rule.nodes.iter().zip(&rule.log_weights) {
        let moved = center + scale * z;
        nodes.push(moved);
        log_weights.push(lw + log_scale + log_norm_pdf(moved) - log_norm_pdf(z));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn double_factorial_moment(power: u32) -> f64 {
        if power % 2 == 1 {
            return 0.0;
        }
        (1..power).step_by(2).map(f64::from).product()
    }

    #[test]
    fn small_rules_are_exact() {
        let one = gauss_hermite(1).unwrap();
        assert_eq!(one.nodes, vec![0.0]);
        assert_eq!(one.weights, vec![1.0]);
        let two = gauss_hermite(2).unwrap();
        assert!((two.nodes[0] + 1.0).abs() < 1e-14 && (two.nodes[1] - 1.0).abs() < 1e-14);
        assert!((two.weights[0] - 0.5).abs() < 1e-14 && (two.weights[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn out_of_range_counts_rejected() {
        assert!(gauss_hermite(0).is_err());
        assert!(gauss_hermite(201).is_err());
        assert!(gauss_hermite(200).is_ok());
    }

    #[test]
    fn hundred_point_rule_matches_moments() {
        let rule = gauss_hermite(100).unwrap();
        let total: f64 = rule.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(rule.weights.iter().all(|&w| w > 0.0));
        let tenth = rule.integrate(|x| x.powi(10));
        assert!((tenth - 945.0).abs() / 945.0 < 1e-8);
        for power in 0..=20 {
            let exact = double_factorial_moment(power);
            let got = rule.integrate(|x| x.powi(power as i32));
            let err = if exact == 0.0 {
                got.abs()
            } else {
                ((got - exact) / exact).abs()
            };
            assert!(err < 1e-8, "power {power}: {got} vs {exact}");
        }
    }

    #[test]
    fn nodes_symmetric() {
        for m in [3, 10, 57, 200] {
            let rule = gauss_hermite(m).unwrap();
            for i in 0..m {
                assert_eq!(rule.nodes[i], -rule.nodes[m - 1 - i]);
            }
        }
    }

    #[test]
    fn adaptation_identity_and_normalization() {
        let rule = gauss_hermite(20).unwrap();
        let same = adapt_rule(&rule, 0.0, 1.0).unwrap();
        for (a, b) in same.nodes.iter().zip(&rule.nodes) {
            assert_eq!(a, b);
        }
        for (a, b) in same.weights.iter().zip(&rule.weights) {
            assert!((a - b).abs() < 1e-15);
        }
        let moved = adapt_rule(&rule, 0.5, 1.2).unwrap();
        assert!((moved.integrate(|_| 1.0) - 1.0).abs() < 1e-10);
        assert!(adapt_rule(&rule, 0.0, 0.0).is_err());
    }

    #[test]
    fn adapted_rule_handles_peaked_integrand() {
        // ∫ N(z; c, s²)-shaped bump against φ; dense unadapted rule as oracle.
        let (c, s) = (1.3, 0.02);
        let bump = |z: f64| (-0.5 * ((z - c) / s).powi(2)).exp();
        // A fixed rule of any allowed size is too coarse for s = 0.02, so the
        // oracle is composite Simpson on [c − 12s, c + 12s] against φ.
        let n = 20_000;
        let (a, b) = (c - 12.0 * s, c + 12.0 * s);
        let h = (b - a) / n as f64;
        let f = |z: f64| bump(z) * super::super::normal::norm_pdf(z);
        let mut simpson = f(a) + f(b);
        for i in 1..n {
            let z = a + h * i as f64;
            simpson += if i % 2 == 1 { 4.0 } else { 2.0 } * f(z);
        }
        simpson *= h / 3.0;
        let adapted = adapt_rule(&gauss_hermite(20).unwrap(), c, s).unwrap();
        let got = adapted.integrate(bump);
        assert!(
            ((got - simpson) / simpson).abs() < 1e-6,
            "{got} vs {simpson}"
        );
    }
}
