//! Standard normal density, distribution function and the truncated mean
//! used for censored cells.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::NumericsError;

/// `ln(sqrt(2π))`.
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Below this point `log_norm_cdf` switches to the asymptotic tail series.
const LOG_CDF_TAIL_CUTOFF: f64 = -37.0;

/// Standard normal density φ(x).
#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// `ln φ(x)`.
#[inline]
pub fn log_norm_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Standard normal distribution function Φ(x), via the complementary error
/// function so that both tails keep full relative precision.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// `ln Φ(x)`, finite for every finite argument.
///
/// Uses `ln(½ erfc(−x/√2))` on the bulk, `ln1p(−Φ(−x))` on the upper tail
/// and the Mills-ratio series `ln φ(x) − ln(−x) + ln(1 − 1/x² + 3/x⁴ − …)`
/// once `erfc` would underflow.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x > 5.0 {
        (-0.5 * libm::erfc(x * FRAC_1_SQRT_2)).ln_1p()
    } else if x >= LOG_CDF_TAIL_CUTOFF {
        (0.5 * libm::erfc(-x * FRAC_1_SQRT_2)).ln()
    } else {
        let x2 = x * x;
        let inv = 1.0 / x2;
        // 1 - 1/x² + 3/x⁴ - 15/x⁶ + 105/x⁸ - 945/x¹⁰
        let series = 1.0
            - inv * (1.0 - 3.0 * inv * (1.0 - 5.0 * inv * (1.0 - 7.0 * inv * (1.0 - 9.0 * inv))));
        log_norm_pdf(x) - (-x).ln() + series.ln()
    }
}

/// Inverse Mills ratio for the lower tail, `φ(x)/Φ(x)`.
///
/// This is `d/dx ln Φ(x)`.
#[inline]
pub fn mills_lower(x: f64) -> f64 {
    if x > -30.0 {
        norm_pdf(x) / norm_cdf(x)
    } else {
        (log_norm_pdf(x) - log_norm_cdf(x)).exp()
    }
}

/// Standard normal quantile Φ⁻¹(p) for `p ∈ (0, 1)`.
///
/// Acklam's rational approximation polished with two Newton steps on
/// [`norm_cdf`].
pub fn norm_quantile(p: f64) -> Result<f64, NumericsError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(NumericsError::Domain(format!(
            "quantile level {p} outside (0, 1)"
        )));
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    let p_low = 0.024_25;
    let mut x = if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    for _ in 0..2 {
        let density = norm_pdf(x);
        if density <= 0.0 {
            break;
        }
        x -= (norm_cdf(x) - p) / density;
    }
    Ok(x)
}

/// Mean of `X ~ N(mu, sigma²)` conditional on `X ≤ t`:
/// `mu − sigma·φ(z)/Φ(z)` with `z = (t − mu)/sigma`.
pub fn trunc_norm_mean_below(mu: f64, sigma: f64, t: f64) -> Result<f64, NumericsError> {
    if !(sigma > 0.0) {
        return Err(NumericsError::NonPositiveScale(sigma));
    }
    Ok(trunc_mean_unchecked(mu, sigma, t))
}

#[inline]
pub(crate) fn trunc_mean_unchecked(mu: f64, sigma: f64, t: f64) -> f64 {
    let z = (t - mu) / sigma;
    if z > 40.0 {
        return mu;
    }
    let shift = sigma * mills_lower(z);
    // For very negative z the Mills ratio is ≈ −z, so the difference loses
    // digits; clamp so the result stays strictly below the threshold.
    (mu - shift).min(t - f64::EPSILON * t.abs().max(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pdf_reference_values() {
        assert!((norm_pdf(0.0) - 0.398_942_280_4).abs() < 1e-10);
        assert_eq!(norm_pdf(-2.0), norm_pdf(2.0));
        assert!((norm_pdf(1.0) - 0.241_970_724_5).abs() < 1e-10);
    }

    #[test]
    fn cdf_reference_values() {
        assert_eq!(norm_cdf(0.0), 0.5);
        assert!((norm_cdf(1.959_964) - 0.975).abs() < 1e-6);
        let tail = norm_cdf(-40.0);
        assert!(tail >= 0.0);
        assert!(log_norm_cdf(-40.0).is_finite());
        for &x in &[0.1, 1.0, 3.3, 7.5, 12.0] {
            assert!((norm_cdf(x) + norm_cdf(-x) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn log_cdf_reference_values() {
        assert!((log_norm_cdf(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!((log_norm_cdf(5.0) - (-2.866_516e-7)).abs() < 1e-12);
        assert!((log_norm_cdf(-20.0) - (-203.917)).abs() < 0.01);
        assert!(log_norm_cdf(-1e4).is_finite());
    }

    #[test]
    fn log_cdf_is_continuous_across_branches() {
        for &cut in &[LOG_CDF_TAIL_CUTOFF, 5.0] {
            let below = log_norm_cdf(cut - 1e-9);
            let above = log_norm_cdf(cut + 1e-9);
            let slope = mills_lower(cut);
            let jump = (below - above).abs() - 2e-9 * slope;
            assert!(
                jump < 1e-10 * above.abs().max(1e-6),
                "{cut}: {below} vs {above}"
            );
        }
    }

    #[test]
    fn truncated_mean_reference_values() {
        let m = trunc_norm_mean_below(0.0, 1.0, 0.0).unwrap();
        assert!((m + 0.797_884_560_8).abs() < 1e-10);
        let m = trunc_norm_mean_below(3.0, 2.0, 1e9).unwrap();
        assert!((m - 3.0).abs() < 1e-9);
        assert!(trunc_norm_mean_below(0.0, 0.0, 1.0).is_err());
        assert!(trunc_norm_mean_below(0.0, -1.0, 1.0).is_err());
        // deep tail stays below the threshold
        let m = trunc_norm_mean_below(50.0, 1.0, 0.0).unwrap();
        assert!(m < 0.0);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &p in &[1e-12, 0.001, 0.02, 0.3, 0.5, 0.7, 0.975, 0.999_999] {
            let x = norm_quantile(p).unwrap();
            assert!(((norm_cdf(x) - p) / p).abs() < 1e-12, "{p}");
        }
        assert!(norm_quantile(0.0).is_err());
    }
}
