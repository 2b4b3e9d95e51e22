//! Numeric kernels shared by the estimators.

mod normal;
mod optim;
mod quadrature;

pub(crate) use normal::trunc_mean_unchecked;
pub use normal::{
    log_norm_cdf, log_norm_pdf, mills_lower, norm_cdf, norm_pdf, norm_quantile,
    trunc_norm_mean_below, LN_SQRT_2PI,
};
pub use optim::{fd_gradient, maximize, maximize_smooth, OptimOptions, OptimResult};
pub(crate) use quadrature::adapt_into;
pub use quadrature::{adapt_rule, gauss_hermite, gauss_hermite_cached, QuadratureRule, MAX_POINTS};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("scale parameter must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("{0}")]
    Domain(String),
    #[error("objective is not finite at the starting point")]
    NonFiniteStart,
}
