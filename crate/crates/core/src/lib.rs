//! Censored-regression summaries of left-censored peak clusters and ridge
//! logistic diagnostic rules.

pub mod classifier;
pub mod data;
pub mod harness;
pub mod mixed;
pub mod numerics;
pub mod selection;
pub mod synth;
pub mod tobit;
pub mod variants;

// The guide's chapters compile and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/tobit.md")]
    mod tobit {}
    #[doc = include_str!("../../../book/src/mixed.md")]
    mod mixed {}
    #[doc = include_str!("../../../book/src/variants.md")]
    mod variants {}
    #[doc = include_str!("../../../book/src/classifier.md")]
    mod classifier {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/validation.md")]
    mod validation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
