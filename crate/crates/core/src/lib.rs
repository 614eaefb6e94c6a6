//! Open-set semi-supervised learning with decoupled classifier and detector
//! heads, trained from scratch on dense features.
//!
//! Layout:
//! - [`nn`]: dense layers, exact backprop, SGD, cosine schedule, gradient checks
//! - [`model`]: shared encoder, projection heads, softmax classifier, one-vs-all detector
//! - [`losses`]: classification, detection, consistency and entropy objectives
//! - [`data`]: synthetic open-set benchmarks, augmentations, samplers, CSV I/O
//! - [`trainer`]: the training loop, its ablation switches and checkpoints
//! - [`eval`], [`ablation`], [`artifacts`], [`cli`]: metrics, grids, output files, CLI

#[cfg(test)]
macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {{
        let (a, b): (f64, f64) = ($a, $b);
        assert!((a - b).abs() <= $tol, "{} != {} (tol {})", a, b, $tol);
    }};
}

pub mod error;
pub mod nn;
pub mod model;
pub mod losses;
pub mod data;
pub mod eval;
pub mod trainer;
pub mod artifacts;
pub mod ablation;
pub mod config;
pub mod cli;

pub use error::{Error, Result};
