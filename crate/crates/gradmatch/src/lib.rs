//! Dataset condensation by gradient matching.
//!
//! Synthesizes a small trainable image set whose induced parameter gradients
//! match those of a large real training set, then evaluates it by training
//! networks from scratch. Includes multi-level (intra + inter class)
//! matching, angle/magnitude distance functions, adaptive parameter-update
//! schedules, coreset baselines, and a config-driven experiment CLI.

pub mod autodiff;
pub mod matching;
pub mod models;
pub mod condenser;
pub mod data;
pub mod coreset;
pub mod error;
pub mod eval;
pub mod selftest;
pub mod tensor;

pub use autodiff::{grad, softmax_cross_entropy, Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
