//! Adaptive stochastic-gradient optimizers with block-diagonal
//! gradient-outer-product (GOP) matrix adaptation.
//!
//! The flat parameter vector is split into coordinate groups
//! ([`grouping::Partition`]); each group keeps a small dense second-moment
//! block and is preconditioned by `(V^{1/2} + δI)^{-1}`. Group size 1 recovers
//! the usual diagonal methods, a single group recovers full-matrix adaptation.
//!
//! Besides the optimizer the crate carries everything needed to run small
//! experiments end to end: a Jacobi eigensolver ([`linalg`]), spectrum
//! clipping toward SGD ([`clipping`]), a tiny MLP with manual backprop
//! ([`model`]), data sources ([`data`]), convergence diagnostics
//! ([`diagnostics`]) and a config-driven experiment runner ([`runner`]).

pub mod acceptance;
pub mod clipping;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod grouping;
pub mod linalg;
pub mod model;
pub mod optimizer;
pub mod runner;

pub use error::{Error, Result};
