//! Lookup-table neural network layers.
//!
//! A lookup layer replaces each weight-activation multiplication of a
//! convolution by a read from a small learnable 2D table indexed by the
//! discretized weight and activation. This crate provides the training-time
//! layer with its gradient rules, the table construction, a minimal autodiff
//! engine to train networks built from it, a graph rewrite that folds the
//! layer's scaling, re-scaling and batch norm into per-channel tables so that
//! inference needs only lookups and additions, and an analytical energy and
//! latency model for the resulting networks.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod cost;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod lookup;
pub mod lut;
pub mod nn;
pub mod reparam;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
