//! Context-aware mixed logit estimation by stochastic variational inference.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Optimiser steps take explicit parameter ranges, often just one.
#![allow(clippy::single_range_in_vec_init)]

pub mod analysis;
pub mod artifact;
pub mod data;
pub mod error;
pub mod model;
pub mod network;
pub mod priors;
pub mod rng;
pub mod simulate;
pub mod transforms;
pub mod vi;

pub use error::{Error, Result};
