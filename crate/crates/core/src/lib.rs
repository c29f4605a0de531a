//! Rotated preference optimization at desk scale.
//!
//! A small reverse-mode autodiff engine drives a toy decoder-only
//! transformer. Preference optimization (DPO) can train every weight, a
//! low-rank adapter, or a rotation adapter built from interleaved Givens
//! layers plus a per-neuron magnitude vector. Hyperspherical-energy
//! diagnostics compare checkpoints before and after alignment.

// `!(x > 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapters;
pub mod corpus;
pub mod energy;
pub mod error;
pub mod lm;
pub mod metrics;
pub mod prefopt;
pub mod store;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
