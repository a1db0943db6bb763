//! Positive matching contrastive training with fairness evaluation.
//!
//! This crate holds the pure numerical part of the system: dense linear
//! algebra helpers, a synthetic biased-dataset generator, a small
//! feed-forward network with hand-written backpropagation, the training
//! objectives (positive matching contrastive loss, cross entropy, spectral
//! decoupling, gradient reversal, domain-aware labels), an SGD trainer and
//! the equality-of-opportunity fairness metrics.
//!
//! It is `no_std` (with `alloc`). File formats, the experiment harness and
//! the command line live in the companion `posmatch` crate.
#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` is used on purpose so that NaN is rejected along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod faireval;
pub mod losses;
pub mod model;
pub mod numkit;
pub mod training;

pub use error::{Error, Result};
pub use numkit::{Mat, Rng};
