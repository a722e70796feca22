//! Layer-stack temperature scaling (LATES).
//!
//! Post-hoc calibration that trains a linear probe on every intermediate
//! layer of a classifier, stacks the probe logits next to the model's own
//! logits, and learns one non-negative temperature per layer by projected
//! SGD. Temperature scaling is the special case where every weight but the
//! last is zero.
//!
//! The crate is `no_std` (it needs `alloc`) and does no IO: binary formats
//! are encoded to and decoded from byte buffers, and every computation is a
//! pure function of its inputs and an explicit seed. File handling, JSON and
//! the command-line tool live in the `lates` crate.
//!
//! Modules:
//! - [`dataio`]: activation dumps, their binary codec, holdout splitting
//! - [`probes`]: per-layer linear probes and the probe-bundle codec
//! - [`stack`]: the logit stack, the LATES aggregator, temperature scaling
//! - [`metrics`]: ECE, NLL, Brier, accuracy, AUROC, relative gain
//! - [`stats`]: Wilcoxon signed-rank, one-way ANOVA, Holm correction
//! - [`theory`]: the oracle probability bound and the dominance experiment
//! - [`refnet`]: a small MLP and synthetic tasks that produce dumps end to end

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod dataio;
mod error;
pub mod matrix;
pub mod metrics;
pub mod numeric;
pub mod probes;
pub mod refnet;
pub mod stack;
pub mod stats;
pub mod theory;

pub use error::{Error, FormatError, Result};
pub use matrix::Matrix;
