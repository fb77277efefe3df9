//! Pale-shaped self-attention and the Pale Transformer backbone.
//!
//! A pale is an attention region made of `s_r` interlaced rows plus `s_c`
//! interlaced columns of a feature map, covering `s_r*w + s_c*h - s_r*s_c`
//! tokens. This crate implements the partition machinery, the attention
//! mechanism in its vanilla / sequential / parallel forms together with the
//! global, axial and cross-shaped baselines, the four-stage hierarchical
//! backbone, analytic multiply-add accounting cross-checked against
//! instrumented traces, and a brute-force oracle plus finite-difference
//! gradient checks for all of it.
//!
//! The crate is `no_std` (with `alloc`): everything here is pure compute.
//! File formats, dataset synthesis and the command-line harness live in the
//! companion `pale-cli` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod complexity;
pub mod gradcheck;
pub mod ops;
pub mod oracle;
pub mod partition;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trace;
pub mod verify;

pub use partition::{AttentionMask, IndexGroups, PartitionSpec};
pub use tape::{Tape, Var};
pub use tensor::{Real, Shape, Tensor};
pub use trace::FlopTrace;

use alloc::string::String;
use core::fmt;

/// Error type shared by every fallible operation in the crate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Tensor extents do not satisfy an operation's contract.
    ShapeMismatch { op: &'static str, detail: String },
    /// A non-shape precondition was violated (divisibility, head counts, ...).
    InvalidArgument { op: &'static str, detail: String },
    /// A softmax row or an attention group has no valid key left.
    FullyMasked { op: &'static str },
    /// A serialized checkpoint could not be decoded.
    Format(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Self::InvalidArgument { op, detail } => write!(f, "{op}: invalid argument: {detail}"),
            Self::FullyMasked { op } => write!(f, "{op}: fully masked row (no valid key)"),
            Self::Format(detail) => write!(f, "checkpoint format error: {detail}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
