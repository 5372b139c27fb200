//! Cross-domain object detection at desk scale: a tiny two-stage detector
//! trained on a labelled source domain and aligned to a weakly labelled
//! target domain through channel attention, adversarial domain classifiers
//! and instance-to-image label aggregation.
//!
//! The crate is `no_std` (with `alloc`); file formats and the command-line
//! driver live in the `sa3` crate.

#![no_std]

extern crate alloc;

pub mod ablation;
pub mod aiam;
pub mod cis;
pub mod detector;
pub mod error;
pub mod eval;
pub mod i2itm;
pub mod layers;
pub mod math;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Axis, Gradients, Tape, Tensor, Var};
