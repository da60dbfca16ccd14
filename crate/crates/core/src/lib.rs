//! Multi-step temporal modeling for single-object tracking.
//!
//! The crate is layered bottom-up:
//!
//! * [`graph`], [`tensor`], [`params`], [`gradcheck`]: a small deterministic
//!   reverse-mode autodiff kernel over `f64` tensors.
//! * [`temporal`]: depth-wise correlation with a confidence-gated template
//!   memory and multi-template fusion.
//! * [`transformer`]: the encoder plus mutual-attention decoders that refine
//!   current and historical correlation maps.
//! * [`selftest`]: numerical checks shared by the command line and tests.
//! * [`tracker`]: backbone, head, post-processing, online tracking loop,
//!   toy trainer and checkpoint I/O.

pub mod bbox;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod nn;
pub mod params;
pub mod selftest;
pub mod temporal;
pub mod tensor;
pub mod tracker;
pub mod transformer;

pub use bbox::BBox;
pub use error::{Error, Result};
pub use graph::{Fault, Graph, Var};
pub use params::{ParamId, ParamStore, Parameter, RngSeed, Sgd};
pub use tensor::Tensor;
