//! Core of the MF² multilevel multimodal face model.
//!
//! Everything here is pure computation over `alloc`: a small reverse-mode
//! autograd engine, the encoders and Q-former alignment branches, the
//! decoupled side-adapter network used for fine-tuning, dataset curation and
//! caption prompting, and the recognition metrics. File formats, the CLI and
//! wall-clock timing live in the `mf2` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod annotation;
pub mod autograd;
pub mod data;
pub mod dfn;
pub mod encoders;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod qformer;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Matrix;
