//! Graph feature tuning for frozen point-cloud transformers.
//!
//! Everything here is pure computation over `alloc`: the tape autodiff in
//! [`numcore`], geometry in [`pointops`], the frozen encoder in
//! [`backbone`], the trainable adapters in [`gft`], task heads in
//! [`heads`], and the optimizer in [`optim`]. File formats, datasets and
//! the CLI live in the `gft-harness` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod backbone;
pub mod config;
pub mod error;
pub mod gft;
pub mod heads;
pub mod layers;
pub mod model;
pub mod numcore;
pub mod optim;
pub mod pointops;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::GftModel;
pub use numcore::{Graph, ParamStore, Real, Tensor, Var};
