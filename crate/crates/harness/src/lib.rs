//! Files, datasets, training loops and the `gft` command line around
//! `gft-core`.

pub mod attention;
pub mod augment;
pub mod checkpoint;
pub mod cloud;
pub mod config;
pub mod error;
pub mod fewshot;
pub mod manifest;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
