#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod frontend;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use config::{Preset, RunConfig};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::Tensor;
