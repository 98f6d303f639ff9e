pub mod adapter;
pub mod autodiff;
pub mod error;
pub mod flops;
pub mod gating;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod theory;

pub use error::{Error, Result};
