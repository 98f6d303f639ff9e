//! Three-stage training, evaluation strategies and experiment orchestration.

pub mod config;
pub mod optim;
pub mod train;
pub mod data;
pub mod eval;
pub mod run;
