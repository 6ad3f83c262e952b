pub mod api;
pub mod autograd;
pub mod config;
pub mod data;
pub mod evaluation;
pub mod inference;
pub mod model;
pub mod nn;
pub mod rng;
pub mod run_manifest;
pub mod training;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
