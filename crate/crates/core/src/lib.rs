
pub mod adapter;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
mod kernels;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod report;
pub mod synth;
pub mod trainer;
pub mod unet;
pub use error::{Error, Result};
