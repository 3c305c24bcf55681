pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod cisp;
pub mod denoiser;
pub mod error;
pub mod humaneval;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod toy_data;
pub mod voxel;

pub use error::{Error, Result};
