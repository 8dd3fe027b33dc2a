//! Speech-driven gesture generation: a denoising diffusion model whose noise predictor
//! stacks AdaLN-modulated selective state-space (Mamba) blocks, conditioned on features
//! extracted from raw speech.

pub mod audio;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod condition;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod formats;
pub mod generate;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod params;
pub mod real;
pub mod ssm;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
