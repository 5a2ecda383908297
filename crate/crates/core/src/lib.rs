//! Retinex-style low-light image enhancement: decomposition, dark-region
//! attention, a squeeze-excitation U-Net enhancer, reconstruction and
//! denoising, together with the losses, metrics and CPU training stack used
//! to fit them.

pub mod ablation;
pub mod archive;
pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod dark_region;
pub mod dataset;
pub mod decom;
pub mod enhancer;
pub mod error;
pub mod graph;
pub mod image_io;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod profile;
pub mod real;
pub mod reconstruction;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, Network, Stages, Variant};
pub use params::ParameterSet;
pub use real::Real;
pub use tensor::{Shape, Tensor};
