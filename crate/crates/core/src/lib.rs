//! Texture synthesis conditioned on local co-occurrence statistics.
//!
//! The crate is organised around the data flow of the method:
//!
//! * [`cooc`] quantises colours into a [`cooc::Palette`], accumulates
//!   Gaussian-weighted co-occurrence matrices per pixel, downsamples them
//!   into a spatial [`cooc::CoocTensor`] and provides the differentiable
//!   co-occurrence loss.
//! * [`dataset`] samples crops from an exemplar and caches their tensors.
//! * [`nn`] and [`model`] hold a small convolution engine together with the
//!   fully convolutional generator and critic.
//! * [`training`] runs WGAN-GP with the co-occurrence consistency term.
//! * [`synthesis`] and [`evaluation`] cover inference-time tools.

pub mod config;
pub mod container;
pub mod cooc;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod imageio;
pub mod model;
pub mod nn;
pub mod procedural;
pub mod seed;
pub mod synthesis;
pub mod training;

pub use cooc::{
    CoocMatrix, CoocParams, CoocStats, CoocTensor, CoocVolume, Normalizer, Palette,
};
pub use error::{Error, Result};
pub use model::{Checkpoint, Critic, CriticConfig, Generator, GeneratorConfig};
