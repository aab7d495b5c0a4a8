//! Detection of AI-generated images by fusing frozen semantic embeddings
//! with reconstruction-residual artifact features.
//!
//! The pipeline: build a [`manifest::DatasetManifest`], train a
//! [`model::Detector`] with [`training::train_detector`], then score images
//! and produce reports with [`evaluation`] and [`freq`].

pub mod ablation;
pub mod artifact;
pub mod augment;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod freq;
pub mod fusion;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod raster;
pub mod semantic;
pub mod toy;
pub mod training;
pub mod weights;

pub use error::{Error, Result};
pub use model::{load_checkpoint, save_checkpoint, Detector, Scorer};
pub use raster::Image;
pub use training::{train_detector, TrainConfig};
