//! Synthetic motion-corruption engine for 3D MRI volumes, with exact
//! motion-score ground truth, soft-label encoding, leakage-free dataset
//! handling, evaluation metrics, and a small feature-based probe for
//! pretraining and QC transfer experiments.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod kspace;
pub mod labels;
pub mod metrics;
pub mod phantom;
pub mod probe;
pub mod seed;
pub mod toy;
pub mod volume;

pub use error::{Error, Result};
