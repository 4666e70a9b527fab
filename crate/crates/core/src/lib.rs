//! Mask-classification segmentation at desk scale, with the rejected-by-all
//! outlier score and everything needed to train, fine-tune and evaluate it.
//!
//! Pipeline: [`data`] generates scenes, [`model`] maps features to region
//! probabilities and memberships, [`train`] fits them with [`losses`],
//! [`scoring`] turns per-pixel logits into outlier scores and [`eval`] ranks
//! them. [`cli`] wires the stages to files.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod par;
pub mod rng;
pub mod scoring;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
