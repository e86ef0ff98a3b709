//! Relation-aware transformer decoding for point-cloud instance segmentation.

pub mod asam;
pub mod config;
pub mod contrastive;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod numerics;
pub mod rsa;
pub mod scene;
pub mod training;

pub use error::{Error, Result};
