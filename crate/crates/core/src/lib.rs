//! Post-hoc pixelwise out-of-distribution detection for tiled segmentation
//! feature maps.
//!
//! The crate takes per-pixel encoder embeddings as input and covers
//! everything downstream of the encoder: a linear segmentation head,
//! shift-averaged aggregation over extended tiles, class-conditional Gaussian
//! calibration, Mahalanobis and confidence-based anomaly scores, standard and
//! adaptive per-class thresholds, and evaluation on an extended confusion
//! matrix that includes a joint OOD class.

pub mod calib;
pub mod error;
pub mod head;
pub mod maps;
pub mod metrics;
pub mod pipeline;
pub mod scores;
pub mod splitter;
pub mod synthgen;
pub mod tensorio;
pub mod thresholds;
pub mod tiles;

mod numeric;

pub use error::{Error, Result};
pub use maps::{ChannelMap, ClassSet, FeatureMap, LabelMap, LabeledPixels, LogitMap, ProbMap};
