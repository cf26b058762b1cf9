//! Multi-sequence cardiac MRI pathology segmentation.
//!
//! The pipeline runs slice by slice: NIfTI volumes are cropped and
//! percentile-normalized ([`preprocess`]), multiplied by random warps and
//! quarter-turn rotations ([`augment`]), and split into five single-target
//! training blocks ([`blocks`]). Each block trains a shallow encoder-decoder
//! network ([`nn`], [`trainer`]); the scar and edema blocks average three
//! members. Predictions are thresholded and cleaned ([`inference`]), mapped
//! back to the five anatomical classes ([`decoder`]) and scored with Dice and
//! Jaccard ([`metrics`]). [`pipeline`] chains the stages on disk.

pub mod augment;
pub mod blocks;
pub mod decoder;
pub mod grid;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod synth;
pub mod trainer;
pub mod volume_io;

pub use grid::{Grid, Image, Mask};
pub use volume_io::Volume;
