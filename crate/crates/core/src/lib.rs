//! Tongue contour extraction from ultrasound frames.
//!
//! The pipeline: annotated contours become Gaussian heatmap masks
//! ([`contour`]), a U-Net or Dense U-Net ([`models`]) is trained against them
//! with Dice, weighted crossentropy or compound losses ([`losses`],
//! [`training`]), predicted heatmaps are thinned and splined back into
//! 100-point contours ([`postprocess`]) and scored with the mean sum of
//! distances ([`metrics`]).

pub mod contour;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod postprocess;
pub mod training;

pub use contour::{Contour, Heatmap, MaskConfig, Point};
pub use error::{Error, Result};
