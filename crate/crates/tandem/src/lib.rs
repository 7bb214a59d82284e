//! Semi-supervised image segmentation with a dual-student, single-teacher
//! network trio: a convolutional UNet and a windowed-transformer segmenter
//! teach each other on unlabeled images while an exponential-moving-average
//! teacher keeps the transformer student consistent under perturbation.

pub mod data;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod plot;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
