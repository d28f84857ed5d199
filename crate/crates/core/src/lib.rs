//! Semi-supervised semantic segmentation with dual mean-teacher students,
//! mismatch-guided pseudo-label selection and fixed class anchors.

pub mod anchors;
pub mod augment;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod rng;
pub mod selection;
pub mod tensor;
pub mod train;
