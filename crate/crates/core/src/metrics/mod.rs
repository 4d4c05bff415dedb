//! Evaluation metrics for each pipeline stage.

pub mod classification;
pub mod detection;
pub mod text;
