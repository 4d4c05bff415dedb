//! Decoupled food-analysis pipeline: a visual classifier emits a class token,
//! a generative model expands it into structured knowledge, and the toolkit
//! measures both stages and how classification errors propagate.

pub mod gateway;
pub mod http;
pub mod limit;
pub mod math;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod sep;
pub mod vision;
