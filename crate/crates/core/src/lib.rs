//! Longitudinal analysis of paired image sequences: ingest, segmentation,
//! registration and pixelwise difference testing.

pub mod ingest;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod registration;
pub mod segmentation;
pub mod stats;
pub mod render;
