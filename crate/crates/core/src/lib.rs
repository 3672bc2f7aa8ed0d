//! Situation-aware facial emotion recognition: geometric and deep face
//! features fused with background and place context.

pub mod backbone;
pub mod config;
pub mod context;
pub mod curation;
mod error;
pub mod explain;
pub mod fusion;
pub mod geometry;
pub mod label;
pub mod manifest;
pub mod mask;
pub mod raster;
pub mod training;

pub use config::{AugmentParams, BackboneKind, FillMode, PipelineConfig};
pub use error::{Error, Result};
pub use label::{EmotionLabel, NUM_CLASSES};
pub use manifest::{DatasetManifest, SampleRecord, Split};
pub use raster::Raster;
