//! Pig-pen instance segmentation toolkit: ellipse geometry, label rendering,
//! pixel embeddings trained with a discriminative loss, HDBSCAN clustering,
//! panoptic evaluation and a synthetic scene generator.

pub mod clustering;
pub mod config;
pub mod demo;
pub mod embedding;
pub mod error;
pub mod geometry;
pub mod label;
pub mod labelgen;
pub mod metrics;
pub mod pipeline;
pub mod scenegen;

pub use error::{Error, FitError, Result};
pub use geometry::{Ellipse, HeadSign, RasterGrid};
pub use label::{LabelImage, LabelKind};
pub use config::PipelineConfig;
pub use pipeline::Mode;
