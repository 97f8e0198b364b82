//! Core data model and non-neural pieces of the knee-radiograph pipeline.

pub mod domain;
pub mod error;
pub mod image;
pub mod ingest;
pub mod metrics;
pub mod phantom;

pub use domain::*;
pub use error::{CoreError, Result};
pub use image::Image;
