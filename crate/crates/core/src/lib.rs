//! Multi-resolution VLAD place descriptors.
//!
//! Images are turned into low-resolution pyramids, every level is encoded by
//! one shared convolutional encoder, and the features of all levels are
//! pooled into a single VLAD descriptor through a shared vocabulary. The
//! model is trained with a triplet loss on geo-tagged images and evaluated
//! with Recall@N under a metric localization radius.

pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod image;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod postproc;
pub mod pyramid;
pub mod retrieval;
pub mod tensor;
pub mod training;
pub mod vlad;

pub use crate::error::{Error, Result};
pub use crate::image::Image;
