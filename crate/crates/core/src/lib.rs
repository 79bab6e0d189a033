//! Iterative multi-resolution alignment of polygon annotations to imagery.
//!
//! Misaligned annotations are corrected by a displacement field predicted by
//! small convolutional networks trained on synthetic perturbations of the
//! annotations themselves. Networks for 1/8, 1/4, 1/2 and full resolution are
//! applied in turn, and whole rounds of training and re-alignment can be
//! repeated using the previous round's output as the new training signal.

pub mod dataset;
pub mod deform;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod raster;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{AnnotationSet, DisplacementField, Extent, Point, Polygon};
pub use raster::{ImagePatch, RasterTriple, Scale};
