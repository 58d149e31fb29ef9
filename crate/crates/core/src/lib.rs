//! Importance-weighted object detection evaluation.
//!
//! Annotations are scored by how often their category is mentioned in image
//! captions, spread over the image's objects by a heat kernel on a
//! proximity graph, and thresholded into a critical subset. Detectors are
//! then evaluated with the usual COCO protocol on that subset.

pub mod analysis;
pub mod cli;
pub mod datamodel;
pub mod error;
pub mod geometry;
pub mod importance;
pub mod metrics;
pub mod semantics;

pub use error::{Error, Result};
pub use geometry::BBox;
