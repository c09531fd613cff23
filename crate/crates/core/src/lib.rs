//! Multi-expert low-light enhancement trained jointly with an object
//! detector, plus a learned per-image expert router.

pub mod config;
pub mod datakit;
pub mod detector;
pub mod dgrl;
pub mod enhance;
pub mod error;
pub mod esm;
pub mod evalkit;
pub mod nn;
pub mod pipeline;
pub mod primitives;

pub use error::{Error, Result};
pub use primitives::{ciou, iou, Annotation, BBox, Detection, Image, LossBreakdown};
