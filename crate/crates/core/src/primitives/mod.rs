mod boxes;
mod image;

pub use boxes::{ciou, iou, Annotation, BBox, Detection, LossBreakdown};
pub use image::{Image, MIN_SIDE};
