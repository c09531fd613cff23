use amieod_autograd::{kernels, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::primitives::{Annotation, BBox, Detection, Image};

/// Grey used for letterbox borders.
pub const PAD_VALUE: f64 = 0.5;

/// Maps coordinates between an original image and its letterboxed copy:
/// `x' = x * scale_x + pad_x`. The two scales differ only by the rounding
/// of the resized side lengths.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LetterboxTransform {
    pub scale_x: f64,
    pub scale_y: f64,
    pub pad_x: usize,
    pub pad_y: usize,
    pub orig_width: usize,
    pub orig_height: usize,
    pub target: usize,
}

impl LetterboxTransform {
    pub fn is_identity(&self) -> bool {
        self.scale_x == 1.0 && self.scale_y == 1.0 && self.pad_x == 0 && self.pad_y == 0
    }

    pub fn forward_box(&self, b: &BBox) -> BBox {
        BBox {
            x1: b.x1 * self.scale_x + self.pad_x as f64,
            y1: b.y1 * self.scale_y + self.pad_y as f64,
            x2: b.x2 * self.scale_x + self.pad_x as f64,
            y2: b.y2 * self.scale_y + self.pad_y as f64,
        }
    }

    pub fn inverse_box(&self, b: &BBox) -> BBox {
        BBox {
            x1: (b.x1 - self.pad_x as f64) / self.scale_x,
            y1: (b.y1 - self.pad_y as f64) / self.scale_y,
            x2: (b.x2 - self.pad_x as f64) / self.scale_x,
            y2: (b.y2 - self.pad_y as f64) / self.scale_y,
        }
    }

    pub fn forward_annotation(&self, a: &Annotation) -> Annotation {
        Annotation {
            bbox: self.forward_box(&a.bbox),
            class_id: a.class_id,
        }
    }

    /// Maps a detection back and clips it to the original frame; `None` if
    /// it lies entirely in the padding.
    pub fn inverse_detection(&self, d: &Detection) -> Option<Detection> {
        let bbox = self
            .inverse_box(&d.bbox)
            .clip(self.orig_width as f64, self.orig_height as f64)?;
        Some(Detection { bbox, ..*d })
    }
}

/// Aspect-preserving resize onto a `target × target` canvas with symmetric
/// grey padding.
pub fn letterbox(image: &Image, target: usize) -> Result<(Image, LetterboxTransform)> {
    if target < crate::primitives::MIN_SIDE {
        return Err(Error::invalid(format!(
            "letterbox target {target} too small"
        )));
    }
    let (h, w) = (image.height(), image.width());
    let scale = (target as f64 / w as f64).min(target as f64 / h as f64);
    let new_w = ((w as f64 * scale).round() as usize).clamp(1, target);
    let new_h = ((h as f64 * scale).round() as usize).clamp(1, target);
    let pad_x = (target - new_w) / 2;
    let pad_y = (target - new_h) / 2;
    let transform = LetterboxTransform {
        scale_x: new_w as f64 / w as f64,
        scale_y: new_h as f64 / h as f64,
        pad_x,
        pad_y,
        orig_width: w,
        orig_height: h,
        target,
    };
    if transform.is_identity() {
        return Ok((image.clone(), transform));
    }
    let resized = kernels::resize_bilinear(&image.batched(), new_h, new_w);
    let src = resized.data();
    let mut out = Tensor::full([3, target, target], PAD_VALUE);
    let dst = out.data_mut();
    for c in 0..3 {
        for y in 0..new_h {
            let from = (c * new_h + y) * new_w;
            let to = (c * target + y + pad_y) * target + pad_x;
            dst[to..to + new_w].copy_from_slice(&src[from..from + new_w]);
        }
    }
    Ok((Image::from_tensor_clamped(out)?, transform))
}

/// Mirrors the image and its boxes left to right.
pub fn hflip(image: &Image, annotations: &[Annotation]) -> Result<(Image, Vec<Annotation>)> {
    let (h, w) = (image.height(), image.width());
    let src = image.tensor().data();
    let t = Tensor::from_fn([3, h, w], |i| {
        let x = i % w;
        src[i - x + (w - 1 - x)]
    });
    let wf = w as f64;
    let anns = annotations
        .iter()
        .map(|a| Annotation {
            bbox: BBox {
                x1: wf - a.bbox.x2,
                y1: a.bbox.y1,
                x2: wf - a.bbox.x1,
                y2: a.bbox.y2,
            },
            class_id: a.class_id,
        })
        .collect();
    Ok((Image::new(t)?, anns))
}
