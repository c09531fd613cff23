use amieod_autograd::Tensor;

use crate::error::{Error, Result};

/// Smallest accepted height or width.
pub const MIN_SIDE: usize = 32;

/// A normalized RGB raster stored channel-major as `[3, H, W]` with every
/// value finite and inside `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    data: Tensor,
}

impl Image {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 3 || data.dim(0) != 3 {
            return Err(Error::invalid(format!(
                "image tensor must be [3, H, W], got {:?}",
                data.shape()
            )));
        }
        if data.dim(1) < MIN_SIDE || data.dim(2) < MIN_SIDE {
            return Err(Error::invalid(format!(
                "image is {}x{}, both sides must be at least {MIN_SIDE}",
                data.dim(2),
                data.dim(1)
            )));
        }
        if let Some(v) = data.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "image value {v} is outside [0, 1] or not finite"
            )));
        }
        Ok(Self { data })
    }

    /// Builds an image from interleaved or planar values via a closure
    /// `f(channel, y, x)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let t = Tensor::from_fn([3, height, width], |i| {
            let c = i / (height * width);
            let r = i % (height * width);
            f(c, r / width, r % width)
        });
        Self::new(t)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Tensor::full([3, height, width], value))
    }

    /// Clamps the values into `[0, 1]` before validating shape; rejects
    /// non-finite input.
    pub fn from_tensor_clamped(data: Tensor) -> Result<Self> {
        if !data.all_finite() {
            return Err(Error::numerical("image", "non-finite pixel value"));
        }
        Self::new(data.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn height(&self) -> usize {
        self.data.dim(1)
    }

    pub fn width(&self) -> usize {
        self.data.dim(2)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// Adds a leading batch axis: `[1, 3, H, W]`.
    pub fn batched(&self) -> Tensor {
        self.data
            .clone()
            .reshape([1, 3, self.height(), self.width()])
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.sum() / self.data.numel() as f64
    }

    /// Splits a `[N, 3, H, W]` batch into images.
    pub fn unbatch(batch: &Tensor) -> Result<Vec<Image>> {
        if batch.rank() != 4 {
            return Err(Error::invalid("expected a [N, 3, H, W] batch"));
        }
        (0..batch.dim(0))
            .map(|i| {
                let t = batch.narrow(0, i, 1);
                let shape = t.shape()[1..].to_vec();
                Image::from_tensor_clamped(t.reshape(shape))
            })
            .collect()
    }

    /// Stacks same-sized images into a `[N, 3, H, W]` batch.
    pub fn stack(images: &[&Image]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero images"))?;
        if images
            .iter()
            .any(|im| im.height() != first.height() || im.width() != first.width())
        {
            return Err(Error::invalid("images in a batch must share one size"));
        }
        let parts: Vec<Tensor> = images.iter().map(|im| im.batched()).collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::concat(&refs, 0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(Image::new(Tensor::zeros([1, 32, 32])).is_err());
        assert!(Image::new(Tensor::zeros([3, 16, 32])).is_err());
        assert!(Image::new(Tensor::full([3, 32, 32], 1.5)).is_err());
        assert!(Image::new(Tensor::full([3, 32, 32], f64::NAN)).is_err());
        assert!(Image::new(Tensor::full([3, 32, 40], 0.5)).is_ok());
    }

    #[test]
    fn stack_and_unbatch_round_trip() {
        let a = Image::filled(32, 36, 0.25).unwrap();
        let b = Image::from_fn(32, 36, |c, y, x| (c + y + x) as f64 / 100.0).unwrap();
        let batch = Image::stack(&[&a, &b]).unwrap();
        assert_eq!(batch.shape(), &[2, 3, 32, 36]);
        let back = Image::unbatch(&batch).unwrap();
        assert_eq!(back, vec![a, b]);
    }
}
