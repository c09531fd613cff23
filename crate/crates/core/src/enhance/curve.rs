//! Illumination-normalizing curve enhancer shared by PIEM and JIEM.
//!
//! Two cascaded conv-BN-ReLU blocks feed a summed feature map into a
//! three-channel head. The sigmoid of the head output is added to the input
//! to estimate an illumination map `L = clamp(I + s, eps, 1)` and the
//! enhanced image is `clamp(I / L, 0, 1)`.

use amieod_autograd::{Tape, Var};
use rand::Rng;

use crate::error::Result;
use crate::nn::layers::{batch_norm, check_finite, conv, init_bn, init_conv};
use crate::nn::{Mode, Net, ParamSet};
use crate::primitives::Image;

/// Lower clamp of the estimated illumination map.
pub const ILLUMINATION_EPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CurveEnhancer {
    pub params: ParamSet,
    pub buffers: ParamSet,
    pub width: usize,
    /// Frozen enhancers are never handed to an optimizer.
    pub frozen: bool,
}

impl CurveEnhancer {
    pub fn new(width: usize, frozen: bool, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        init_conv(
            &mut params,
            "block1.conv",
            3,
            width,
            3,
            false,
            2f64.sqrt(),
            rng,
        );
        init_bn(&mut params, &mut buffers, "block1.bn", width);
        init_conv(
            &mut params,
            "block2.conv",
            width,
            width,
            3,
            false,
            2f64.sqrt(),
            rng,
        );
        init_bn(&mut params, &mut buffers, "block2.bn", width);
        init_conv(&mut params, "head", width, 3, 3, true, 0.1, rng);
        Self {
            params,
            buffers,
            width,
            frozen,
        }
    }

    /// Zeroes the head so that the residual is exactly `sigmoid(0) = 0.5`.
    pub fn zero_head(&mut self) {
        for name in ["head.weight", "head.bias"] {
            if let Some(t) = self.params.get_mut(name) {
                t.data_mut().fill(0.0);
            }
        }
    }

    /// A copy that can be trained, sharing the current weights.
    pub fn trainable_twin(&self) -> Self {
        Self {
            frozen: false,
            ..self.clone()
        }
    }

    pub fn bind<'t, 'p>(&'p self, tape: &'t Tape, train: bool) -> Net<'t, 'p> {
        let train = train && !self.frozen;
        let mode = if train { Mode::Train } else { Mode::Eval };
        Net::bind(tape, &self.params, &self.buffers, train, mode)
    }

    /// `x: [N, 3, H, W]` in `[0, 1]`.
    pub fn forward<'t>(&self, net: &Net<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let b1 = batch_norm(net, "block1.bn", conv(net, "block1.conv", x, 1, 1)).relu();
        check_finite(b1, "curve.block1")?;
        let b2 = batch_norm(net, "block2.bn", conv(net, "block2.conv", b1, 1, 1)).relu();
        check_finite(b2, "curve.block2")?;
        let residual = conv(net, "head", b1.add(b2), 1, 1);
        check_finite(residual, "curve.head")?;
        Ok(fuse(x, residual))
    }
}

/// `clamp(x / clamp(x + sigmoid(residual), eps, 1), 0, 1)`.
pub fn fuse<'t>(x: Var<'t>, residual: Var<'t>) -> Var<'t> {
    let illumination = x.add(residual.sigmoid()).clamp(ILLUMINATION_EPS, 1.0);
    x.div(illumination).clamp(0.0, 1.0)
}

/// Runs the enhancer in inference mode on one image.
pub fn curve_enhance(image: &Image, weights: &CurveEnhancer) -> Result<Image> {
    let tape = Tape::new();
    let net = weights.bind(&tape, false);
    let x = tape.constant(image.batched());
    let y = weights.forward(&net, x)?;
    let t = (*y.value()).clone();
    Image::from_tensor_clamped(t.reshape([3, image.height(), image.width()]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_head_enhancer() -> CurveEnhancer {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut e = CurveEnhancer::new(8, true, &mut rng);
        e.zero_head();
        e
    }

    #[test]
    fn zero_head_fixture() {
        let e = zero_head_enhancer();
        let out = curve_enhance(&Image::filled(32, 32, 0.2).unwrap(), &e).unwrap();
        // L = 0.2 + 0.5 = 0.7
        for v in out.tensor().data() {
            assert!((v - 0.2 / 0.7).abs() < 1e-12);
        }
        assert!((out.get(0, 0, 0) - 0.2857).abs() < 1e-4);
    }

    #[test]
    fn clamp_ceiling_and_zero_numerator() {
        let e = zero_head_enhancer();
        let ones = curve_enhance(&Image::filled(32, 32, 1.0).unwrap(), &e).unwrap();
        assert!(ones.tensor().data().iter().all(|&v| v == 1.0));
        let zeros = curve_enhance(&Image::filled(32, 32, 0.0).unwrap(), &e).unwrap();
        assert!(zeros.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = CurveEnhancer::new(4, false, &mut rng);
        let img =
            Image::from_fn(40, 33, |c, y, x| ((c * 7 + y * 3 + x) % 10) as f64 / 10.0).unwrap();
        let out = curve_enhance(&img, &e).unwrap();
        assert_eq!((out.height(), out.width()), (40, 33));
    }
}
