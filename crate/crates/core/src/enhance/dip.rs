//! Differentiable image-processing filters configured by a 15-value vector.
//!
//! Layout of the vector:
//!
//! | slots  | meaning                          | legal range  | identity |
//! |--------|----------------------------------|--------------|----------|
//! | 0..3   | white-balance gains (R, G, B)    | [0.5, 2.0]   | 1        |
//! | 3      | gamma exponent (`x^gamma`)       | [0.3, 3.0]   | 1        |
//! | 4      | contrast blend                   | [-1.0, 1.0]  | 0        |
//! | 5..13  | tone-curve knot slopes           | [0.5, 2.0]   | uniform  |
//! | 13     | unsharp-mask strength            | [0.0, 2.0]   | 0        |
//! | 14     | reserved (defog), no-op          | [0.0, 1.0]   | any      |

use std::f64::consts::PI;

use amieod_autograd::{concat, kernels, sigmoid, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::primitives::Image;

pub const PARAM_LEN: usize = 15;
pub const TONE_KNOTS: usize = 8;

const WB: (f64, f64) = (0.5, 2.0);
const GAMMA: (f64, f64) = (0.3, 3.0);
const CONTRAST: (f64, f64) = (-1.0, 1.0);
const TONE: (f64, f64) = (0.5, 2.0);
const SHARPEN: (f64, f64) = (0.0, 2.0);
const RESERVED: (f64, f64) = (0.0, 1.0);

/// Legal interval of every slot.
pub const RANGES: [(f64, f64); PARAM_LEN] = [
    WB, WB, WB, GAMMA, CONTRAST, TONE, TONE, TONE, TONE, TONE, TONE, TONE, TONE, SHARPEN, RESERVED,
];

const LUMA: [f64; 3] = [0.27, 0.67, 0.06];
const SHARPEN_RADIUS: usize = 2;
const SHARPEN_SIGMA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DipStage {
    WhiteBalance,
    Gamma,
    Contrast,
    Tone,
    Sharpen,
}

pub const DEFAULT_ORDER: [DipStage; 5] = [
    DipStage::WhiteBalance,
    DipStage::Gamma,
    DipStage::Contrast,
    DipStage::Tone,
    DipStage::Sharpen,
];

/// Range-mapped filter parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector15 {
    pub values: [f64; PARAM_LEN],
}

impl ParamVector15 {
    pub fn new(values: [f64; PARAM_LEN]) -> Result<Self> {
        let p = Self { values };
        p.validate()?;
        Ok(p)
    }

    /// Parameters under which every filter is the identity.
    pub fn identity() -> Self {
        let mut values = [0.0; PARAM_LEN];
        values[0..3].fill(1.0);
        values[3] = 1.0;
        values[4] = 0.0;
        values[5..13].fill(1.0);
        values[13] = 0.0;
        values[14] = 0.0;
        Self { values }
    }

    /// Maps unconstrained network outputs into the legal ranges.
    pub fn from_raw(raw: &[f64]) -> Result<Self> {
        if raw.len() != PARAM_LEN {
            return Err(Error::invalid(format!(
                "parameter vector needs {PARAM_LEN} values, got {}",
                raw.len()
            )));
        }
        let mut values = [0.0; PARAM_LEN];
        for (i, v) in values.iter_mut().enumerate() {
            let (lo, hi) = RANGES[i];
            *v = lo + (hi - lo) * sigmoid(raw[i]);
        }
        Ok(Self { values })
    }

    pub fn validate(&self) -> Result<()> {
        for (i, (&v, &(lo, hi))) in self.values.iter().zip(RANGES.iter()).enumerate() {
            if !(lo..=hi).contains(&v) {
                return Err(Error::invalid(format!(
                    "DIP parameter {i} = {v} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn wb_gains(&self) -> [f64; 3] {
        [self.values[0], self.values[1], self.values[2]]
    }

    pub fn gamma(&self) -> f64 {
        self.values[3]
    }

    pub fn contrast(&self) -> f64 {
        self.values[4]
    }

    pub fn tone_knots(&self) -> &[f64] {
        &self.values[5..13]
    }

    pub fn sharpen(&self) -> f64 {
        self.values[13]
    }

    pub fn reserved(&self) -> f64 {
        self.values[14]
    }

    pub fn with(mut self, slot: usize, value: f64) -> Self {
        self.values[slot] = value;
        self
    }
}

/// Unconstrained value that [`ParamVector15::from_raw`] maps to `value`.
pub fn raw_for(slot: usize, value: f64) -> f64 {
    let (lo, hi) = RANGES[slot];
    let p = ((value - lo) / (hi - lo)).clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// Differentiable range mapping of `raw: [N, 15]`.
pub fn map_raw<'t>(raw: Var<'t>) -> Var<'t> {
    let tape = raw.tape();
    let lo = tape.constant(Tensor::new(
        [1, PARAM_LEN],
        RANGES.iter().map(|r| r.0).collect(),
    ));
    let span = tape.constant(Tensor::new(
        [1, PARAM_LEN],
        RANGES.iter().map(|r| r.1 - r.0).collect(),
    ));
    raw.sigmoid().mul(span).add(lo)
}

/// `x * gains`, gains `[N, 3]`.
pub fn white_balance<'t>(x: Var<'t>, gains: Var<'t>) -> Var<'t> {
    let n = gains.shape()[0];
    x.mul(gains.reshape(&[n, 3, 1, 1]))
}

/// `x^gamma` per image, gamma `[N, 1]`; zero pixels stay zero.
pub fn gamma<'t>(x: Var<'t>, g: Var<'t>) -> Var<'t> {
    let n = g.shape()[0];
    let tape = x.tape();
    let xv = x.value();
    let mask = tape.constant(xv.map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
    let fill = tape.constant(xv.map(|v| if v > 0.0 { 0.0 } else { 1.0 }));
    let safe = x.mul(mask).add(fill);
    safe.ln().mul(g.reshape(&[n, 1, 1, 1])).exp().mul(mask)
}

/// Luminance-driven S-curve blended in by `c: [N, 1]`; `c = 0` is the identity.
pub fn contrast<'t>(x: Var<'t>, c: Var<'t>) -> Var<'t> {
    let n = c.shape()[0];
    let tape = x.tape();
    let weights = tape.constant(Tensor::new([1, 3, 1, 1], LUMA.to_vec()));
    let lum = x.mul(weights).sum_axes(&[1]).clamp(0.0, 1.0);
    let curved = lum.mul_scalar(PI).cos().mul_scalar(-0.5).add_scalar(0.5);
    let enhanced = x.div(lum.add_scalar(1e-6)).mul(curved);
    x.add(enhanced.sub(x).mul(c.reshape(&[n, 1, 1, 1])))
}

/// Piecewise-linear tone curve with `knots: [N, 8]` segment slopes,
/// normalized so the curve maps 1 to 1.
pub fn tone<'t>(x: Var<'t>, knots: Var<'t>) -> Var<'t> {
    let n = knots.shape()[0];
    let seg = 1.0 / TONE_KNOTS as f64;
    let mut total: Option<Var<'t>> = None;
    for i in 0..TONE_KNOTS {
        let piece = x.add_scalar(-(i as f64) * seg).clamp(0.0, seg);
        let t = knots.narrow(1, i, 1).reshape(&[n, 1, 1, 1]);
        let term = piece.mul(t);
        total = Some(match total {
            Some(acc) => acc.add(term),
            None => term,
        });
    }
    let norm = knots.sum_axes(&[1]).mul_scalar(seg).reshape(&[n, 1, 1, 1]);
    total.expect("at least one knot").div(norm)
}

fn gaussian_kernel() -> Tensor {
    let k = 2 * SHARPEN_RADIUS + 1;
    let taps: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - SHARPEN_RADIUS as f64;
            (-d * d / (2.0 * SHARPEN_SIGMA * SHARPEN_SIGMA)).exp()
        })
        .collect();
    let mut w = Tensor::zeros([3, 3, k, k]);
    for c in 0..3 {
        for i in 0..k {
            for j in 0..k {
                w.data_mut()[((c * 3 + c) * k + i) * k + j] = taps[i] * taps[j];
            }
        }
    }
    w
}

/// Unsharp mask `x + s * (x - blur(x))`, strength `s: [N, 1]`. The blur is
/// renormalized at the borders.
pub fn sharpen<'t>(x: Var<'t>, s: Var<'t>) -> Var<'t> {
    let n = s.shape()[0];
    let tape = x.tape();
    let shape = x.shape();
    let kernel = gaussian_kernel();
    let ones = Tensor::ones([1, 3, shape[2], shape[3]]);
    let norm = tape.constant(kernels::conv2d(&ones, &kernel, 1, SHARPEN_RADIUS));
    let blur = x.conv2d(tape.constant(kernel), 1, SHARPEN_RADIUS).div(norm);
    x.add(x.sub(blur).mul(s.reshape(&[n, 1, 1, 1])))
}

/// Applies the filters in `order` with mapped parameters `p: [N, 15]`, then
/// clamps to `[0, 1]`.
pub fn dip_forward<'t>(x: Var<'t>, p: Var<'t>, order: &[DipStage]) -> Var<'t> {
    let mut y = x;
    for stage in order {
        y = match stage {
            DipStage::WhiteBalance => white_balance(y, p.narrow(1, 0, 3)),
            DipStage::Gamma => gamma(y, p.narrow(1, 3, 1)),
            DipStage::Contrast => contrast(y, p.narrow(1, 4, 1)),
            DipStage::Tone => tone(y, p.narrow(1, 5, TONE_KNOTS)),
            DipStage::Sharpen => sharpen(y, p.narrow(1, 13, 1)),
        };
    }
    y.clamp(0.0, 1.0)
}

/// Applies validated parameters to one image in the default filter order.
pub fn dip_apply(image: &Image, p: &ParamVector15) -> Result<Image> {
    dip_apply_ordered(image, p, &DEFAULT_ORDER)
}

pub fn dip_apply_ordered(image: &Image, p: &ParamVector15, order: &[DipStage]) -> Result<Image> {
    p.validate()?;
    let tape = Tape::new();
    let x = tape.constant(image.batched());
    let pv = tape.constant(Tensor::new([1, PARAM_LEN], p.values.to_vec()));
    let y = dip_forward(x, pv, order);
    let t = (*y.value()).clone();
    Image::from_tensor_clamped(t.reshape([3, image.height(), image.width()]))
}

/// Stacks per-image parameter vectors into a `[N, 15]` constant.
pub fn params_constant<'t>(tape: &'t Tape, params: &[ParamVector15]) -> Var<'t> {
    let rows: Vec<Var<'t>> = params
        .iter()
        .map(|p| tape.constant(Tensor::new([1, PARAM_LEN], p.values.to_vec())))
        .collect();
    concat(&rows, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: f64) -> Image {
        Image::filled(32, 32, v).unwrap()
    }

    #[test]
    fn identity_parameters_are_identity() {
        let image = Image::from_fn(32, 34, |c, y, x| {
            ((c * 5 + y * 7 + x * 3) % 17) as f64 / 16.0
        })
        .unwrap();
        let out = dip_apply(&image, &ParamVector15::identity()).unwrap();
        for (a, b) in out.tensor().data().iter().zip(image.tensor().data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn gamma_fixture() {
        let p = ParamVector15::identity().with(3, 2.0);
        let out = dip_apply(&img(0.25), &p).unwrap();
        assert!(out
            .tensor()
            .data()
            .iter()
            .all(|v| (v - 0.0625).abs() < 1e-12));
    }

    #[test]
    fn white_balance_fixture() {
        let p = ParamVector15::identity().with(0, 2.0);
        let out = dip_apply(&img(0.3), &p).unwrap();
        assert!((out.get(0, 5, 5) - 0.6).abs() < 1e-12);
        assert!((out.get(1, 5, 5) - 0.3).abs() < 1e-12);
        assert!((out.get(2, 5, 5) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_parameters_are_rejected() {
        let p = ParamVector15::identity().with(3, 3.5);
        assert!(matches!(
            dip_apply(&img(0.3), &p),
            Err(Error::InvalidArgument(_))
        ));
        assert!(ParamVector15::new(p.values).is_err());
    }

    #[test]
    fn raw_zero_maps_to_midpoints() {
        let p = ParamVector15::from_raw(&[0.0; PARAM_LEN]).unwrap();
        assert!((p.gamma() - 1.65).abs() < 1e-12);
        for (v, (lo, hi)) in p.values.iter().zip(RANGES) {
            assert!((v - (lo + hi) / 2.0).abs() < 1e-12);
        }
        assert!(ParamVector15::from_raw(&[0.0; 14]).is_err());
    }

    #[test]
    fn raw_for_inverts_the_mapping() {
        let id = ParamVector15::identity();
        for slot in 0..14 {
            let raw = raw_for(slot, id.values[slot]);
            let (lo, hi) = RANGES[slot];
            let back = lo + (hi - lo) * sigmoid(raw);
            if id.values[slot] > lo {
                assert!((back - id.values[slot]).abs() < 1e-9, "slot {slot}");
            }
        }
    }

    #[test]
    fn sharpen_leaves_flat_images_unchanged() {
        let p = ParamVector15::identity().with(13, 2.0);
        let out = dip_apply(&img(0.4), &p).unwrap();
        assert!(out.tensor().data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }
}
