//! Single-scale anchor-based detector.
//!
//! A stack of stride-2 conv-BN-ReLU blocks reduces the input by the grid
//! stride and a 1×1 head predicts, per anchor and cell, four box offsets,
//! one objectness logit and one logit per class.

mod decode;
mod loss;

use amieod_autograd::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use decode::{decode, nms};
pub use loss::{assign, detection_loss, image_loss, Assignment, LossTerms};

use crate::error::{Error, Result};
use crate::nn::layers::{batch_norm, check_finite, conv, init_bn, init_conv};
use crate::nn::{Mode, Net, ParamSet};
use crate::primitives::Image;

/// Initial objectness bias: a low prior since most cells are background.
const OBJ_PRIOR_LOGIT: f64 = -3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub box_weight: f64,
    pub obj_weight: f64,
    pub cls_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            box_weight: 0.05,
            obj_weight: 1.0,
            cls_weight: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub num_classes: usize,
    /// Anchor `(w, h)` pairs in input pixels.
    pub anchors: Vec<[f64; 2]>,
    pub grid_stride: usize,
    pub backbone_width: usize,
    pub loss_weights: LossWeights,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            anchors: vec![[24.0, 24.0], [40.0, 40.0], [60.0, 60.0]],
            grid_stride: 16,
            backbone_width: 32,
            loss_weights: LossWeights::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::invalid("detector needs at least one class"));
        }
        if self.anchors.is_empty() {
            return Err(Error::invalid("detector needs at least one anchor"));
        }
        if self
            .anchors
            .iter()
            .any(|a| !(a[0] > 0.0 && a[1] > 0.0 && a[0].is_finite() && a[1].is_finite()))
        {
            return Err(Error::invalid("anchor sizes must be positive"));
        }
        if self.grid_stride < 2 || !self.grid_stride.is_power_of_two() {
            return Err(Error::invalid(format!(
                "grid stride {} must be a power of two >= 2",
                self.grid_stride
            )));
        }
        if self.backbone_width == 0 {
            return Err(Error::invalid("backbone width must be positive"));
        }
        let w = self.loss_weights;
        if [w.box_weight, w.obj_weight, w.cls_weight]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return Err(Error::invalid("loss weights must be nonnegative"));
        }
        Ok(())
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// Values predicted per anchor and cell.
    pub fn fields(&self) -> usize {
        5 + self.num_classes
    }

    pub fn num_blocks(&self) -> usize {
        self.grid_stride.trailing_zeros() as usize
    }

    /// Output widths of the downsampling blocks, widening toward the head.
    pub fn block_widths(&self) -> Vec<usize> {
        let n = self.num_blocks();
        (0..n)
            .map(|i| {
                let shift = (n as isize - 2 - i as isize).max(0) as u32;
                (self.backbone_width >> shift).max(4)
            })
            .collect()
    }

    /// Multiplies every anchor by `factor`.
    pub fn scale_anchors(&mut self, factor: f64) {
        for a in &mut self.anchors {
            a[0] *= factor;
            a[1] *= factor;
        }
    }
}

/// Head output for one image: `[anchors, 5 + classes, grid_h, grid_w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPredictions {
    pub data: Tensor,
    pub stride: usize,
}

impl RawPredictions {
    pub fn grid(&self) -> (usize, usize) {
        (self.data.dim(2), self.data.dim(3))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    pub params: ParamSet,
    pub buffers: ParamSet,
}

impl Detector {
    pub fn new(config: DetectorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        let mut in_ch = 3;
        for (i, w) in config.block_widths().into_iter().enumerate() {
            init_conv(
                &mut params,
                &format!("block{i}.conv"),
                in_ch,
                w,
                3,
                false,
                2f64.sqrt(),
                rng,
            );
            init_bn(&mut params, &mut buffers, &format!("block{i}.bn"), w);
            in_ch = w;
        }
        let out = config.num_anchors() * config.fields();
        init_conv(&mut params, "head", in_ch, out, 1, true, 0.1, rng);
        let bias = params.get_mut("head.bias").expect("head bias");
        for a in 0..config.num_anchors() {
            bias.data_mut()[a * config.fields() + 4] = OBJ_PRIOR_LOGIT;
        }
        Ok(Self {
            config,
            params,
            buffers,
        })
    }

    pub fn bind<'t, 'p>(&'p self, tape: &'t Tape, train: bool) -> Net<'t, 'p> {
        let mode = if train { Mode::Train } else { Mode::Eval };
        Net::bind(tape, &self.params, &self.buffers, train, mode)
    }

    /// `x: [N, 3, H, W]` → `[N, anchors * (5 + classes), H / s, W / s]`.
    pub fn forward<'t>(&self, net: &Net<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let s = self.config.grid_stride;
        if shape[2] % s != 0 || shape[3] % s != 0 {
            return Err(Error::invalid(format!(
                "input {}x{} not divisible by stride {s}; letterbox first",
                shape[2], shape[3]
            )));
        }
        let mut h = x;
        for i in 0..self.config.num_blocks() {
            h = conv(net, &format!("block{i}.conv"), h, 2, 1);
            h = batch_norm(net, &format!("block{i}.bn"), h).relu();
            check_finite(h, &format!("detector.block{i}"))?;
        }
        let out = conv(net, "head", h, 1, 0);
        check_finite(out, "detector.head")?;
        Ok(out)
    }
}

/// Inference forward pass on one image.
pub fn detect(image: &Image, detector: &Detector) -> Result<RawPredictions> {
    let tape = Tape::new();
    let net = detector.bind(&tape, false);
    let out = detector.forward(&net, tape.constant(image.batched()))?;
    let shape = out.shape();
    let cfg = &detector.config;
    let data =
        (*out.value())
            .clone()
            .reshape([cfg.num_anchors(), cfg.fields(), shape[2], shape[3]]);
    Ok(RawPredictions {
        data,
        stride: cfg.grid_stride,
    })
}
