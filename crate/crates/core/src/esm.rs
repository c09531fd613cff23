//! Expert selection: a residual classifier scoring the original image and
//! each expert, trained against the loss-minimizing choice.

use amieod_autograd::{Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{decode, detect, detection_loss, nms, Detector};
use crate::dgrl::{argmin, ExpertLossTable};
use crate::enhance::{apply_expert, meiem_forward, ExpertBundle, NUM_CHOICES};
use crate::error::{Error, Result};
use crate::nn::layers::{batch_norm, check_finite, conv, init_bn, init_conv, init_linear, linear};
use crate::nn::{Mode, Net, ParamSet};
use crate::primitives::{Annotation, Detection, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Two 3×3 convolutions.
    Basic,
    /// 1×1 → 3×3 → 1×1 with fourfold expansion.
    Bottleneck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EsmConfig {
    pub input_size: usize,
    pub stem_width: usize,
    pub stage_widths: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    pub block: BlockKind,
}

impl Default for EsmConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            stem_width: 16,
            stage_widths: vec![16, 32, 64, 64],
            stage_blocks: vec![1, 1, 1, 1],
            block: BlockKind::Basic,
        }
    }
}

impl EsmConfig {
    /// The 50-layer bottleneck layout.
    pub fn resnet50() -> Self {
        Self {
            input_size: 224,
            stem_width: 64,
            stage_widths: vec![64, 128, 256, 512],
            stage_blocks: vec![3, 4, 6, 3],
            block: BlockKind::Bottleneck,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size < 8 {
            return Err(Error::invalid("ESM input size must be at least 8"));
        }
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.stage_blocks.len() {
            return Err(Error::invalid(
                "ESM stage widths and block counts must match",
            ));
        }
        if self.stem_width == 0 || self.stage_widths.contains(&0) || self.stage_blocks.contains(&0)
        {
            return Err(Error::invalid(
                "ESM widths and block counts must be positive",
            ));
        }
        Ok(())
    }

    fn expansion(&self) -> usize {
        match self.block {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EsmWeights {
    pub config: EsmConfig,
    pub params: ParamSet,
    pub buffers: ParamSet,
}

fn init_cbn(
    params: &mut ParamSet,
    buffers: &mut ParamSet,
    prefix: &str,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    rng: &mut impl Rng,
) {
    init_conv(
        params,
        &format!("{prefix}.conv"),
        in_ch,
        out_ch,
        k,
        false,
        2f64.sqrt(),
        rng,
    );
    init_bn(params, buffers, &format!("{prefix}.bn"), out_ch);
}

fn cbn<'t>(net: &Net<'t, '_>, prefix: &str, x: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
    let y = conv(net, &format!("{prefix}.conv"), x, stride, pad);
    batch_norm(net, &format!("{prefix}.bn"), y)
}

impl EsmWeights {
    pub fn new(config: EsmConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut p = ParamSet::new();
        let mut b = ParamSet::new();
        init_cbn(&mut p, &mut b, "stem", 3, config.stem_width, 3, rng);
        let exp = config.expansion();
        let mut in_ch = config.stem_width;
        for (s, (&w, &n)) in config
            .stage_widths
            .iter()
            .zip(&config.stage_blocks)
            .enumerate()
        {
            for i in 0..n {
                let pre = format!("stage{s}.{i}");
                let stride = if s > 0 && i == 0 { 2 } else { 1 };
                let out = w * exp;
                match config.block {
                    BlockKind::Basic => {
                        init_cbn(&mut p, &mut b, &format!("{pre}.a"), in_ch, w, 3, rng);
                        init_cbn(&mut p, &mut b, &format!("{pre}.b"), w, w, 3, rng);
                    }
                    BlockKind::Bottleneck => {
                        init_cbn(&mut p, &mut b, &format!("{pre}.a"), in_ch, w, 1, rng);
                        init_cbn(&mut p, &mut b, &format!("{pre}.b"), w, w, 3, rng);
                        init_cbn(&mut p, &mut b, &format!("{pre}.c"), w, out, 1, rng);
                    }
                }
                if stride != 1 || in_ch != out {
                    init_cbn(&mut p, &mut b, &format!("{pre}.proj"), in_ch, out, 1, rng);
                }
                in_ch = out;
            }
        }
        init_linear(&mut p, "fc", in_ch, NUM_CHOICES, 1.0, rng);
        Ok(Self {
            config,
            params: p,
            buffers: b,
        })
    }

    pub fn bind<'t, 'p>(&'p self, tape: &'t Tape, train: bool) -> Net<'t, 'p> {
        let mode = if train { Mode::Train } else { Mode::Eval };
        Net::bind(tape, &self.params, &self.buffers, train, mode)
    }

    /// Routing logits `[N, 4]` for `x: [N, 3, H, W]`.
    pub fn forward<'t>(&self, net: &Net<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let cfg = &self.config;
        let x = x.resize_bilinear(cfg.input_size, cfg.input_size);
        let mut h = cbn(net, "stem", x, 2, 1).relu();
        check_finite(h, "esm.stem")?;
        let mut in_ch = cfg.stem_width;
        for (s, (&w, &n)) in cfg.stage_widths.iter().zip(&cfg.stage_blocks).enumerate() {
            for i in 0..n {
                let pre = format!("stage{s}.{i}");
                let stride = if s > 0 && i == 0 { 2 } else { 1 };
                let out = w * cfg.expansion();
                let body = match cfg.block {
                    BlockKind::Basic => {
                        let a = cbn(net, &format!("{pre}.a"), h, stride, 1).relu();
                        cbn(net, &format!("{pre}.b"), a, 1, 1)
                    }
                    BlockKind::Bottleneck => {
                        let a = cbn(net, &format!("{pre}.a"), h, 1, 0).relu();
                        let b = cbn(net, &format!("{pre}.b"), a, stride, 1).relu();
                        cbn(net, &format!("{pre}.c"), b, 1, 0)
                    }
                };
                let skip = if stride != 1 || in_ch != out {
                    cbn(net, &format!("{pre}.proj"), h, stride, 0)
                } else {
                    h
                };
                h = body.add(skip).relu();
                check_finite(h, &format!("esm.{pre}"))?;
                in_ch = out;
            }
        }
        let shape = h.shape();
        let pooled = h.mean_axes(&[2, 3]).reshape(&[shape[0], shape[1]]);
        let logits = linear(net, "fc", pooled);
        check_finite(logits, "esm.fc")?;
        Ok(logits)
    }
}

/// Routing logits of one image.
pub fn esm_forward(image: &Image, weights: &EsmWeights) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let net = weights.bind(&tape, false);
    let logits = weights.forward(&net, tape.constant(image.batched()))?;
    let out = logits.value().data().to_vec();
    Ok(out)
}

/// Outcome of routing one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub chosen: usize,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = k;
        }
    }
    best
}

/// Hard routing: the arg-max of the softmax, which is the arg-max of the logits.
pub fn route(logits: &[f64]) -> Result<RoutingDecision> {
    if logits.is_empty() {
        return Err(Error::invalid("no routing logits"));
    }
    if let Some(k) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::numerical(
            "routing",
            format!("logit {k} is {}", logits[k]),
        ));
    }
    Ok(RoutingDecision {
        probs: softmax(logits),
        chosen: argmax(logits),
        logits: logits.to_vec(),
    })
}

/// Detection losses of the original image and each expert output under
/// frozen networks.
pub fn expert_losses(
    image: &Image,
    gts: &[Annotation],
    experts: &ExpertBundle,
    detector: &Detector,
) -> Result<ExpertLossTable> {
    let outputs = meiem_forward(image, experts)?;
    let mut breakdowns = Vec::with_capacity(outputs.len());
    for out in &outputs {
        let raw = detect(out, detector)?;
        breakdowns.push(detection_loss(&raw, gts, &detector.config)?);
    }
    ExpertLossTable::new(breakdowns)
}

/// The choice with the smallest detection loss, used as the training label.
pub fn assign_pseudo_label(
    image: &Image,
    gts: &[Annotation],
    experts: &ExpertBundle,
    detector: &Detector,
) -> Result<usize> {
    argmin(&expert_losses(image, gts, experts, detector)?.per_expert_total)
}

/// `-log softmax(logits)[b]`.
pub fn dgce_loss(logits: &[f64], b: usize) -> Result<f64> {
    if b >= logits.len() {
        return Err(Error::invalid(format!(
            "label {b} out of range for {} logits",
            logits.len()
        )));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[b])
}

/// Mean cross-entropy of `logits: [N, K]` against `labels`.
pub fn dgce_var<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() || labels.iter().any(|&b| b >= shape[1]) {
        return Err(Error::invalid("labels do not match the logits"));
    }
    let idx: Vec<usize> = labels
        .iter()
        .enumerate()
        .map(|(i, &b)| i * shape[1] + b)
        .collect();
    Ok(logits.log_softmax().gather(&idx).mean().neg())
}

/// Runs the frozen detector on expert `k`'s output and post-processes.
pub fn detect_with_choice(
    image: &Image,
    k: usize,
    experts: &ExpertBundle,
    detector: &Detector,
    conf_thresh: f64,
    nms_thresh: f64,
) -> Result<Vec<Detection>> {
    let enhanced = apply_expert(image, experts, k)?;
    let raw = detect(&enhanced, detector)?;
    Ok(nms(
        &decode(&raw, conf_thresh, &detector.config),
        nms_thresh,
    ))
}

/// Routes the image, applies only the chosen expert, then detects.
pub fn infer(
    image: &Image,
    esm: &EsmWeights,
    experts: &ExpertBundle,
    detector: &Detector,
    conf_thresh: f64,
    nms_thresh: f64,
) -> Result<(RoutingDecision, Vec<Detection>)> {
    if !(0.0..=1.0).contains(&conf_thresh) || !(nms_thresh > 0.0 && nms_thresh < 1.0) {
        return Err(Error::invalid("thresholds out of range"));
    }
    let decision = route(&esm_forward(image, esm)?)?;
    let dets = detect_with_choice(
        image,
        decision.chosen,
        experts,
        detector,
        conf_thresh,
        nms_thresh,
    )?;
    Ok((decision, dets))
}

/// Pins every routing decision to `k` by zeroing the head's weights.
pub fn force_choice(esm: &mut EsmWeights, k: usize) {
    esm.params
        .get_mut("fc.weight")
        .expect("fc weight")
        .data_mut()
        .fill(0.0);
    let bias = esm.params.get_mut("fc.bias").expect("fc bias");
    for (i, v) in bias.data_mut().iter_mut().enumerate() {
        *v = if i == k { 10.0 } else { 0.0 };
    }
}
