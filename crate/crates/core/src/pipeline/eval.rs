use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::{prepare, Prepared};
use crate::config::{Config, EvalSettings};
use crate::datakit::{letterbox, Sample};
use crate::detector::Detector;
use crate::enhance::{ExpertBundle, EXPERT_NAMES, NUM_CHOICES};
use crate::error::{Error, Result};
use crate::esm::{
    detect_with_choice, esm_forward, expert_losses, route, EsmWeights, RoutingDecision,
};
use crate::evalkit::{evaluate, EvalResult};
use crate::primitives::{Detection, Image};

fn to_original(p: &Prepared, dets: Vec<Detection>) -> Vec<Detection> {
    dets.iter()
        .filter_map(|d| p.transform.inverse_detection(d))
        .collect()
}

/// Detections for every sample after applying choice `k`, in original
/// image coordinates.
pub fn predict_choice(
    data: &[Prepared],
    experts: &ExpertBundle,
    detector: &Detector,
    k: usize,
    settings: &EvalSettings,
) -> Result<Vec<Vec<Detection>>> {
    data.iter()
        .map(|p| {
            let dets = detect_with_choice(
                &p.image,
                k,
                experts,
                detector,
                settings.decode_conf,
                settings.nms_iou,
            )?;
            Ok(to_original(p, dets))
        })
        .collect()
}

fn ground_truth(samples: &[Sample]) -> Vec<Vec<crate::primitives::Annotation>> {
    samples.iter().map(|s| s.annotations.clone()).collect()
}

/// mAP and friends when every image goes through choice `k`.
pub fn evaluate_choice(
    samples: &[Sample],
    experts: &ExpertBundle,
    detector: &Detector,
    k: usize,
    cfg: &Config,
) -> Result<EvalResult> {
    let data = prepare(samples, cfg.stage1.input_size)?;
    let preds = predict_choice(&data, experts, detector, k, &cfg.eval)?;
    evaluate(
        &preds,
        &ground_truth(samples),
        detector.config.num_classes,
        &cfg.eval.eval_config(),
    )
}

fn selector(ckpt: &Checkpoint) -> Result<&EsmWeights> {
    ckpt.esm
        .as_ref()
        .ok_or_else(|| Error::invalid("checkpoint has no selector; run stage 2 first"))
}

/// Routes one image, enhances it with the chosen expert and detects.
/// Boxes are in the image's own coordinates.
pub fn infer_sample(image: &Image, ckpt: &Checkpoint) -> Result<(RoutingDecision, Vec<Detection>)> {
    let esm = selector(ckpt)?;
    let settings = &ckpt.config.eval;
    let (boxed, transform) = letterbox(image, ckpt.config.stage1.input_size)?;
    let (decision, dets) = crate::esm::infer(
        &boxed,
        esm,
        &ckpt.experts,
        &ckpt.detector,
        settings.decode_conf,
        settings.nms_iou,
    )?;
    let dets = dets
        .iter()
        .filter_map(|d| transform.inverse_detection(d))
        .collect();
    Ok((decision, dets))
}

/// Evaluation with the selector picking one choice per image.
pub fn evaluate_routed(samples: &[Sample], ckpt: &Checkpoint) -> Result<(EvalResult, Vec<usize>)> {
    let esm = selector(ckpt)?;
    let cfg = &ckpt.config;
    let data = prepare(samples, cfg.stage1.input_size)?;
    let mut preds = Vec::with_capacity(data.len());
    let mut chosen = Vec::with_capacity(data.len());
    for p in &data {
        let k = route(&esm_forward(&p.image, esm)?)?.chosen;
        let dets = detect_with_choice(
            &p.image,
            k,
            &ckpt.experts,
            &ckpt.detector,
            cfg.eval.decode_conf,
            cfg.eval.nms_iou,
        )?;
        preds.push(to_original(p, dets));
        chosen.push(k);
    }
    let result = evaluate(
        &preds,
        &ground_truth(samples),
        cfg.detector.num_classes,
        &cfg.eval.eval_config(),
    )?;
    Ok((result, chosen))
}

/// Routing outcomes compared against fixed and random choices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteStats {
    pub num_images: usize,
    pub choice_names: Vec<String>,
    /// Images routed to each choice by the selector.
    pub histogram: Vec<usize>,
    /// Images whose smallest detection loss is at each choice.
    pub best_histogram: Vec<usize>,
    pub esm_loss: f64,
    pub fixed_loss: Vec<f64>,
    pub random_seeds: Vec<u64>,
    pub random_loss: Vec<f64>,
    pub random_loss_mean: f64,
    /// Loss and mAP when every image takes its best choice.
    pub oracle_loss: f64,
    pub oracle_map: f64,
    pub esm_map: f64,
    pub fixed_map: Vec<f64>,
    pub random_map: Vec<f64>,
}

/// Mean detection loss and mAP under selector routing, each fixed choice,
/// and uniform random routing with seeds `seed, seed + 1, seed + 2`.
pub fn route_stats(ckpt: &Checkpoint, samples: &[Sample], seed: u64) -> Result<RouteStats> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to route"));
    }
    let esm = selector(ckpt)?;
    let cfg = &ckpt.config;
    let data = prepare(samples, cfg.stage1.input_size)?;
    let gts = ground_truth(samples);
    let n = data.len();
    let mut losses = Vec::with_capacity(n);
    let mut chosen = Vec::with_capacity(n);
    let mut per_choice: Vec<Vec<Vec<Detection>>> = vec![Vec::with_capacity(n); NUM_CHOICES];
    for p in &data {
        let table = expert_losses(&p.image, &p.annotations, &ckpt.experts, &ckpt.detector)?;
        losses.push(table.per_expert_total);
        chosen.push(route(&esm_forward(&p.image, esm)?)?.chosen);
        for (k, slot) in per_choice.iter_mut().enumerate() {
            let dets = detect_with_choice(
                &p.image,
                k,
                &ckpt.experts,
                &ckpt.detector,
                cfg.eval.decode_conf,
                cfg.eval.nms_iou,
            )?;
            slot.push(to_original(p, dets));
        }
    }
    let eval_cfg = cfg.eval.eval_config();
    let classes = cfg.detector.num_classes;
    let routed = |choice: &[usize]| -> Result<(f64, f64)> {
        let loss = choice
            .iter()
            .enumerate()
            .map(|(i, &k)| losses[i][k])
            .sum::<f64>()
            / n as f64;
        let preds: Vec<Vec<Detection>> = choice
            .iter()
            .enumerate()
            .map(|(i, &k)| per_choice[k][i].clone())
            .collect();
        Ok((loss, evaluate(&preds, &gts, classes, &eval_cfg)?.map50))
    };
    let mut histogram = vec![0; NUM_CHOICES];
    for &k in &chosen {
        histogram[k] += 1;
    }
    let best: Vec<usize> = losses
        .iter()
        .map(|row| crate::dgrl::argmin(row))
        .collect::<Result<_>>()?;
    let mut best_histogram = vec![0; NUM_CHOICES];
    for &k in &best {
        best_histogram[k] += 1;
    }
    let (esm_loss, esm_map) = routed(&chosen)?;
    let mut fixed_loss = Vec::new();
    let mut fixed_map = Vec::new();
    for k in 0..NUM_CHOICES {
        let (l, m) = routed(&vec![k; n])?;
        fixed_loss.push(l);
        fixed_map.push(m);
    }
    let random_seeds: Vec<u64> = (0..3).map(|i| seed.wrapping_add(i)).collect();
    let mut random_loss = Vec::new();
    let mut random_map = Vec::new();
    for &s in &random_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let choice: Vec<usize> = (0..n).map(|_| rng.random_range(0..NUM_CHOICES)).collect();
        let (l, m) = routed(&choice)?;
        random_loss.push(l);
        random_map.push(m);
    }
    let (oracle_loss, oracle_map) = routed(&best)?;
    Ok(RouteStats {
        num_images: n,
        choice_names: EXPERT_NAMES.iter().map(|s| s.to_string()).collect(),
        histogram,
        best_histogram,
        esm_loss,
        fixed_loss,
        random_loss_mean: random_loss.iter().sum::<f64>() / random_loss.len() as f64,
        random_seeds,
        random_loss,
        oracle_loss,
        oracle_map,
        esm_map,
        fixed_map,
        random_map,
    })
}
