use std::borrow::Cow;
use std::collections::BTreeMap;
use std::f64::consts::PI;

use amieod_autograd::{Tape, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, FORMAT_VERSION};
use super::{prepare, Prepared, StepRecord, TrainLog};
use crate::config::{Config, LrSchedule, TrainConfig};
use crate::datakit::{darken, Sample};
use crate::detector::{image_loss, Detector};
use crate::dgrl::{argmin, dgrl_var, stage1_loss_var};
use crate::enhance::{apply_expert, CurveEnhancer, ExpertBundle, EXPERT_NAMES, NUM_CHOICES};
use crate::error::{Error, Result};
use crate::esm::{assign_pseudo_label, dgce_var, EsmWeights};
use crate::nn::{update_running_stats, Sgd};
use crate::primitives::{Annotation, Image};

/// Learning rate at `step` of `total`.
pub fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.lr,
        LrSchedule::Cosine => cfg.lr * 0.5 * (1.0 + (PI * step as f64 / total.max(1) as f64).cos()),
    }
}

fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn maybe_flip<'a>(
    p: &'a Prepared,
    enabled: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Cow<'a, Prepared>> {
    if enabled && rng.random_bool(0.5) {
        Ok(Cow::Owned(p.flipped()?))
    } else {
        Ok(Cow::Borrowed(p))
    }
}

fn ensure_finite(value: f64, what: &str, epoch: usize, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::numerical(
            what,
            format!("loss became {value} at epoch {epoch}, step {step}"),
        ))
    }
}

fn check_dataset(samples: &[Sample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    Ok(())
}

fn optimizer(t: &TrainConfig) -> Sgd {
    Sgd::new(t.lr, t.momentum, t.weight_decay)
}

/// Fits the frozen curve enhancer to undo darkening: dark input, bright
/// target, mean absolute error. Samples without a clean reference are
/// darkened on the fly and used as their own target.
pub fn pretrain_piem(
    cfg: &Config,
    data: &[Prepared],
    rng: &mut ChaCha8Rng,
) -> Result<(CurveEnhancer, TrainLog)> {
    let t = &cfg.stage1;
    let mut net = CurveEnhancer::new(cfg.enhance.curve_width, false, rng);
    let mut opt = Sgd::new(cfg.enhance.pretrain_lr, t.momentum, t.weight_decay);
    let mut log = TrainLog::default();
    let pairs: Vec<(Image, Image)> = data
        .iter()
        .map(|p| match &p.clean {
            Some(c) => Ok((p.image.clone(), c.clone())),
            None => {
                let s = &cfg.synth;
                let gamma = rng.random_range(s.gamma_range[0]..=s.gamma_range[1]);
                let gain = rng.random_range(s.gain_range[0]..=s.gain_range[1]);
                let dark = darken(&p.image, gamma, gain, s.noise_sigma, rng.random())?;
                Ok((dark, p.image.clone()))
            }
        })
        .collect::<Result<_>>()?;
    let mut step = 0;
    for epoch in 0..cfg.enhance.pretrain_epochs {
        for batch in shuffled_batches(pairs.len(), t.batch_size, rng) {
            let inputs: Vec<&Image> = batch.iter().map(|&i| &pairs[i].0).collect();
            let targets: Vec<&Image> = batch.iter().map(|&i| &pairs[i].1).collect();
            let (loss, grads, observed) = {
                let tape = Tape::new();
                let bound = net.bind(&tape, true);
                let x = tape.constant(Image::stack(&inputs)?);
                let y = tape.constant(Image::stack(&targets)?);
                let out = net.forward(&bound, x)?;
                let loss = out.sub(y).abs().mean();
                let g = tape.backward(loss);
                (
                    loss.item(),
                    bound.params.grads(&g),
                    bound.take_observations(),
                )
            };
            ensure_finite(loss, "enhancer pretraining", epoch, step)?;
            opt.step("piem", &mut net.params, &grads);
            update_running_stats(&mut net.buffers, &observed, t.bn_momentum);
            log.push(StepRecord {
                stage: 0,
                epoch,
                step,
                lr: opt.lr,
                losses: BTreeMap::from([("l1".to_string(), loss)]),
            });
            step += 1;
        }
    }
    net.frozen = true;
    Ok((net, log))
}

/// Joint optimization of the trainable experts and the detector.
pub struct Stage1Trainer {
    pub experts: ExpertBundle,
    pub detector: Detector,
    pub train: TrainConfig,
    opt: Sgd,
}

impl Stage1Trainer {
    pub fn new(experts: ExpertBundle, detector: Detector, train: TrainConfig) -> Self {
        let opt = optimizer(&train);
        Self {
            experts,
            detector,
            train,
            opt,
        }
    }

    /// One optimizer step on a batch. Returns the logged components.
    pub fn step(
        &mut self,
        images: &[&Image],
        gts: &[&[Annotation]],
        lr: f64,
    ) -> Result<BTreeMap<String, f64>> {
        self.step_with(images, None, gts, lr)
    }

    /// Like [`Stage1Trainer::step`], reusing precomputed outputs of the
    /// frozen enhancer when given.
    pub fn step_with(
        &mut self,
        images: &[&Image],
        frozen_outputs: Option<&[&Image]>,
        gts: &[&[Annotation]],
        lr: f64,
    ) -> Result<BTreeMap<String, f64>> {
        if images.is_empty()
            || images.len() != gts.len()
            || frozen_outputs.is_some_and(|f| f.len() != images.len())
        {
            return Err(Error::invalid("batch images and labels disagree"));
        }
        let n = images.len();
        let cfg = &self.detector.config;
        let mut logged = BTreeMap::new();
        let (jg, ig, dg, jobs, dobs) = {
            let tape = Tape::new();
            let nets = self.experts.bind(&tape, true);
            let x = tape.constant(Image::stack(images)?);
            let outputs = match frozen_outputs {
                Some(f) => vec![
                    x,
                    tape.constant(Image::stack(f)?),
                    self.experts.forward_one(&nets, x, 2)?,
                    self.experts.forward_one(&nets, x, 3)?,
                ],
                None => self.experts.forward_all(&nets, x)?,
            };
            let det_net = self.detector.bind(&tape, true);
            let raws: Vec<Var<'_>> = outputs
                .iter()
                .map(|o| self.detector.forward(&det_net, *o))
                .collect::<Result<_>>()?;

            let mut per_choice: Vec<Var<'_>> = Vec::with_capacity(NUM_CHOICES);
            let mut table = vec![vec![0.0; NUM_CHOICES]; n];
            let (mut box_sum, mut obj_sum, mut cls_sum) = (0.0, 0.0, 0.0);
            for k in 0..NUM_CHOICES {
                let mut sum: Option<Var<'_>> = None;
                for i in 0..n {
                    let terms = image_loss(raws[k], i, gts[i], cfg)?;
                    let b = terms.breakdown();
                    table[i][k] = b.total;
                    box_sum += b.box_loss;
                    obj_sum += b.obj_loss;
                    cls_sum += b.cls_loss;
                    sum = Some(match sum {
                        Some(s) => s.add(terms.total),
                        None => terms.total,
                    });
                }
                let mean = sum.expect("nonempty batch").mul_scalar(1.0 / n as f64);
                logged.insert(format!("det_{}", EXPERT_NAMES[k]), mean.item());
                per_choice.push(mean);
            }
            let best: Vec<usize> = table.iter().map(|row| argmin(row)).collect::<Result<_>>()?;
            let dgrl = dgrl_var(&outputs, &best)?.mean();
            let loss = stage1_loss_var(dgrl, &per_choice, self.train.alpha)?;
            let count = (n * NUM_CHOICES) as f64;
            logged.insert("box".into(), box_sum / count);
            logged.insert("obj".into(), obj_sum / count);
            logged.insert("cls".into(), cls_sum / count);
            logged.insert(
                "det".into(),
                per_choice.iter().map(|v| v.item()).sum::<f64>() / NUM_CHOICES as f64,
            );
            logged.insert("dgrl".into(), dgrl.item());
            logged.insert("total".into(), loss.item());
            for k in 0..NUM_CHOICES {
                let picked = best.iter().filter(|&&b| b == k).count();
                logged.insert(format!("picked_{}", EXPERT_NAMES[k]), picked as f64);
            }
            if !loss.item().is_finite() {
                return Err(Error::numerical(
                    "stage-1 loss",
                    format!("loss is {}", loss.item()),
                ));
            }
            let g = tape.backward(loss);
            (
                nets.jiem.params.grads(&g),
                nets.iaem.params.grads(&g),
                det_net.params.grads(&g),
                nets.jiem.take_observations(),
                det_net.take_observations(),
            )
        };
        self.opt.lr = lr;
        self.opt.step("jiem", &mut self.experts.jiem.params, &jg);
        self.opt.step("iaem", &mut self.experts.iaem.params, &ig);
        self.opt.step("detector", &mut self.detector.params, &dg);
        update_running_stats(
            &mut self.experts.jiem.buffers,
            &jobs,
            self.train.bn_momentum,
        );
        update_running_stats(&mut self.detector.buffers, &dobs, self.train.bn_momentum);
        Ok(logged)
    }
}

pub struct Stage1Output {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    pub pretrain_log: TrainLog,
}

/// Pretrains and freezes the curve enhancer, then trains the twin, the
/// adaptive filters and the detector jointly.
pub fn train_stage1(cfg: &Config, samples: &[Sample]) -> Result<Stage1Output> {
    cfg.validate()?;
    check_dataset(samples)?;
    let t = &cfg.stage1;
    let data = prepare(samples, t.input_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let (piem, pretrain_log) = pretrain_piem(cfg, &data, &mut rng)?;
    let mut experts = ExpertBundle::from_pretrained(piem, cfg.enhance.pp_input, &mut rng);
    experts.dip_order = cfg.enhance.dip_order.clone();
    let detector = Detector::new(cfg.detector.clone(), &mut rng)?;
    let mut trainer = Stage1Trainer::new(experts, detector, t.clone());
    let per_epoch = data.len().div_ceil(t.batch_size);
    let total = per_epoch * t.epochs;
    let mut log = TrainLog::default();
    let mut step = 0;
    // the frozen enhancer's output per image and flip state
    let mut frozen: Vec<[Option<Image>; 2]> = vec![[None, None]; data.len()];
    for epoch in 0..t.epochs {
        for batch in shuffled_batches(data.len(), t.batch_size, &mut rng) {
            let mut items: Vec<Cow<'_, Prepared>> = Vec::with_capacity(batch.len());
            for &i in &batch {
                let item = maybe_flip(&data[i], t.hflip, &mut rng)?;
                let slot = &mut frozen[i][matches!(item, Cow::Owned(_)) as usize];
                if slot.is_none() {
                    *slot = Some(apply_expert(&item.image, &trainer.experts, 1)?);
                }
                items.push(item);
            }
            let images: Vec<&Image> = items.iter().map(|p| &p.image).collect();
            let enhanced: Vec<&Image> = batch
                .iter()
                .zip(&items)
                .map(|(&i, p)| {
                    frozen[i][matches!(p, Cow::Owned(_)) as usize]
                        .as_ref()
                        .expect("filled above")
                })
                .collect();
            let gts: Vec<&[Annotation]> = items.iter().map(|p| p.annotations.as_slice()).collect();
            let lr = lr_at(t, step, total);
            let losses = trainer.step_with(&images, Some(&enhanced), &gts, lr)?;
            ensure_finite(losses["total"], "stage-1 loss", epoch, step)?;
            log.push(StepRecord {
                stage: 1,
                epoch,
                step,
                lr,
                losses,
            });
            step += 1;
        }
        log::info!(
            "stage 1 epoch {}/{}: loss {:.4}",
            epoch + 1,
            t.epochs,
            log.tail_mean("total", 1.0 / (epoch + 1) as f64)
                .unwrap_or(f64::NAN)
        );
    }
    let checkpoint = Checkpoint {
        format_version: FORMAT_VERSION,
        stage: 1,
        epoch: t.epochs,
        config: cfg.clone(),
        rng_state: rng,
        experts: trainer.experts,
        detector: trainer.detector,
        esm: None,
    };
    Ok(Stage1Output {
        checkpoint,
        log,
        pretrain_log,
    })
}

/// Plain detector training on unmodified inputs.
pub struct DetectorTrainer {
    pub detector: Detector,
    pub train: TrainConfig,
    /// Factor on the detection loss before differentiation.
    pub loss_weight: f64,
    opt: Sgd,
}

impl DetectorTrainer {
    pub fn new(detector: Detector, train: TrainConfig) -> Self {
        let opt = optimizer(&train);
        Self {
            detector,
            train,
            loss_weight: 1.0,
            opt,
        }
    }

    pub fn step(
        &mut self,
        images: &[&Image],
        gts: &[&[Annotation]],
        lr: f64,
    ) -> Result<BTreeMap<String, f64>> {
        if images.is_empty() || images.len() != gts.len() {
            return Err(Error::invalid("batch images and labels disagree"));
        }
        let n = images.len() as f64;
        let mut logged = BTreeMap::new();
        let (grads, observed) = {
            let tape = Tape::new();
            let net = self.detector.bind(&tape, true);
            let raw = self
                .detector
                .forward(&net, tape.constant(Image::stack(images)?))?;
            let mut sum: Option<Var<'_>> = None;
            let (mut bx, mut ob, mut cl) = (0.0, 0.0, 0.0);
            for (i, g) in gts.iter().enumerate() {
                let terms = image_loss(raw, i, g, &self.detector.config)?;
                let b = terms.breakdown();
                bx += b.box_loss;
                ob += b.obj_loss;
                cl += b.cls_loss;
                sum = Some(match sum {
                    Some(s) => s.add(terms.total),
                    None => terms.total,
                });
            }
            let loss = sum.expect("nonempty batch").mul_scalar(1.0 / n);
            if !loss.item().is_finite() {
                return Err(Error::numerical(
                    "detector loss",
                    format!("loss is {}", loss.item()),
                ));
            }
            logged.insert("box".to_string(), bx / n);
            logged.insert("obj".to_string(), ob / n);
            logged.insert("cls".to_string(), cl / n);
            logged.insert("total".to_string(), loss.item());
            let g = tape.backward(loss.mul_scalar(self.loss_weight));
            (net.params.grads(&g), net.take_observations())
        };
        self.opt.lr = lr;
        self.opt.step("detector", &mut self.detector.params, &grads);
        update_running_stats(
            &mut self.detector.buffers,
            &observed,
            self.train.bn_momentum,
        );
        Ok(logged)
    }
}

/// A detector trained directly on the dataset images with the stage-1
/// schedule and no enhancement. This is the stage-1 objective with the
/// experts removed: the regression term vanishes and the detection loss
/// keeps its weight `alpha`.
pub fn train_baseline(cfg: &Config, samples: &[Sample]) -> Result<(Detector, TrainLog)> {
    cfg.validate()?;
    check_dataset(samples)?;
    let t = &cfg.stage1;
    let data = prepare(samples, t.input_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let detector = Detector::new(cfg.detector.clone(), &mut rng)?;
    let mut trainer = DetectorTrainer::new(detector, t.clone());
    trainer.loss_weight = t.alpha;
    let total = data.len().div_ceil(t.batch_size) * t.epochs;
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..t.epochs {
        for batch in shuffled_batches(data.len(), t.batch_size, &mut rng) {
            let items: Vec<Cow<'_, Prepared>> = batch
                .iter()
                .map(|&i| maybe_flip(&data[i], t.hflip, &mut rng))
                .collect::<Result<_>>()?;
            let images: Vec<&Image> = items.iter().map(|p| &p.image).collect();
            let gts: Vec<&[Annotation]> = items.iter().map(|p| p.annotations.as_slice()).collect();
            let lr = lr_at(t, step, total);
            let losses = trainer.step(&images, &gts, lr)?;
            log.push(StepRecord {
                stage: 1,
                epoch,
                step,
                lr,
                losses,
            });
            step += 1;
        }
    }
    Ok((trainer.detector, log))
}

/// Cross-entropy training of the selector; nothing else is touched.
pub struct EsmTrainer {
    pub esm: EsmWeights,
    pub train: TrainConfig,
    opt: Sgd,
}

impl EsmTrainer {
    pub fn new(esm: EsmWeights, train: TrainConfig) -> Self {
        let opt = optimizer(&train);
        Self { esm, train, opt }
    }

    pub fn step(&mut self, images: &[&Image], labels: &[usize], lr: f64) -> Result<f64> {
        let (loss, grads, observed) = {
            let tape = Tape::new();
            let net = self.esm.bind(&tape, true);
            let logits = self
                .esm
                .forward(&net, tape.constant(Image::stack(images)?))?;
            let loss = dgce_var(logits, labels)?;
            if !loss.item().is_finite() {
                return Err(Error::numerical(
                    "selector loss",
                    format!("loss is {}", loss.item()),
                ));
            }
            let g = tape.backward(loss);
            (loss.item(), net.params.grads(&g), net.take_observations())
        };
        self.opt.lr = lr;
        self.opt.step("esm", &mut self.esm.params, &grads);
        update_running_stats(&mut self.esm.buffers, &observed, self.train.bn_momentum);
        Ok(loss)
    }
}

/// Trains the selector against the per-image best choice under the frozen
/// stage-1 experts and detector.
pub fn train_stage2(
    cfg: &Config,
    samples: &[Sample],
    stage1: &Checkpoint,
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    check_dataset(samples)?;
    let t = &cfg.stage2;
    let data = prepare(samples, t.input_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let esm = EsmWeights::new(cfg.esm.clone(), &mut rng)?;
    let mut trainer = EsmTrainer::new(esm, t.clone());
    // labels depend only on frozen networks: compute each once
    let mut labels: Vec<[Option<usize>; 2]> = vec![[None, None]; data.len()];
    let total = data.len().div_ceil(t.batch_size) * t.epochs;
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..t.epochs {
        for batch in shuffled_batches(data.len(), t.batch_size, &mut rng) {
            let mut items = Vec::with_capacity(batch.len());
            let mut batch_labels = Vec::with_capacity(batch.len());
            for &i in &batch {
                let item = maybe_flip(&data[i], t.hflip, &mut rng)?;
                let slot = &mut labels[i][matches!(item, Cow::Owned(_)) as usize];
                let b = match *slot {
                    Some(b) => b,
                    None => {
                        let b = assign_pseudo_label(
                            &item.image,
                            &item.annotations,
                            &stage1.experts,
                            &stage1.detector,
                        )?;
                        *slot = Some(b);
                        b
                    }
                };
                items.push(item);
                batch_labels.push(b);
            }
            let images: Vec<&Image> = items.iter().map(|p| &p.image).collect();
            let lr = lr_at(t, step, total);
            let loss = trainer.step(&images, &batch_labels, lr)?;
            ensure_finite(loss, "selector loss", epoch, step)?;
            log.push(StepRecord {
                stage: 2,
                epoch,
                step,
                lr,
                losses: BTreeMap::from([("dgce".to_string(), loss)]),
            });
            step += 1;
        }
        log::info!(
            "stage 2 epoch {}/{}: loss {:.4}",
            epoch + 1,
            t.epochs,
            log.tail_mean("dgce", 1.0 / (epoch + 1) as f64)
                .unwrap_or(f64::NAN)
        );
    }
    let mut config = stage1.config.clone();
    config.stage2 = cfg.stage2.clone();
    config.esm = cfg.esm.clone();
    config.eval = cfg.eval.clone();
    let checkpoint = Checkpoint {
        format_version: FORMAT_VERSION,
        stage: 2,
        epoch: t.epochs,
        config,
        rng_state: rng,
        experts: stage1.experts.clone(),
        detector: stage1.detector.clone(),
        esm: Some(trainer.esm),
    };
    Ok((checkpoint, log))
}
