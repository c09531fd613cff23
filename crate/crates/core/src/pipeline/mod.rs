//! Two-stage training, checkpoints, logs and evaluation helpers.

mod checkpoint;
mod eval;
mod train;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode, encode, load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC,
};
pub use eval::{
    evaluate_choice, evaluate_routed, infer_sample, predict_choice, route_stats, RouteStats,
};
pub use train::{
    lr_at, pretrain_piem, train_baseline, train_stage1, train_stage2, DetectorTrainer, EsmTrainer,
    Stage1Output, Stage1Trainer,
};

use crate::datakit::{hflip, letterbox, LetterboxTransform, Sample};
use crate::error::{Error, Result};
use crate::primitives::{Annotation, Image};

/// A sample resized to the network input.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub name: String,
    pub image: Image,
    pub annotations: Vec<Annotation>,
    pub clean: Option<Image>,
    pub transform: LetterboxTransform,
}

impl Prepared {
    /// Mirrored copy of the image, its labels and its clean reference.
    pub fn flipped(&self) -> Result<Prepared> {
        let (image, annotations) = hflip(&self.image, &self.annotations)?;
        let clean = match &self.clean {
            Some(c) => Some(hflip(c, &[])?.0),
            None => None,
        };
        Ok(Prepared {
            name: self.name.clone(),
            image,
            annotations,
            clean,
            transform: self.transform,
        })
    }
}

/// Letterboxes every sample to `input_size`.
pub fn prepare(samples: &[Sample], input_size: usize) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            let (image, transform) = letterbox(&s.image, input_size)?;
            let clean = match &s.clean {
                Some(c) => Some(letterbox(c, input_size)?.0),
                None => None,
            };
            Ok(Prepared {
                name: s.name.clone(),
                image,
                annotations: s
                    .annotations
                    .iter()
                    .map(|a| transform.forward_annotation(a))
                    .collect(),
                clean,
                transform,
            })
        })
        .collect()
}

/// One optimizer step's worth of logged values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn push(&mut self, record: StepRecord) {
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// JSON lines, one record per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    /// Per-component series in step order.
    pub fn curves(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &self.records {
            for (k, v) in &r.losses {
                out.entry(k.clone()).or_default().push(*v);
            }
        }
        out
    }

    /// Mean of `key` over the last `fraction` of records.
    pub fn tail_mean(&self, key: &str, fraction: f64) -> Option<f64> {
        let values = self.curves().remove(key)?;
        let n = ((values.len() as f64 * fraction).ceil() as usize).clamp(1, values.len());
        let tail = &values[values.len() - n..];
        Some(tail.iter().sum::<f64>() / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::BBox;

    #[test]
    fn log_round_trips_through_jsonl() {
        let mut log = TrainLog::default();
        for step in 0..3 {
            let losses = [("box", 0.1 * step as f64), ("dgrl", 1.0 / 3.0)]
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect();
            log.push(StepRecord {
                stage: 1,
                epoch: 0,
                step,
                lr: 0.01,
                losses,
            });
        }
        let text = log.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(TrainLog::from_jsonl(&text).unwrap(), log);
        assert_eq!(log.curves()["box"].len(), 3);
        assert!((log.tail_mean("box", 0.1).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn prepare_maps_boxes_into_the_canvas() {
        let image = Image::filled(40, 80, 0.3).unwrap();
        let s = Sample::new(
            "a",
            image,
            vec![Annotation {
                bbox: BBox::new(0.0, 0.0, 80.0, 40.0).unwrap(),
                class_id: 1,
            }],
        );
        let p = prepare(&[s], 64).unwrap();
        assert_eq!((p[0].image.height(), p[0].image.width()), (64, 64));
        assert_eq!(
            p[0].annotations[0].bbox,
            BBox::new(0.0, 16.0, 64.0, 48.0).unwrap()
        );
        let f = p[0].flipped().unwrap();
        assert_eq!(f.annotations[0].bbox, p[0].annotations[0].bbox);
    }
}
