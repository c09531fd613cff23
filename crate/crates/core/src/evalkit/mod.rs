//! Precision, recall and mAP@50, plus JSON and plot output.

mod plot;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::primitives::{Annotation, Detection};

pub use plot::{plot_curves, Series};

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    /// Confidence cut for the scalar precision and recall.
    pub conf_thresh: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            conf_thresh: 0.25,
        }
    }
}

/// Order used for greedy matching: score descending, then geometry and class
/// so that equal scores do not depend on input order.
fn by_score(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
        .then(a.bbox.x2.total_cmp(&b.bbox.x2))
        .then(a.bbox.y2.total_cmp(&b.bbox.y2))
}

/// True-positive flags aligned with `dets`. Visiting detections by
/// descending score, each claims the unclaimed same-class ground truth of
/// highest IoU, provided that IoU reaches `iou_thresh`.
pub fn match_detections(dets: &[Detection], gts: &[Annotation], iou_thresh: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| by_score(&dets[i], &dets[j]).then(i.cmp(&j)));
    let mut claimed = vec![false; gts.len()];
    let mut flags = vec![false; dets.len()];
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if claimed[g] || gt.class_id != d.class_id {
                continue;
            }
            let iou = d.bbox.iou(&gt.bbox);
            if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            claimed[g] = true;
            flags[i] = true;
        }
    }
    flags
}

/// Precision/recall after each distinct score, highest first.
pub fn pr_points(flags: &[bool], scores: &[f64], num_gt: usize) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..flags.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::new();
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if flags[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let recall = if num_gt == 0 {
            0.0
        } else {
            tp as f64 / num_gt as f64
        };
        points.push((recall, tp as f64 / (tp + fp) as f64));
    }
    points
}

/// Area under the all-points interpolated precision/recall curve, with one
/// curve point per distinct score. Zero when there is nothing to find.
pub fn average_precision(flags: &[bool], scores: &[f64], num_gt: usize) -> f64 {
    assert_eq!(flags.len(), scores.len(), "flags and scores misaligned");
    if num_gt == 0 {
        return 0.0;
    }
    let points = pr_points(flags, scores, num_gt);
    let mut envelope = vec![0.0; points.len()];
    let mut running: f64 = 0.0;
    for i in (0..points.len()).rev() {
        running = running.max(points[i].1);
        envelope[i] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, (recall, _)) in points.iter().enumerate() {
        ap += (recall - prev_recall) * envelope[i];
        prev_recall = *recall;
    }
    ap
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub version: u32,
    /// AP of every class that has at least one ground-truth object.
    pub per_class_ap: BTreeMap<usize, f64>,
    pub map50: f64,
    pub precision: f64,
    pub recall: f64,
    /// Counts at the confidence cut, for every class.
    pub counts: BTreeMap<usize, ClassCounts>,
    pub conf_thresh: f64,
    pub iou_thresh: f64,
    pub num_images: usize,
    /// Precision/recall points per class, for plotting.
    pub pr_curves: BTreeMap<usize, Vec<(f64, f64)>>,
}

/// Scores `predictions[i]` against `ground_truth[i]` over the whole set.
pub fn evaluate(
    predictions: &[Vec<Detection>],
    ground_truth: &[Vec<Annotation>],
    num_classes: usize,
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    if ground_truth.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    if predictions.len() != ground_truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} images",
            predictions.len(),
            ground_truth.len()
        )));
    }
    if ground_truth.iter().all(|g| g.is_empty()) {
        return Err(Error::invalid("dataset has no annotated image"));
    }
    let mut flags: Vec<Vec<bool>> = vec![Vec::new(); num_classes];
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); num_classes];
    let mut num_gt = vec![0usize; num_classes];
    for (dets, gts) in predictions.iter().zip(ground_truth) {
        for g in gts {
            if g.class_id >= num_classes {
                return Err(Error::invalid(format!(
                    "ground-truth class {} out of range",
                    g.class_id
                )));
            }
            num_gt[g.class_id] += 1;
        }
        let matched = match_detections(dets, gts, cfg.iou_thresh);
        for (d, hit) in dets.iter().zip(matched) {
            if d.class_id >= num_classes {
                return Err(Error::invalid(format!(
                    "detection class {} out of range",
                    d.class_id
                )));
            }
            flags[d.class_id].push(hit);
            scores[d.class_id].push(d.score);
        }
    }
    let mut per_class_ap = BTreeMap::new();
    let mut pr_curves = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let (mut tp_all, mut fp_all) = (0, 0);
    for c in 0..num_classes {
        if num_gt[c] > 0 {
            per_class_ap.insert(c, average_precision(&flags[c], &scores[c], num_gt[c]));
            pr_curves.insert(c, pr_points(&flags[c], &scores[c], num_gt[c]));
        }
        let mut cc = ClassCounts::default();
        for (f, s) in flags[c].iter().zip(&scores[c]) {
            if *s >= cfg.conf_thresh {
                if *f {
                    cc.tp += 1;
                } else {
                    cc.fp += 1;
                }
            }
        }
        cc.fn_ = num_gt[c] - cc.tp;
        tp_all += cc.tp;
        fp_all += cc.fp;
        counts.insert(c, cc);
    }
    let total_gt: usize = num_gt.iter().sum();
    let map50 = per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64;
    Ok(EvalResult {
        version: REPORT_VERSION,
        per_class_ap,
        map50,
        precision: if tp_all + fp_all == 0 {
            0.0
        } else {
            tp_all as f64 / (tp_all + fp_all) as f64
        },
        recall: tp_all as f64 / total_gt as f64,
        counts,
        conf_thresh: cfg.conf_thresh,
        iou_thresh: cfg.iou_thresh,
        num_images: ground_truth.len(),
        pr_curves,
    })
}

/// Writes `report.json` into `dir`; with `plots`, also a precision/recall
/// chart and one chart per entry of `loss_curves`. Returns the written paths.
pub fn emit_report(
    result: &EvalResult,
    dir: &Path,
    plots: bool,
    loss_curves: &BTreeMap<String, Vec<f64>>,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join("report.json");
    let text = serde_json::to_string_pretty(result)?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    let mut written = vec![json_path];
    if plots {
        let series: Vec<Series> = result
            .pr_curves
            .iter()
            .map(|(c, pts)| Series {
                label: format!("class {c}"),
                points: pts.clone(),
            })
            .collect();
        let path = dir.join("pr_curve.png");
        plot_curves(&series, (0.0, 1.0), (0.0, 1.0), &path)?;
        written.push(path);
        for (name, values) in loss_curves {
            let path = dir.join(format!("loss_{name}.png"));
            let points: Vec<(f64, f64)> = values
                .iter()
                .enumerate()
                .map(|(i, v)| (i as f64, *v))
                .collect();
            let x_max = (values.len().max(2) - 1) as f64;
            let y_max = values.iter().cloned().fold(0.0, f64::max).max(1e-12);
            plot_curves(
                &[Series {
                    label: name.clone(),
                    points,
                }],
                (0.0, x_max),
                (0.0, y_max),
                &path,
            )?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::BBox;

    fn gt(x: f64, c: usize) -> Annotation {
        Annotation {
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(),
            class_id: c,
        }
    }

    fn det(x: f64, c: usize, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(),
            class_id: c,
            score,
        }
    }

    #[test]
    fn matching_fixtures() {
        assert_eq!(
            match_detections(&[det(0.0, 0, 0.9)], &[gt(0.0, 0)], 0.5),
            vec![true]
        );
        let two = match_detections(&[det(0.0, 0, 0.8), det(0.0, 0, 0.9)], &[gt(0.0, 0)], 0.5);
        assert_eq!(two, vec![false, true]);
        // shifted 3.8 px: IoU = 6.2 / 13.8 ≈ 0.449
        let d = det(3.8, 0, 0.9);
        assert!((d.bbox.iou(&gt(0.0, 0).bbox) - 0.45).abs() < 0.01);
        assert_eq!(match_detections(&[d], &[gt(0.0, 0)], 0.5), vec![false]);
        assert_eq!(
            match_detections(&[det(0.0, 1, 0.9)], &[gt(0.0, 0)], 0.5),
            vec![false]
        );
    }

    #[test]
    fn ap_fixtures() {
        assert_eq!(average_precision(&[true, true], &[0.9, 0.8], 2), 1.0);
        assert_eq!(average_precision(&[], &[], 3), 0.0);
        // TP, FP, TP: points (0.5, 1), (0.5, 0.5), (1, 2/3)
        let ap = average_precision(&[true, false, true], &[0.9, 0.8, 0.7], 2);
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(average_precision(&[false], &[0.4], 0), 0.0);
    }

    #[test]
    fn evaluate_oracle_and_empty_detectors() {
        let gts = vec![vec![gt(0.0, 0), gt(20.0, 1)], vec![gt(5.0, 2)]];
        let perfect: Vec<Vec<Detection>> = gts
            .iter()
            .map(|g| {
                g.iter()
                    .map(|a| Detection {
                        bbox: a.bbox,
                        class_id: a.class_id,
                        score: 1.0,
                    })
                    .collect()
            })
            .collect();
        let r = evaluate(&perfect, &gts, 3, &EvalConfig::default()).unwrap();
        assert_eq!((r.map50, r.precision, r.recall), (1.0, 1.0, 1.0));
        let r = evaluate(&[vec![], vec![]], &gts, 3, &EvalConfig::default()).unwrap();
        assert_eq!((r.map50, r.recall, r.precision), (0.0, 0.0, 0.0));
        assert_eq!(r.counts[&2].fn_, 1);
        assert!(evaluate(&[], &[], 3, &EvalConfig::default()).is_err());
    }

    #[test]
    fn map_ignores_classes_without_ground_truth() {
        let gts = vec![vec![gt(0.0, 0)]];
        let preds = vec![vec![det(0.0, 0, 0.9), det(40.0, 1, 0.8)]];
        let r = evaluate(&preds, &gts, 2, &EvalConfig::default()).unwrap();
        assert_eq!(r.per_class_ap.len(), 1);
        assert_eq!(r.map50, 1.0);
        assert_eq!(r.precision, 0.5);
    }

    #[test]
    fn report_round_trip_and_file_count() {
        let dir = tempfile::tempdir().unwrap();
        let gts = vec![vec![gt(0.0, 0), gt(20.0, 1)]];
        let preds = vec![vec![det(0.0, 0, 0.9), det(21.0, 1, 0.7), det(50.0, 1, 0.6)]];
        let r = evaluate(&preds, &gts, 2, &EvalConfig::default()).unwrap();
        let files = emit_report(&r, dir.path(), false, &BTreeMap::new()).unwrap();
        assert_eq!(files.len(), 1);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        let back: EvalResult =
            serde_json::from_str(&fs::read_to_string(&files[0]).unwrap()).unwrap();
        assert!((back.map50 - r.map50).abs() < 1e-9);
        assert_eq!(back.counts, r.counts);

        let curves: BTreeMap<String, Vec<f64>> = ["box", "obj", "cls", "dgrl"]
            .iter()
            .map(|k| (k.to_string(), vec![1.0, 0.7, 0.5, 0.45]))
            .collect();
        let plots = tempfile::tempdir().unwrap();
        let files = emit_report(&r, plots.path(), true, &curves).unwrap();
        assert_eq!(files.len(), 1 + 1 + 4);
        assert!(files.iter().all(|f| f.exists()));
    }
}
