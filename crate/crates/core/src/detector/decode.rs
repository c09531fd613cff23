use amieod_autograd::{sigmoid, Tensor};

use super::{DetectorConfig, RawPredictions};
use crate::primitives::{BBox, Detection};

const MIN_SIDE: f64 = 1e-6;

impl RawPredictions {
    /// Splits a batched head output `[N, anchors * fields, gh, gw]`.
    pub fn from_batch(batch: &Tensor, cfg: &DetectorConfig) -> Vec<RawPredictions> {
        let (gh, gw) = (batch.dim(2), batch.dim(3));
        (0..batch.dim(0))
            .map(|i| RawPredictions {
                data: batch
                    .narrow(0, i, 1)
                    .reshape([cfg.num_anchors(), cfg.fields(), gh, gw]),
                stride: cfg.grid_stride,
            })
            .collect()
    }
}

/// Every anchor slot whose score `sigmoid(obj) * max_c sigmoid(cls_c)`
/// reaches `conf_thresh`. Scores never reach 1, so a threshold of 1 or more
/// yields nothing.
pub fn decode(raw: &RawPredictions, conf_thresh: f64, cfg: &DetectorConfig) -> Vec<Detection> {
    if conf_thresh >= 1.0 {
        return Vec::new();
    }
    let (gh, gw) = raw.grid();
    let nf = cfg.fields();
    let d = raw.data.data();
    let at = |a: usize, f: usize, y: usize, x: usize| d[((a * nf + f) * gh + y) * gw + x];
    let s = raw.stride as f64;
    let mut out = Vec::new();
    for (a, anchor) in cfg.anchors.iter().enumerate() {
        for y in 0..gh {
            for x in 0..gw {
                let obj = sigmoid(at(a, 4, y, x));
                let (class_id, cls) = (0..cfg.num_classes)
                    .map(|k| (k, sigmoid(at(a, 5 + k, y, x))))
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |best, c| if c.1 > best.1 { c } else { best },
                    );
                let score = obj * cls;
                if score < conf_thresh {
                    continue;
                }
                let cx = (2.0 * sigmoid(at(a, 0, y, x)) - 0.5 + x as f64) * s;
                let cy = (2.0 * sigmoid(at(a, 1, y, x)) - 0.5 + y as f64) * s;
                let w = (anchor[0] * (2.0 * sigmoid(at(a, 2, y, x))).powi(2)).max(MIN_SIDE);
                let h = (anchor[1] * (2.0 * sigmoid(at(a, 3, y, x))).powi(2)).max(MIN_SIDE);
                out.push(Detection {
                    bbox: BBox {
                        x1: cx - w / 2.0,
                        y1: cy - h / 2.0,
                        x2: cx + w / 2.0,
                        y2: cy + h / 2.0,
                    },
                    class_id,
                    score,
                });
            }
        }
    }
    out
}

/// Greedy per-class suppression: visiting by descending score, a detection
/// is dropped when it overlaps an already kept one of its class by at least
/// `iou_thresh`. Survivors are returned by descending score.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score).then(i.cmp(&j)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && k.bbox.iou(&d.bbox) >= iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;

    fn det(x1: f64, x2: f64, score: f64, class_id: usize) -> Detection {
        Detection {
            bbox: BBox::new(x1, 0.0, x2, 10.0).unwrap(),
            class_id,
            score,
        }
    }

    #[test]
    fn threshold_extremes() {
        let cfg = DetectorConfig::default();
        let raw = RawPredictions {
            data: Tensor::zeros([3, 8, 4, 4]),
            stride: 16,
        };
        assert!(decode(&raw, 1.0, &cfg).is_empty());
        assert_eq!(decode(&raw, 0.0, &cfg).len(), 3 * 4 * 4);
    }

    #[test]
    fn single_hot_cell() {
        let cfg = DetectorConfig::default();
        let mut data = Tensor::full([3, 8, 4, 4], -8.0);
        let idx = |a: usize, f: usize, y: usize, x: usize| ((a * 8 + f) * 4 + y) * 4 + x;
        for f in 0..4 {
            data.data_mut()[idx(1, f, 2, 3)] = 0.0;
        }
        data.data_mut()[idx(1, 4, 2, 3)] = 6.0;
        data.data_mut()[idx(1, 6, 2, 3)] = 6.0;
        let raw = RawPredictions { data, stride: 16 };
        let dets = decode(&raw, 0.5, &cfg);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class_id, 1);
        // zero offsets: centre at (x + 0.5) * s, size = anchor
        assert_eq!(
            dets[0].bbox,
            BBox::from_center(56.0, 40.0, 40.0, 40.0).unwrap()
        );
    }

    #[test]
    fn nms_fixtures() {
        let same = nms(&[det(0.0, 10.0, 0.8, 0), det(0.0, 10.0, 0.9, 0)], 0.5);
        assert_eq!(same.len(), 1);
        assert_eq!(same[0].score, 0.9);

        let disjoint = nms(&[det(0.0, 10.0, 0.9, 0), det(20.0, 30.0, 0.8, 0)], 0.5);
        assert_eq!(disjoint.len(), 2);

        // A-B and B-C overlap 0.6; A-C overlap 1/3 stays under the threshold
        let a = det(0.0, 16.0, 0.9, 0);
        let b = det(4.0, 20.0, 0.8, 0);
        let c = det(8.0, 24.0, 0.7, 0);
        assert!((a.bbox.iou(&b.bbox) - 0.6).abs() < 1e-12);
        assert!((b.bbox.iou(&c.bbox) - 0.6).abs() < 1e-12);
        assert!((a.bbox.iou(&c.bbox) - 1.0 / 3.0).abs() < 1e-12);
        let kept = nms(&[a, b, c], 0.5);
        assert_eq!(kept, vec![a, c]);
    }

    #[test]
    fn nms_is_per_class() {
        let kept = nms(&[det(0.0, 10.0, 0.9, 0), det(0.0, 10.0, 0.8, 1)], 0.5);
        assert_eq!(kept.len(), 2);
    }
}
