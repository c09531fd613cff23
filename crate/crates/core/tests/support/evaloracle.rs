//! Random evaluation scenes and a brute-force AP reference.

use amieod::{Annotation, BBox, Detection};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CLASSES: usize = 3;

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.random_range(0.0..80.0);
    let y = rng.random_range(0.0..80.0);
    let w = rng.random_range(4.0..20.0);
    let h = rng.random_range(4.0..20.0);
    BBox::new(x, y, x + w, y + h).unwrap()
}

pub fn scene(seed: u64) -> (Vec<Vec<Detection>>, Vec<Vec<Annotation>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = rng.random_range(1..5);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..images {
        let g: Vec<Annotation> = (0..rng.random_range(0..5))
            .map(|_| Annotation {
                bbox: random_box(&mut rng),
                class_id: rng.random_range(0..CLASSES),
            })
            .collect();
        let mut d = Vec::new();
        for a in &g {
            // jittered copies so that some match and some do not
            if rng.random_bool(0.7) {
                let j = rng.random_range(-4.0..4.0);
                d.push(Detection {
                    bbox: BBox::new(a.bbox.x1 + j, a.bbox.y1, a.bbox.x2 + j, a.bbox.y2).unwrap(),
                    class_id: if rng.random_bool(0.85) {
                        a.class_id
                    } else {
                        rng.random_range(0..CLASSES)
                    },
                    score: rng.random_range(0.0..1.0),
                });
            }
        }
        for _ in 0..rng.random_range(0..4) {
            d.push(Detection {
                bbox: random_box(&mut rng),
                class_id: rng.random_range(0..CLASSES),
                score: rng.random_range(0.0..1.0),
            });
        }
        preds.push(d);
        gts.push(g);
    }
    if gts.iter().all(|g| g.is_empty()) {
        gts[0].push(Annotation {
            bbox: random_box(&mut rng),
            class_id: 0,
        });
    }
    (preds, gts)
}

/// From-scratch rematching at every threshold: keep detections scoring at
/// least `t`, walk them from highest score, claim the best unclaimed GT.
pub fn oracle_ap(preds: &[Vec<Detection>], gts: &[Vec<Annotation>], class: usize) -> Option<f64> {
    let num_gt = gts.iter().flatten().filter(|a| a.class_id == class).count();
    if num_gt == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = preds
        .iter()
        .flatten()
        .filter(|d| d.class_id == class)
        .map(|d| d.score)
        .collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut points = Vec::new();
    for &t in &thresholds {
        let (mut tp, mut fp) = (0usize, 0usize);
        for (dets, g) in preds.iter().zip(gts) {
            let mut kept: Vec<&Detection> = dets
                .iter()
                .filter(|d| d.class_id == class && d.score >= t)
                .collect();
            kept.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            let cands: Vec<&Annotation> = g.iter().filter(|a| a.class_id == class).collect();
            let mut used = vec![false; cands.len()];
            for d in kept {
                let hit = (0..cands.len())
                    .filter(|&i| !used[i] && d.bbox.iou(&cands[i].bbox) >= 0.5)
                    .max_by(|&i, &j| {
                        d.bbox
                            .iou(&cands[i].bbox)
                            .partial_cmp(&d.bbox.iou(&cands[j].bbox))
                            .unwrap()
                    });
                match hit {
                    Some(i) => {
                        used[i] = true;
                        tp += 1;
                    }
                    None => fp += 1,
                }
            }
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for i in 0..points.len() {
        let best = points[i..].iter().map(|p| p.1).fold(0.0, f64::max);
        ap += (points[i].0 - prev) * best;
        prev = points[i].0;
    }
    Some(ap)
}
