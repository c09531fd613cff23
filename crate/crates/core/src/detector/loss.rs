use std::cmp::Ordering;
use std::collections::HashSet;
use std::f64::consts::PI;

use amieod_autograd::{Tape, Tensor, Var};

use super::{DetectorConfig, RawPredictions};
use crate::error::{Error, Result};
use crate::primitives::{Annotation, BBox, LossBreakdown};

const CIOU_EPS: f64 = 1e-12;

/// A ground-truth object bound to one anchor of one grid cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assignment {
    pub anchor: usize,
    pub gy: usize,
    pub gx: usize,
    pub target: Annotation,
}

fn canonical(a: &Annotation, b: &Annotation) -> Ordering {
    a.class_id
        .cmp(&b.class_id)
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
        .then(a.bbox.x2.total_cmp(&b.bbox.x2))
        .then(a.bbox.y2.total_cmp(&b.bbox.y2))
}

/// Anchor index whose shape best overlaps `(w, h)` when both are centred;
/// ties go to the lowest index.
fn best_anchor(anchors: &[[f64; 2]], w: f64, h: f64) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, a) in anchors.iter().enumerate() {
        let inter = a[0].min(w) * a[1].min(h);
        let iou = inter / (a[0] * a[1] + w * h - inter);
        if iou > best.1 {
            best = (i, iou);
        }
    }
    best.0
}

/// Assigns each object to the cell containing its centre and the anchor of
/// best shape overlap. Objects are visited in a canonical order so the result
/// does not depend on input order; a slot already taken keeps its first owner.
pub fn assign(
    gts: &[Annotation],
    cfg: &DetectorConfig,
    grid_h: usize,
    grid_w: usize,
) -> Vec<Assignment> {
    let mut sorted = gts.to_vec();
    sorted.sort_by(canonical);
    let s = cfg.grid_stride as f64;
    let mut taken = HashSet::new();
    let mut out = Vec::with_capacity(sorted.len());
    for gt in sorted {
        let (cx, cy) = gt.bbox.center();
        let gx = ((cx / s).floor().max(0.0) as usize).min(grid_w - 1);
        let gy = ((cy / s).floor().max(0.0) as usize).min(grid_h - 1);
        let anchor = best_anchor(&cfg.anchors, gt.bbox.width(), gt.bbox.height());
        if taken.insert((anchor, gy, gx)) {
            out.push(Assignment {
                anchor,
                gy,
                gx,
                target: gt,
            });
        }
    }
    out
}

/// Differentiable loss components of one image.
#[derive(Clone, Copy)]
pub struct LossTerms<'t> {
    pub box_loss: Var<'t>,
    pub obj_loss: Var<'t>,
    pub cls_loss: Var<'t>,
    pub total: Var<'t>,
}

impl LossTerms<'_> {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            box_loss: self.box_loss.item(),
            obj_loss: self.obj_loss.item(),
            cls_loss: self.cls_loss.item(),
            total: self.total.item(),
        }
    }
}

fn vmin<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    a.neg().maximum(b.neg()).neg()
}

/// CIoU between predicted centre-form boxes and fixed targets, elementwise.
fn ciou_var<'t>(cx: Var<'t>, cy: Var<'t>, w: Var<'t>, h: Var<'t>, gt: &[BBox]) -> Var<'t> {
    let tape = cx.tape();
    let n = gt.len();
    let col =
        |f: &dyn Fn(&BBox) -> f64| tape.constant(Tensor::new([n], gt.iter().map(f).collect()));
    let (gx1, gy1, gx2, gy2) = (
        col(&|b| b.x1),
        col(&|b| b.y1),
        col(&|b| b.x2),
        col(&|b| b.y2),
    );
    let g_area = col(&|b| b.area());
    let g_cx = col(&|b| b.center().0);
    let g_cy = col(&|b| b.center().1);
    let g_atan = col(&|b| (b.width() / b.height()).atan());

    let (hw, hh) = (w.mul_scalar(0.5), h.mul_scalar(0.5));
    let (px1, px2, py1, py2) = (cx.sub(hw), cx.add(hw), cy.sub(hh), cy.add(hh));
    let iw = vmin(px2, gx2).sub(px1.maximum(gx1)).relu();
    let ih = vmin(py2, gy2).sub(py1.maximum(gy1)).relu();
    let inter = iw.mul(ih);
    let union = w.mul(h).add(g_area).sub(inter).add_scalar(CIOU_EPS);
    let iou = inter.div(union);

    let cw = px2.maximum(gx2).sub(vmin(px1, gx1));
    let ch = py2.maximum(gy2).sub(vmin(py1, gy1));
    let c2 = cw.square().add(ch.square()).add_scalar(CIOU_EPS);
    let rho2 = cx.sub(g_cx).square().add(cy.sub(g_cy).square());

    let v = g_atan
        .sub(w.div(h).atan())
        .square()
        .mul_scalar(4.0 / (PI * PI));
    let alpha = v.div(v.sub(iou).add_scalar(1.0 + CIOU_EPS));
    iou.sub(rho2.div(c2)).sub(alpha.mul(v))
}

fn check_targets(gts: &[Annotation], cfg: &DetectorConfig) -> Result<()> {
    for gt in gts {
        gt.bbox.validate()?;
        if gt.class_id >= cfg.num_classes {
            return Err(Error::invalid(format!(
                "class {} out of range for {} classes",
                gt.class_id, cfg.num_classes
            )));
        }
    }
    Ok(())
}

/// Loss of image `index` within a batched head output
/// `raw: [N, anchors * (5 + classes), grid_h, grid_w]`.
///
/// Box loss is the mean of `1 - CIoU` over assigned slots, objectness is
/// binary cross-entropy averaged over every anchor slot, and class loss is
/// binary cross-entropy averaged over assigned slots and classes.
pub fn image_loss<'t>(
    raw: Var<'t>,
    index: usize,
    gts: &[Annotation],
    cfg: &DetectorConfig,
) -> Result<LossTerms<'t>> {
    check_targets(gts, cfg)?;
    let shape = raw.shape();
    let (na, nf) = (cfg.num_anchors(), cfg.fields());
    if shape.len() != 4 || shape[1] != na * nf || index >= shape[0] {
        return Err(Error::invalid(format!(
            "head output {shape:?} does not match {na} anchors x {nf} fields"
        )));
    }
    let (gh, gw) = (shape[2], shape[3]);
    let base = index * na * nf * gh * gw;
    let at = |a: usize, f: usize, y: usize, x: usize| base + ((a * nf + f) * gh + y) * gw + x;
    let tape = raw.tape();
    let slots = (na * gh * gw) as f64;

    let obj_idx: Vec<usize> = (0..na)
        .flat_map(|a| (0..gh).flat_map(move |y| (0..gw).map(move |x| (a, y, x))))
        .map(|(a, y, x)| at(a, 4, y, x))
        .collect();
    let mut obj_loss = raw.gather(&obj_idx).softplus().sum();

    let assigned = assign(gts, cfg, gh, gw);
    let zero = || tape.constant(Tensor::scalar(0.0));
    let (box_loss, cls_loss) = if assigned.is_empty() {
        (zero(), zero())
    } else {
        let field = |f: usize| -> Var<'t> {
            let idx: Vec<usize> = assigned
                .iter()
                .map(|p| at(p.anchor, f, p.gy, p.gx))
                .collect();
            raw.gather(&idx)
        };
        obj_loss = obj_loss.sub(field(4).sum());

        let n = assigned.len();
        let s = cfg.grid_stride as f64;
        let consts = |f: &dyn Fn(&Assignment) -> f64| {
            tape.constant(Tensor::new([n], assigned.iter().map(f).collect()))
        };
        let cx = field(0)
            .sigmoid()
            .mul_scalar(2.0)
            .add(consts(&|p| p.gx as f64 - 0.5))
            .mul_scalar(s);
        let cy = field(1)
            .sigmoid()
            .mul_scalar(2.0)
            .add(consts(&|p| p.gy as f64 - 0.5))
            .mul_scalar(s);
        let w = field(2)
            .sigmoid()
            .mul_scalar(2.0)
            .square()
            .mul(consts(&|p| cfg.anchors[p.anchor][0]));
        let h = field(3)
            .sigmoid()
            .mul_scalar(2.0)
            .square()
            .mul(consts(&|p| cfg.anchors[p.anchor][1]));
        let targets: Vec<BBox> = assigned.iter().map(|p| p.target.bbox).collect();
        let box_loss = ciou_var(cx, cy, w, h, &targets).rsub_scalar(1.0).mean();

        let c = cfg.num_classes;
        let cls_idx: Vec<usize> = assigned
            .iter()
            .flat_map(|p| (0..c).map(move |k| (p, k)))
            .map(|(p, k)| at(p.anchor, 5 + k, p.gy, p.gx))
            .collect();
        let hit_idx: Vec<usize> = assigned
            .iter()
            .map(|p| at(p.anchor, 5 + p.target.class_id, p.gy, p.gx))
            .collect();
        let cls_loss = raw
            .gather(&cls_idx)
            .softplus()
            .sum()
            .sub(raw.gather(&hit_idx).sum())
            .mul_scalar(1.0 / (n * c) as f64);
        (box_loss, cls_loss)
    };
    let obj_loss = obj_loss.mul_scalar(1.0 / slots);
    let lw = cfg.loss_weights;
    let total = box_loss
        .mul_scalar(lw.box_weight)
        .add(obj_loss.mul_scalar(lw.obj_weight))
        .add(cls_loss.mul_scalar(lw.cls_weight));
    Ok(LossTerms {
        box_loss,
        obj_loss,
        cls_loss,
        total,
    })
}

/// Loss breakdown of one image's predictions.
pub fn detection_loss(
    raw: &RawPredictions,
    gts: &[Annotation],
    cfg: &DetectorConfig,
) -> Result<LossBreakdown> {
    let (gh, gw) = raw.grid();
    let tape = Tape::new();
    let x = tape.constant(
        raw.data
            .clone()
            .reshape([1, cfg.num_anchors() * cfg.fields(), gh, gw]),
    );
    Ok(image_loss(x, 0, gts, cfg)?.breakdown())
}
