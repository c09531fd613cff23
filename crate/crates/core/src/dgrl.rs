//! Detection-guided target selection and the regression loss that pulls
//! every expert output toward the gradient-stopped best one.

use amieod_autograd::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::primitives::{Image, LossBreakdown};

/// Detection losses of the original image and each expert output.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertLossTable {
    pub per_expert_total: Vec<f64>,
    pub breakdowns: Vec<LossBreakdown>,
}

impl ExpertLossTable {
    pub fn new(breakdowns: Vec<LossBreakdown>) -> Result<Self> {
        let table = Self {
            per_expert_total: breakdowns.iter().map(|b| b.total).collect(),
            breakdowns,
        };
        table.validate()?;
        Ok(table)
    }

    /// A table carrying totals only.
    pub fn from_totals(totals: &[f64]) -> Result<Self> {
        Self::new(
            totals
                .iter()
                .map(|&total| LossBreakdown {
                    total,
                    ..LossBreakdown::default()
                })
                .collect(),
        )
    }

    fn validate(&self) -> Result<()> {
        if self.per_expert_total.is_empty() {
            return Err(Error::invalid("empty expert loss table"));
        }
        for (k, v) in self.per_expert_total.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::numerical(
                    "expert loss table",
                    format!("entry {k} is {v}"),
                ));
            }
            if *v < 0.0 {
                return Err(Error::invalid(format!(
                    "negative detection loss {v} at {k}"
                )));
            }
        }
        Ok(())
    }

    /// Number of experts, excluding the original image.
    pub fn n(&self) -> usize {
        self.per_expert_total.len() - 1
    }
}

/// Index of the smallest entry; ties go to the lowest index.
pub fn argmin(values: &[f64]) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::invalid("argmin of an empty list"));
    }
    if let Some(k) = values.iter().position(|v| v.is_nan()) {
        return Err(Error::numerical(
            "target selection",
            format!("entry {k} is NaN"),
        ));
    }
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = k;
        }
    }
    Ok(best)
}

pub fn select_best(table: &ExpertLossTable) -> Result<usize> {
    argmin(&table.per_expert_total)
}

/// Per-sample regression loss for batched outputs.
///
/// `outputs[k]` is `[N, C, H, W]` for choice `k = 0..=n`; `best[i]` is the
/// selected index of sample `i`. Returns `[N]` where entry `i` is
/// `(1/n) * sum_k mean|outputs[k][i] - outputs[best[i]][i]|` with the target
/// held constant. The selected term is identically zero and so is its
/// gradient.
pub fn dgrl_var<'t>(outputs: &[Var<'t>], best: &[usize]) -> Result<Var<'t>> {
    if outputs.len() < 2 {
        return Err(Error::invalid("regression loss needs at least one expert"));
    }
    let shape = outputs[0].shape();
    if shape.len() != 4 || outputs.iter().any(|o| o.shape() != shape) {
        return Err(Error::invalid("expert outputs differ in shape"));
    }
    let n_samples = shape[0];
    if best.len() != n_samples || best.iter().any(|&b| b >= outputs.len()) {
        return Err(Error::invalid("selected indices do not match the batch"));
    }
    let per_sample = shape[1] * shape[2] * shape[3];
    let mut target = Vec::with_capacity(n_samples * per_sample);
    for (i, &b) in best.iter().enumerate() {
        let v = outputs[b].value();
        target.extend_from_slice(&v.data()[i * per_sample..(i + 1) * per_sample]);
    }
    let tape = outputs[0].tape();
    let target = tape.constant(Tensor::new(shape.clone(), target));
    let n = (outputs.len() - 1) as f64;
    let mut sum: Option<Var<'t>> = None;
    for o in outputs {
        let term = o.sub(target).abs().mean_axes(&[1, 2, 3]);
        sum = Some(match sum {
            Some(s) => s.add(term),
            None => term,
        });
    }
    Ok(sum
        .expect("nonempty")
        .mul_scalar(1.0 / n)
        .reshape(&[n_samples]))
}

/// Regression loss of one image and its expert outputs against choice `b`.
pub fn dgrl_loss(images: &[Image], b: usize) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid("no images"));
    }
    let dims = (images[0].height(), images[0].width());
    if images.iter().any(|im| (im.height(), im.width()) != dims) {
        return Err(Error::invalid("images differ in shape"));
    }
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = images
        .iter()
        .map(|im| tape.constant(im.batched()))
        .collect();
    Ok(dgrl_var(&vars, &[b])?.item())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// `(1 - alpha) * dgrl + alpha / (n + 1) * sum_k total_k`.
pub fn stage1_loss(dgrl: f64, table: &ExpertLossTable, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let count = table.per_expert_total.len() as f64;
    let det: f64 = table.per_expert_total.iter().sum();
    Ok((1.0 - alpha) * dgrl + alpha / count * det)
}

/// Differentiable form of [`stage1_loss`] over per-choice detection losses.
pub fn stage1_loss_var<'t>(dgrl: Var<'t>, detection: &[Var<'t>], alpha: f64) -> Result<Var<'t>> {
    check_alpha(alpha)?;
    if detection.is_empty() {
        return Err(Error::invalid("no detection losses"));
    }
    let mut det = detection[0];
    for d in &detection[1..] {
        det = det.add(*d);
    }
    Ok(dgrl
        .mul_scalar(1.0 - alpha)
        .add(det.mul_scalar(alpha / detection.len() as f64)))
}
