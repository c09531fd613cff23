use std::collections::HashMap;

use amieod_autograd::Tensor;

use super::params::ParamSet;

/// SGD with heavy-ball momentum. L2 weight decay applies to tensors of
/// rank ≥ 2 only (convolution and linear weights).
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Applies one update to `params` (belonging to `group`) using gradients
    /// aligned with the set's order. Missing gradients count as zero.
    pub fn step(&mut self, group: &str, params: &mut ParamSet, grads: &[Option<Tensor>]) {
        assert_eq!(params.len(), grads.len(), "gradient list misaligned");
        for ((name, w), g) in params.iter_mut().zip(grads) {
            let decay = if w.rank() >= 2 {
                self.weight_decay
            } else {
                0.0
            };
            let key = format!("{group}/{name}");
            let v = self
                .velocity
                .entry(key)
                .or_insert_with(|| Tensor::zeros(w.shape().to_vec()));
            let (vd, wd) = (v.data_mut(), w.data_mut());
            for i in 0..wd.len() {
                let gi = g.as_ref().map_or(0.0, |g| g.data()[i]) + decay * wd[i];
                vd[i] = self.momentum * vd[i] + gi;
                wd[i] -= self.lr * vd[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_accumulates() {
        let mut p = ParamSet::new();
        p.insert("b", Tensor::new([1], vec![1.0]));
        let mut opt = Sgd::new(0.1, 0.5, 0.0);
        let g = vec![Some(Tensor::new([1], vec![1.0]))];
        opt.step("m", &mut p, &g);
        assert!((p.expect("b").item() - 0.9).abs() < 1e-15);
        opt.step("m", &mut p, &g);
        // v = 0.5 * 1 + 1 = 1.5
        assert!((p.expect("b").item() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new([1, 2], vec![0.3, -0.7]));
        let before = p.clone();
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        opt.step("m", &mut p, &[None]);
        assert_eq!(p, before);
    }
}
