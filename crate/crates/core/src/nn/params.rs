//! Named weight storage and its binding onto a tape.

use std::cell::RefCell;

use amieod_autograd::{Gradients, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

/// An ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub const fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Panics if `name` is absent; network code only asks for names it created.
    pub fn expect(&self, name: &str) -> &Tensor {
        self.get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Sets every value to zero.
    pub fn zero_all(&mut self) {
        for (_, t) in &mut self.entries {
            t.data_mut().fill(0.0);
        }
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Binds every tensor onto `tape`, as gradient leaves when `trainable`.
    pub fn bind<'t, 'p>(&'p self, tape: &'t Tape, trainable: bool) -> Bound<'t, 'p> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { set: self, vars }
    }
}

/// A [`ParamSet`] recorded on a tape.
pub struct Bound<'t, 'p> {
    set: &'p ParamSet,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t, '_> {
    pub fn var(&self, name: &str) -> Var<'t> {
        let idx = self
            .set
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"));
        self.vars[idx]
    }

    pub fn try_var(&self, name: &str) -> Option<Var<'t>> {
        self.set
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| self.vars[i])
    }

    /// Gradients aligned with the bound set's order.
    pub fn grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| grads.get(*v).cloned()).collect()
    }
}

/// Batch-norm behaviour for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics and record them.
    Train,
    /// Normalize with running statistics.
    Eval,
}

/// Batch statistics observed by one normalization layer.
#[derive(Clone, Debug)]
pub struct BnObservation {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Everything a network forward needs: bound parameters, buffers, mode.
pub struct Net<'t, 'p> {
    pub tape: &'t Tape,
    pub params: Bound<'t, 'p>,
    pub buffers: &'p ParamSet,
    pub mode: Mode,
    observed: RefCell<Vec<BnObservation>>,
}

impl<'t, 'p> Net<'t, 'p> {
    pub fn bind(
        tape: &'t Tape,
        params: &'p ParamSet,
        buffers: &'p ParamSet,
        trainable: bool,
        mode: Mode,
    ) -> Self {
        Self {
            tape,
            params: params.bind(tape, trainable),
            buffers,
            mode,
            observed: RefCell::new(Vec::new()),
        }
    }

    pub fn var(&self, name: &str) -> Var<'t> {
        self.params.var(name)
    }

    pub(crate) fn observe(&self, obs: BnObservation) {
        self.observed.borrow_mut().push(obs);
    }

    /// Batch statistics recorded in [`Mode::Train`].
    pub fn take_observations(&self) -> Vec<BnObservation> {
        std::mem::take(&mut *self.observed.borrow_mut())
    }
}

/// Blends observed batch statistics into running buffers.
pub fn update_running_stats(buffers: &mut ParamSet, observed: &[BnObservation], momentum: f64) {
    for obs in observed {
        for (suffix, values) in [("running_mean", &obs.mean), ("running_var", &obs.var)] {
            let name = format!("{}.{suffix}", obs.prefix);
            if let Some(t) = buffers.get_mut(&name) {
                for (r, v) in t.data_mut().iter_mut().zip(values.iter()) {
                    *r = (1.0 - momentum) * *r + momentum * v;
                }
            }
        }
    }
}

/// Kaiming-normal initialization for a weight with `fan_in` inputs.
pub fn kaiming(shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> Tensor {
    let std = gain / (fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape.to_vec(), |_| normal.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_tracks_bits() {
        let mut a = ParamSet::new();
        a.insert("w", Tensor::new([2], vec![1.0, 2.0]));
        let d0 = a.digest();
        a.get_mut("w").unwrap().data_mut()[1] = 2.0 + f64::EPSILON * 2.0;
        assert_ne!(a.digest(), d0);
        a.insert("w", Tensor::new([2], vec![1.0, 2.0]));
        assert_eq!(a.digest(), d0);
        assert_eq!(a.len(), 1);
    }
}
