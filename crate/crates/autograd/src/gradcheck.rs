//! Central finite-difference gradient checking for tests.

use crate::{Tape, Tensor, Var};

/// One compared coordinate.
#[derive(Clone, Debug)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Evaluates `f` at `inputs` with every input as a leaf.
pub fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    f(&tape, &vars).item()
}

/// Analytic gradients of `f` with respect to every input.
pub fn analytic<F>(f: &F, inputs: &[Tensor]) -> Vec<Tensor>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(out);
    vars.iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect()
}

/// Central difference of `f` along one coordinate.
pub fn numeric_partial<F>(f: &F, inputs: &[Tensor], input: usize, index: usize, step: f64) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let mut plus = inputs.to_vec();
    plus[input].data_mut()[index] += step;
    let mut minus = inputs.to_vec();
    minus[input].data_mut()[index] -= step;
    (eval_scalar(f, &plus) - eval_scalar(f, &minus)) / (2.0 * step)
}

/// Relative error with an absolute floor so that near-zero gradients compare
/// on an absolute scale.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares analytic and numeric partials at the given coordinates and
/// returns every comparison.
pub fn compare<F>(
    f: &F,
    inputs: &[Tensor],
    coords: &[(usize, usize)],
    step: f64,
    floor: f64,
) -> Vec<Mismatch>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let grads = analytic(f, inputs);
    coords
        .iter()
        .map(|&(input, index)| {
            let a = grads[input].data()[index];
            let n = numeric_partial(f, inputs, input, index, step);
            Mismatch {
                input,
                index,
                analytic: a,
                numeric: n,
                rel_error: rel_error(a, n, floor),
            }
        })
        .collect()
}

/// Compares every coordinate of every input.
pub fn compare_all<F>(f: &F, inputs: &[Tensor], step: f64, floor: f64) -> Vec<Mismatch>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    compare(f, inputs, &coords, step, floor)
}
