//! Building blocks shared by the enhancement, detection and routing networks.

use amieod_autograd::{Tensor, Var};
use rand::Rng;

use super::params::{kaiming, BnObservation, Mode, Net, ParamSet};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Registers a `k×k` convolution under `prefix`.
pub fn init_conv(
    params: &mut ParamSet,
    prefix: &str,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    bias: bool,
    gain: f64,
    rng: &mut impl Rng,
) {
    params.insert(
        format!("{prefix}.weight"),
        kaiming(&[out_ch, in_ch, k, k], in_ch * k * k, gain, rng),
    );
    if bias {
        params.insert(format!("{prefix}.bias"), Tensor::zeros([out_ch]));
    }
}

/// Registers a batch-norm layer: affine parameters plus running buffers.
pub fn init_bn(params: &mut ParamSet, buffers: &mut ParamSet, prefix: &str, ch: usize) {
    params.insert(format!("{prefix}.gamma"), Tensor::ones([ch]));
    params.insert(format!("{prefix}.beta"), Tensor::zeros([ch]));
    buffers.insert(format!("{prefix}.running_mean"), Tensor::zeros([ch]));
    buffers.insert(format!("{prefix}.running_var"), Tensor::ones([ch]));
}

pub fn init_linear(
    params: &mut ParamSet,
    prefix: &str,
    in_f: usize,
    out_f: usize,
    gain: f64,
    rng: &mut impl Rng,
) {
    params.insert(
        format!("{prefix}.weight"),
        kaiming(&[out_f, in_f], in_f, gain, rng),
    );
    params.insert(format!("{prefix}.bias"), Tensor::zeros([out_f]));
}

pub fn conv<'t>(net: &Net<'t, '_>, prefix: &str, x: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
    let y = x.conv2d(net.var(&format!("{prefix}.weight")), stride, pad);
    match net.params.try_var(&format!("{prefix}.bias")) {
        Some(b) => {
            let o = b.shape()[0];
            y.add(b.reshape(&[1, o, 1, 1]))
        }
        None => y,
    }
}

/// Batch normalization over `[N, C, H, W]`.
pub fn batch_norm<'t>(net: &Net<'t, '_>, prefix: &str, x: Var<'t>) -> Var<'t> {
    let gamma = net.var(&format!("{prefix}.gamma"));
    let beta = net.var(&format!("{prefix}.beta"));
    match net.mode {
        Mode::Train => {
            let (y, mean, var) = x.batch_norm(gamma, beta, BN_EPS);
            let shape = x.shape();
            let count = shape[0] * shape[2] * shape[3];
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            net.observe(BnObservation {
                prefix: prefix.to_string(),
                mean,
                var: var.iter().map(|v| v * unbias).collect(),
            });
            y
        }
        Mode::Eval => {
            let rm = net.buffers.expect(&format!("{prefix}.running_mean"));
            let rv = net.buffers.expect(&format!("{prefix}.running_var"));
            let inv = net.tape.constant(rv.map(|v| 1.0 / (v + BN_EPS).sqrt()));
            let scale = gamma.mul(inv);
            let shift = beta.sub(net.tape.constant(rm.clone()).mul(scale));
            x.channel_affine(scale, shift)
        }
    }
}

/// `x: [N, in]` → `[N, out]`.
pub fn linear<'t>(net: &Net<'t, '_>, prefix: &str, x: Var<'t>) -> Var<'t> {
    let w = net.var(&format!("{prefix}.weight"));
    let b = net.var(&format!("{prefix}.bias"));
    let out = b.shape()[0];
    x.matmul(w.transpose()).add(b.reshape(&[1, out]))
}

/// Errors when any activation of `x` is non-finite.
pub fn check_finite(x: Var<'_>, layer: &str) -> Result<()> {
    if x.value().all_finite() {
        Ok(())
    } else {
        Err(Error::numerical(layer, "non-finite activation"))
    }
}
