//! Parameter-prediction network: a thumbnail CNN emitting the filter vector.

use amieod_autograd::{Tape, Tensor, Var};
use rand::Rng;

use super::dip::{map_raw, raw_for, ParamVector15, PARAM_LEN};
use crate::error::Result;
use crate::nn::layers::{check_finite, conv, init_conv, init_linear, linear};
use crate::nn::{Mode, Net, ParamSet};
use crate::primitives::Image;

pub const PP_CHANNELS: [usize; 5] = [16, 32, 32, 32, 32];
pub const PP_HIDDEN: usize = 64;
pub const LEAKY_SLOPE: f64 = 0.2;

static NO_BUFFERS: ParamSet = ParamSet::new();

#[derive(Clone, Debug, PartialEq)]
pub struct PPNet {
    pub params: ParamSet,
    /// Side of the square thumbnail the input is resized to.
    pub input_size: usize,
}

fn spatial_after_blocks(mut side: usize) -> usize {
    for _ in PP_CHANNELS {
        side = (side + 2 - 3) / 2 + 1;
    }
    side
}

impl PPNet {
    /// Random convolution weights; the output bias starts at the identity
    /// filter parameters so an untrained net barely alters its input.
    pub fn new(input_size: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let mut in_ch = 3;
        for (i, &out_ch) in PP_CHANNELS.iter().enumerate() {
            init_conv(
                &mut params,
                &format!("block{i}.conv"),
                in_ch,
                out_ch,
                3,
                true,
                2f64.sqrt(),
                rng,
            );
            in_ch = out_ch;
        }
        let side = spatial_after_blocks(input_size);
        let flat = in_ch * side * side;
        init_linear(&mut params, "fc1", flat, PP_HIDDEN, 2f64.sqrt(), rng);
        init_linear(&mut params, "fc2", PP_HIDDEN, PARAM_LEN, 0.01, rng);
        let identity = ParamVector15::identity();
        // zero-width ranges can't be hit exactly; lean toward the identity end
        let bias: Vec<f64> = (0..PARAM_LEN)
            .map(|i| raw_for(i, identity.values[i]).clamp(-4.0, 4.0))
            .collect();
        params.insert("fc2.bias", Tensor::new([PARAM_LEN], bias));
        Self { params, input_size }
    }

    pub fn zero_all(&mut self) {
        self.params.zero_all();
    }

    pub fn bind<'t, 'p>(&'p self, tape: &'t Tape, train: bool) -> Net<'t, 'p> {
        let mode = if train { Mode::Train } else { Mode::Eval };
        Net::bind(tape, &self.params, &NO_BUFFERS, train, mode)
    }

    /// Unconstrained outputs `[N, 15]` for `x: [N, 3, H, W]`.
    pub fn forward_raw<'t>(&self, net: &Net<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x.resize_bilinear(self.input_size, self.input_size);
        for i in 0..PP_CHANNELS.len() {
            h = conv(net, &format!("block{i}.conv"), h, 2, 1).leaky_relu(LEAKY_SLOPE);
            check_finite(h, &format!("pp.block{i}"))?;
        }
        let shape = h.shape();
        let flat = h.reshape(&[shape[0], shape[1] * shape[2] * shape[3]]);
        let hidden = linear(net, "fc1", flat).leaky_relu(LEAKY_SLOPE);
        let raw = linear(net, "fc2", hidden);
        check_finite(raw, "pp.fc2")?;
        Ok(raw)
    }

    /// Range-mapped parameters `[N, 15]`.
    pub fn forward<'t>(&self, net: &Net<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(map_raw(self.forward_raw(net, x)?))
    }
}

/// Predicts the filter parameters for one image.
pub fn pp_forward(image: &Image, weights: &PPNet) -> Result<ParamVector15> {
    let tape = Tape::new();
    let net = weights.bind(&tape, false);
    let raw = weights.forward_raw(&net, tape.constant(image.batched()))?;
    ParamVector15::from_raw(raw.value().data())
}
