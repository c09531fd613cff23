//! Enhancement experts and their fan-out forward.
//!
//! Index 0 is the untouched input; 1, 2 and 3 are the frozen curve enhancer,
//! its trainable twin and the adaptive filter pipeline, in that order.

pub mod curve;
pub mod dip;
pub mod pp;

use amieod_autograd::{Tape, Var};
use rand::Rng;

pub use curve::{curve_enhance, CurveEnhancer, ILLUMINATION_EPS};
pub use dip::{dip_apply, dip_apply_ordered, DipStage, ParamVector15, DEFAULT_ORDER, PARAM_LEN};
pub use pp::{pp_forward, PPNet};

use crate::error::{Error, Result};
use crate::nn::Net;
use crate::primitives::Image;

/// Number of enhancement experts, excluding the identity.
pub const NUM_EXPERTS: usize = 3;
/// Number of routable choices, identity included.
pub const NUM_CHOICES: usize = NUM_EXPERTS + 1;

pub const EXPERT_NAMES: [&str; NUM_CHOICES] = ["original", "piem", "jiem", "iaem"];

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBundle {
    pub piem: CurveEnhancer,
    pub jiem: CurveEnhancer,
    pub iaem: PPNet,
    pub dip_order: Vec<DipStage>,
}

/// The experts bound onto one tape.
pub struct ExpertNets<'t, 'p> {
    pub piem: Net<'t, 'p>,
    pub jiem: Net<'t, 'p>,
    pub iaem: Net<'t, 'p>,
}

impl ExpertBundle {
    /// Fresh experts; the twin starts as a copy of the frozen enhancer.
    pub fn new(curve_width: usize, pp_input: usize, rng: &mut impl Rng) -> Self {
        let piem = CurveEnhancer::new(curve_width, true, rng);
        Self::from_pretrained(piem, pp_input, rng)
    }

    pub fn from_pretrained(piem: CurveEnhancer, pp_input: usize, rng: &mut impl Rng) -> Self {
        let piem = CurveEnhancer {
            frozen: true,
            ..piem
        };
        let jiem = piem.trainable_twin();
        Self {
            piem,
            jiem,
            iaem: PPNet::new(pp_input, rng),
            dip_order: DEFAULT_ORDER.to_vec(),
        }
    }

    pub fn n(&self) -> usize {
        NUM_EXPERTS
    }

    /// `train` enables gradients and batch statistics on the trainable experts.
    pub fn bind<'t, 'p>(&'p self, tape: &'t Tape, train: bool) -> ExpertNets<'t, 'p> {
        ExpertNets {
            piem: self.piem.bind(tape, train),
            jiem: self.jiem.bind(tape, train),
            iaem: self.iaem.bind(tape, train),
        }
    }

    /// Output of choice `k` for `x: [N, 3, H, W]`.
    pub fn forward_one<'t>(
        &self,
        nets: &ExpertNets<'t, '_>,
        x: Var<'t>,
        k: usize,
    ) -> Result<Var<'t>> {
        match k {
            0 => Ok(x),
            1 => self.piem.forward(&nets.piem, x),
            2 => self.jiem.forward(&nets.jiem, x),
            3 => {
                let p = self.iaem.forward(&nets.iaem, x)?;
                Ok(dip::dip_forward(x, p, &self.dip_order))
            }
            _ => Err(Error::invalid(format!(
                "expert index {k} out of range 0..={NUM_EXPERTS}"
            ))),
        }
    }

    /// `[x, piem(x), jiem(x), iaem(x)]`.
    pub fn forward_all<'t>(&self, nets: &ExpertNets<'t, '_>, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        (0..NUM_CHOICES)
            .map(|k| self.forward_one(nets, x, k))
            .collect()
    }
}

/// Applies choice `k` to one image in inference mode.
pub fn apply_expert(image: &Image, experts: &ExpertBundle, k: usize) -> Result<Image> {
    if k == 0 {
        return Ok(image.clone());
    }
    let tape = Tape::new();
    let nets = experts.bind(&tape, false);
    let y = experts.forward_one(&nets, tape.constant(image.batched()), k)?;
    let t = (*y.value()).clone();
    Image::from_tensor_clamped(t.reshape([3, image.height(), image.width()]))
}

/// The original image followed by every expert's output.
pub fn meiem_forward(image: &Image, experts: &ExpertBundle) -> Result<Vec<Image>> {
    (0..NUM_CHOICES)
        .map(|k| apply_expert(image, experts, k))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Image {
        Image::from_fn(36, 40, |c, y, x| {
            ((c * 5 + y * 3 + x * 7) % 17) as f64 / 16.0
        })
        .unwrap()
    }

    #[test]
    fn four_outputs_in_range_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let experts = ExpertBundle::new(8, 64, &mut rng);
        let img = sample();
        let out = meiem_forward(&img, &experts).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out[0], img);
        for o in &out {
            assert_eq!((o.height(), o.width()), (36, 40));
            assert!(o.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn zeroed_experts_compose_single_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut experts = ExpertBundle::new(8, 64, &mut rng);
        experts.piem.zero_head();
        experts.jiem.zero_head();
        experts.iaem.zero_all();
        let img = sample();
        let out = meiem_forward(&img, &experts).unwrap();
        assert_eq!(out[1], curve_enhance(&img, &experts.piem).unwrap());
        assert_eq!(out[2], out[1]);
        let p = pp_forward(&img, &experts.iaem).unwrap();
        assert_eq!(out[3], dip_apply(&img, &p).unwrap());
    }

    #[test]
    fn twin_starts_equal_but_trainable() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let experts = ExpertBundle::new(8, 64, &mut rng);
        assert!(experts.piem.frozen && !experts.jiem.frozen);
        assert_eq!(experts.piem.params, experts.jiem.params);
    }
}
