//! Finite-difference checks of the enhancement filters, the curve enhancer
//! and the detection loss. Each check returns its worst relative error.

use amieod::detector::{image_loss, Detector, DetectorConfig};
use amieod::enhance::dip::{
    contrast, dip_forward, gamma, map_raw, sharpen, tone, white_balance, DEFAULT_ORDER,
};
use amieod::enhance::CurveEnhancer;
use amieod::{Annotation, BBox};
use amieod_autograd::gradcheck::{compare, rel_error};
use amieod_autograd::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
pub const FILTER_TOL: f64 = 1e-3;
pub const END_TO_END_TOL: f64 = 1e-2;
const FLOOR: f64 = 1e-6;
pub const MIN_POINTS: usize = 100;

pub struct Check {
    pub name: &'static str,
    pub points: usize,
    pub worst: f64,
    pub tol: f64,
}

impl Check {
    fn new(name: &'static str, errors: impl IntoIterator<Item = f64>, tol: f64) -> Self {
        let errors: Vec<f64> = errors.into_iter().collect();
        Check {
            name,
            points: errors.len(),
            worst: errors.iter().cloned().fold(0.0, f64::max),
            tol,
        }
    }

    pub fn passed(&self) -> bool {
        self.points >= MIN_POINTS && self.worst <= self.tol
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Every coordinate of the small inputs plus random picks from the rest,
/// at least `count` in total.
fn coords(inputs: &[Tensor], count: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, t) in inputs.iter().enumerate().skip(1) {
        out.extend((0..t.numel()).map(|j| (i, j)));
    }
    while out.len() < count {
        out.push((0, rng.random_range(0..inputs[0].numel())));
    }
    out
}

fn weighted_sum<'t>(tape: &'t Tape, y: Var<'t>, weights: &Tensor) -> Var<'t> {
    y.mul(tape.constant(weights.clone())).sum()
}

macro_rules! filter_check {
    ($name:expr, $param:expr, |$x:ident, $p:ident| $body:expr) => {{
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let image = uniform(&[2, 3, 12, 12], 0.05, 0.95, &mut rng);
        let weights = uniform(&[2, 3, 12, 12], -1.0, 1.0, &mut rng);
        let inputs = vec![image, $param(&mut rng)];
        let pts = coords(&inputs, 120, &mut rng);
        let result = compare(
            &|tape: &Tape, v: &[Var<'_>]| {
                let ($x, $p) = (v[0], v[1]);
                weighted_sum(tape, $body, &weights)
            },
            &inputs,
            &pts,
            STEP,
            FLOOR,
        );
        Check::new($name, result.iter().map(|m| m.rel_error), FILTER_TOL)
    }};
}

pub fn white_balance_gradients() -> Check {
    filter_check!(
        "white balance",
        |r: &mut ChaCha8Rng| uniform(&[2, 3], 0.5, 2.0, r),
        |x, p| white_balance(x, p)
    )
}

pub fn gamma_gradients() -> Check {
    filter_check!(
        "gamma",
        |r: &mut ChaCha8Rng| uniform(&[2, 1], 0.3, 3.0, r),
        |x, p| gamma(x, p)
    )
}

pub fn contrast_gradients() -> Check {
    filter_check!(
        "contrast",
        |r: &mut ChaCha8Rng| uniform(&[2, 1], -1.0, 1.0, r),
        |x, p| contrast(x, p)
    )
}

pub fn tone_gradients() -> Check {
    filter_check!(
        "tone",
        |r: &mut ChaCha8Rng| uniform(&[2, 8], 0.5, 2.0, r),
        |x, p| tone(x, p)
    )
}

pub fn sharpen_gradients() -> Check {
    filter_check!(
        "sharpen",
        |r: &mut ChaCha8Rng| uniform(&[2, 1], 0.0, 2.0, r),
        |x, p| sharpen(x, p)
    )
}

pub fn full_filter_chain_gradients() -> Check {
    filter_check!(
        "filter chain",
        |r: &mut ChaCha8Rng| uniform(&[2, 15], -1.0, 1.0, r),
        |x, p| dip_forward(x.mul_scalar(0.6), map_raw(p), &DEFAULT_ORDER)
    )
}

fn curve_loss(net: &CurveEnhancer, image: &Tensor, weights: &Tensor) -> f64 {
    let tape = Tape::new();
    let bound = net.bind(&tape, true);
    let y = net.forward(&bound, tape.constant(image.clone())).unwrap();
    weighted_sum(&tape, y, weights).item()
}

pub fn curve_enhancer_gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = CurveEnhancer::new(4, false, &mut rng);
    let image = uniform(&[2, 3, 10, 10], 0.02, 0.6, &mut rng);
    let weights = uniform(&[2, 3, 10, 10], -1.0, 1.0, &mut rng);

    // parameters, with batch statistics as in training
    let (analytic, names): (Vec<Option<Tensor>>, Vec<String>) = {
        let tape = Tape::new();
        let bound = net.bind(&tape, true);
        let y = net.forward(&bound, tape.constant(image.clone())).unwrap();
        let g = tape.backward(weighted_sum(&tape, y, &weights));
        (
            bound.params.grads(&g),
            net.params.iter().map(|(n, _)| n.to_string()).collect(),
        )
    };
    let mut errors = Vec::new();
    for (name, grad) in names.iter().zip(&analytic) {
        let grad = grad.as_ref().expect("every parameter is used");
        let numel = grad.numel();
        for _ in 0..12.min(numel) {
            let j = rng.random_range(0..numel);
            let eval = |delta: f64| {
                let mut moved = net.clone();
                moved.params.get_mut(name).unwrap().data_mut()[j] += delta;
                curve_loss(&moved, &image, &weights)
            };
            let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            errors.push(rel_error(grad.data()[j], numeric, FLOOR));
        }
    }

    // the input image, in inference mode
    let mut frozen = net.clone();
    frozen.frozen = true;
    let inputs = vec![image.clone()];
    let pts: Vec<(usize, usize)> = (0..60)
        .map(|_| (0, rng.random_range(0..image.numel())))
        .collect();
    let result = compare(
        &|tape: &Tape, v: &[Var<'_>]| {
            let bound = frozen.bind(tape, false);
            weighted_sum(tape, frozen.forward(&bound, v[0]).unwrap(), &weights)
        },
        &inputs,
        &pts,
        STEP,
        FLOOR,
    );
    errors.extend(result.iter().map(|m| m.rel_error));
    Check::new("curve enhancer", errors, FILTER_TOL)
}

fn small_detector() -> Detector {
    let cfg = DetectorConfig {
        backbone_width: 4,
        ..DetectorConfig::default()
    };
    Detector::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
}

fn targets() -> Vec<Annotation> {
    vec![
        Annotation {
            bbox: BBox::new(6.0, 8.0, 30.0, 28.0).unwrap(),
            class_id: 0,
        },
        Annotation {
            bbox: BBox::new(34.0, 30.0, 60.0, 62.0).unwrap(),
            class_id: 2,
        },
    ]
}

pub fn detection_loss_gradients_on_head_outputs() -> Check {
    let det = small_detector();
    let cfg = det.config.clone();
    let gts = targets();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (gh, gw) = (4, 4);
    let raw = uniform(
        &[1, cfg.num_anchors() * cfg.fields(), gh, gw],
        -2.0,
        2.0,
        &mut rng,
    );
    let inputs = vec![raw];
    let pts: Vec<(usize, usize)> = (0..inputs[0].numel()).map(|j| (0, j)).collect();
    let result = compare(
        &|_: &Tape, v: &[Var<'_>]| image_loss(v[0], 0, &gts, &cfg).unwrap().total,
        &inputs,
        &pts,
        STEP,
        FLOOR,
    );
    Check::new(
        "detection loss",
        result.iter().map(|m| m.rel_error),
        FILTER_TOL,
    )
}

pub fn detection_loss_gradients_through_the_detector() -> Check {
    let det = small_detector();
    let gts = targets();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let image = uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut rng);
    let inputs = vec![image];
    let pts: Vec<(usize, usize)> = (0..100)
        .map(|_| (0, rng.random_range(0..inputs[0].numel())))
        .collect();
    let result = compare(
        &|tape: &Tape, v: &[Var<'_>]| {
            let net = det.bind(tape, false);
            let raw = det.forward(&net, v[0]).unwrap();
            image_loss(raw, 0, &gts, &det.config).unwrap().total
        },
        &inputs,
        &pts,
        STEP,
        1e-5,
    );
    Check::new(
        "detector end to end",
        result.iter().map(|m| m.rel_error),
        END_TO_END_TOL,
    )
}

pub fn all() -> Vec<Check> {
    vec![
        white_balance_gradients(),
        gamma_gradients(),
        contrast_gradients(),
        tone_gradients(),
        sharpen_gradients(),
        full_filter_chain_gradients(),
        curve_enhancer_gradients(),
        detection_loss_gradients_on_head_outputs(),
        detection_loss_gradients_through_the_detector(),
    ]
}
