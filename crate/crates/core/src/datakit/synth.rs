use amieod_autograd::Tensor;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::primitives::{Annotation, BBox, Image};

/// Class names of the generated shapes, indexed by class id.
pub const SHAPE_NAMES: [&str; 3] = ["rectangle", "ellipse", "triangle"];

const PLACEMENT_TRIES: usize = 50;
const MARGIN: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_images: usize,
    /// How many of the generated images form the test split.
    pub test_images: usize,
    pub canvas_size: usize,
    /// Inclusive bounds on the number of shapes per image.
    pub shapes_per_image: [usize; 2],
    /// Shape side length as a fraction of the canvas.
    pub size_range: [f64; 2],
    pub gamma_range: [f64; 2],
    pub gain_range: [f64; 2],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_images: 250,
            test_images: 50,
            canvas_size: 128,
            shapes_per_image: [1, 3],
            size_range: [0.2, 0.45],
            gamma_range: [2.0, 5.0],
            gain_range: [0.1, 0.5],
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r[0].is_finite() && r[1].is_finite();
        if !ordered(self.gamma_range) || self.gamma_range[0] < 1.0 {
            return Err(Error::invalid("gamma range must be ordered and >= 1"));
        }
        if !ordered(self.gain_range) || self.gain_range[0] <= 0.0 || self.gain_range[1] > 1.0 {
            return Err(Error::invalid("gain range must be ordered inside (0, 1]"));
        }
        if !ordered(self.size_range) || self.size_range[0] <= 0.0 || self.size_range[1] > 1.0 {
            return Err(Error::invalid("size range must be ordered inside (0, 1]"));
        }
        let [lo, hi] = self.shapes_per_image;
        if lo == 0 || lo > hi {
            return Err(Error::invalid("shapes per image must be ordered and >= 1"));
        }
        if self.test_images >= self.num_images {
            return Err(Error::invalid(
                "test_images must leave at least one training image",
            ));
        }
        if self.canvas_size < crate::primitives::MIN_SIDE {
            return Err(Error::invalid("canvas too small"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise sigma must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Shape {
    pub class_id: usize,
    pub bbox: BBox,
}

impl Shape {
    /// Whether point `(x, y)` lies inside the shape.
    pub(crate) fn contains(&self, x: f64, y: f64) -> bool {
        let b = &self.bbox;
        if x < b.x1 || x > b.x2 || y < b.y1 || y > b.y2 {
            return false;
        }
        let (cx, cy) = b.center();
        match self.class_id {
            0 => true,
            1 => {
                let dx = (x - cx) / (b.width() / 2.0);
                let dy = (y - cy) / (b.height() / 2.0);
                dx * dx + dy * dy <= 1.0
            }
            _ => (x - cx).abs() <= (y - b.y1) / b.height() * b.width() / 2.0,
        }
    }
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn quantize(v: f64) -> f64 {
    (v * 65535.0).round() / 65535.0
}

fn place_shapes(rng: &mut impl Rng, cfg: &SynthConfig) -> Vec<Shape> {
    let size = cfg.canvas_size as f64;
    let count = rng.random_range(cfg.shapes_per_image[0]..=cfg.shapes_per_image[1]);
    let mut shapes: Vec<Shape> = Vec::new();
    for _ in 0..count {
        for _ in 0..PLACEMENT_TRIES {
            // integer geometry, odd widths: every apex column hits a pixel centre
            let w = ((uniform(rng, cfg.size_range) * size).round() as usize / 2 * 2 + 1) as f64;
            let h = (uniform(rng, cfg.size_range) * size).round().max(2.0);
            let (w, h) = (w.min(size), h.min(size));
            let x1 = rng.random_range(0..=(size - w) as usize) as f64;
            let y1 = rng.random_range(0..=(size - h) as usize) as f64;
            let bbox = BBox {
                x1,
                y1,
                x2: x1 + w,
                y2: y1 + h,
            };
            let grown = BBox {
                x1: x1 - MARGIN,
                y1: y1 - MARGIN,
                x2: x1 + w + MARGIN,
                y2: y1 + h + MARGIN,
            };
            if shapes.iter().all(|s| s.bbox.intersection(&grown) == 0.0) {
                shapes.push(Shape {
                    class_id: rng.random_range(0..SHAPE_NAMES.len()),
                    bbox,
                });
                break;
            }
        }
    }
    shapes
}

/// Renders a bright canvas of non-overlapping coloured shapes.
pub fn render_bright(rng: &mut impl Rng, cfg: &SynthConfig) -> Result<(Image, Vec<Annotation>)> {
    let n = cfg.canvas_size;
    let background: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.55..0.95));
    let slope: [f64; 2] = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
    let shapes = place_shapes(rng, cfg);
    let colors: Vec<[f64; 3]> = shapes
        .iter()
        .map(|_| {
            let mut best = [0.0; 3];
            for _ in 0..PLACEMENT_TRIES {
                best = std::array::from_fn(|_| rng.random_range(0.05..0.95));
                let dist: f64 = best
                    .iter()
                    .zip(&background)
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                if dist >= 0.6 {
                    break;
                }
            }
            best
        })
        .collect();
    let mut data = Tensor::zeros([3, n, n]);
    let d = data.data_mut();
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let shade = slope[0] * (px / n as f64 - 0.5) + slope[1] * (py / n as f64 - 0.5);
            let hit = shapes.iter().position(|s| s.contains(px, py));
            for c in 0..3 {
                let v = match hit {
                    Some(i) => colors[i][c],
                    None => background[c] + shade,
                };
                d[(c * n + y) * n + x] = quantize(v.clamp(0.0, 1.0));
            }
        }
    }
    let anns = shapes
        .iter()
        .map(|s| Annotation {
            bbox: s.bbox,
            class_id: s.class_id,
        })
        .collect();
    Ok((Image::new(data)?, anns))
}

/// `clamp(gain * image^gamma + noise, 0, 1)` with seeded Gaussian noise.
pub fn darken(image: &Image, gamma: f64, gain: f64, noise_sigma: f64, seed: u64) -> Result<Image> {
    if !(gamma >= 1.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma {gamma} must be >= 1")));
    }
    if !(gain > 0.0 && gain <= 1.0) {
        return Err(Error::invalid(format!("gain {gain} must lie in (0, 1]")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::invalid(format!(
            "noise sigma {noise_sigma} must be >= 0"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_sigma).expect("valid sigma");
    let out = image.tensor().map(|v| gain * v.powf(gamma));
    let out = if noise_sigma > 0.0 {
        Tensor::new(
            out.shape().to_vec(),
            out.data()
                .iter()
                .map(|v| v + normal.sample(&mut rng))
                .collect(),
        )
    } else {
        out
    };
    Image::from_tensor_clamped(out)
}

/// Bright canvases with exact labels, darkened with per-image gamma, gain
/// and noise drawn from the configured ranges. Values sit on the 16-bit grid
/// so a PNG round trip is lossless.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.num_images)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(master.next_u64());
            let (bright, annotations) = render_bright(&mut rng, cfg)?;
            let gamma = uniform(&mut rng, cfg.gamma_range);
            let gain = uniform(&mut rng, cfg.gain_range);
            let dark = darken(&bright, gamma, gain, cfg.noise_sigma, rng.next_u64())?;
            let dark = Image::new(dark.tensor().map(quantize))?;
            Ok(Sample {
                name: format!("{i:06}"),
                image: dark,
                annotations,
                clean: Some(bright),
            })
        })
        .collect()
}

/// Generates the dataset and splits it; the last `test_images` samples
/// form the test split.
pub fn synth_split(cfg: &SynthConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut train = synth_generate(cfg)?;
    let test = train.split_off(cfg.num_images - cfg.test_images);
    Ok((train, test))
}
