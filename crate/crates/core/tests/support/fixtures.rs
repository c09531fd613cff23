//! Small configurations and helpers shared by the integration tests.

use amieod::config::Config;
use amieod::datakit::{synth_split, Sample};
use amieod::nn::ParamSet;
use amieod::pipeline::{train_stage1, Checkpoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny() -> Config {
    let mut cfg = Config::default();
    cfg.synth.num_images = 6;
    cfg.synth.test_images = 2;
    cfg.synth.canvas_size = 64;
    cfg.detector.backbone_width = 8;
    cfg.enhance.curve_width = 4;
    cfg.enhance.pp_input = 32;
    cfg.enhance.pretrain_epochs = 1;
    cfg.esm.input_size = 32;
    cfg.stage1.epochs = 1;
    cfg.stage1.batch_size = 2;
    cfg.stage1.input_size = 64;
    cfg.stage2.epochs = 1;
    cfg.stage2.batch_size = 2;
    cfg.stage2.input_size = 64;
    cfg.validate().unwrap();
    cfg
}

pub fn train_set(cfg: &Config) -> Vec<Sample> {
    synth_split(&cfg.synth).unwrap().0
}

pub fn stage1_checkpoint() -> (Config, Vec<Sample>, Checkpoint) {
    let cfg = tiny();
    let samples = train_set(&cfg);
    let out = train_stage1(&cfg, &samples).unwrap();
    (cfg, samples, out.checkpoint)
}

pub fn perturb(set: &mut ParamSet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in set.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
}
