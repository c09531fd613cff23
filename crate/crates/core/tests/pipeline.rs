mod support;

use amieod::config::Config;
use amieod::detector::Detector;
use amieod::dgrl::dgrl_var;
use amieod::enhance::{apply_expert, ExpertBundle};
use amieod::esm::EsmWeights;
use amieod::pipeline::{
    decode, encode, load_checkpoint, save_checkpoint, train_stage1, train_stage2, EsmTrainer,
    Stage1Trainer, FORMAT_VERSION,
};
use amieod::{Error, Image};
use amieod_autograd::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::fixtures::{perturb, stage1_checkpoint, tiny, train_set};

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (cfg, samples, stage1) = stage1_checkpoint();
    let bytes = encode(&stage1).unwrap();
    let back = decode(&bytes).unwrap();
    assert_eq!(back, stage1);
    assert_eq!(encode(&back).unwrap(), bytes);

    let (stage2, _) = train_stage2(&cfg, &samples, &stage1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/stage2.ckpt");
    save_checkpoint(&path, &stage2).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(
        loaded.esm.as_ref().unwrap().params.digest(),
        stage2.esm.as_ref().unwrap().params.digest()
    );
    assert_eq!(loaded, stage2);
    assert_eq!(loaded.format_version, FORMAT_VERSION);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let (_, _, stage1) = stage1_checkpoint();
    let bytes = encode(&stage1).unwrap();

    let mut bumped = bytes.clone();
    bumped[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(
        decode(&bumped),
        Err(Error::UnsupportedVersion { found, .. }) if found == FORMAT_VERSION + 1
    ));

    for cut in [0, 10, 30, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            matches!(decode(&bytes[..cut]), Err(Error::Corrupt(_))),
            "cut at {cut}"
        );
    }

    let mut flipped = bytes.clone();
    let last = flipped.len() - 3;
    flipped[last] ^= 0x10;
    assert!(matches!(decode(&flipped), Err(Error::Corrupt(m)) if m.contains("checksum")));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(decode(&magic), Err(Error::Corrupt(_))));

    let mut extended = bytes;
    extended.extend_from_slice(&[0; 8]);
    assert!(matches!(decode(&extended), Err(Error::Corrupt(_))));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.ckpt");
    let err = load_checkpoint(&missing).unwrap_err();
    assert!(matches!(err, Error::CheckpointNotFound(_)));
    assert!(err.to_string().contains("checkpoint not found"));
}

#[test]
fn stage_two_leaves_experts_and_detector_untouched() {
    let (cfg, samples, stage1) = stage1_checkpoint();
    let (stage2, log) = train_stage2(&cfg, &samples, &stage1).unwrap();
    assert_eq!(stage2.stage, 2);
    assert_eq!(log.len(), 2);
    let pairs = [
        (&stage1.experts.piem.params, &stage2.experts.piem.params),
        (&stage1.experts.piem.buffers, &stage2.experts.piem.buffers),
        (&stage1.experts.jiem.params, &stage2.experts.jiem.params),
        (&stage1.experts.jiem.buffers, &stage2.experts.jiem.buffers),
        (&stage1.experts.iaem.params, &stage2.experts.iaem.params),
        (&stage1.detector.params, &stage2.detector.params),
        (&stage1.detector.buffers, &stage2.detector.buffers),
    ];
    for (a, b) in pairs {
        assert_eq!(a.digest(), b.digest());
    }
    let fresh = EsmWeights::new(
        cfg.esm.clone(),
        &mut ChaCha8Rng::seed_from_u64(cfg.stage2.seed),
    )
    .unwrap();
    assert_ne!(
        fresh.params.digest(),
        stage2.esm.as_ref().unwrap().params.digest()
    );
}

#[test]
fn stage_one_keeps_the_pretrained_enhancer_frozen() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let experts = ExpertBundle::new(4, 32, &mut rng);
    let detector = Detector::new(cfg.detector.clone(), &mut rng).unwrap();
    let piem = (experts.piem.params.digest(), experts.piem.buffers.digest());
    let jiem = experts.jiem.params.digest();
    let mut trainer = Stage1Trainer::new(experts, detector, cfg.stage1.clone());
    let samples = train_set(&cfg);
    for pair in samples.chunks(2) {
        let images: Vec<&Image> = pair.iter().map(|s| &s.image).collect();
        let gts: Vec<&[_]> = pair.iter().map(|s| s.annotations.as_slice()).collect();
        trainer.step(&images, &gts, 0.01).unwrap();
    }
    assert_eq!(
        piem,
        (
            trainer.experts.piem.params.digest(),
            trainer.experts.piem.buffers.digest()
        )
    );
    assert_ne!(jiem, trainer.experts.jiem.params.digest());
}

#[test]
fn cached_frozen_outputs_give_the_same_step() {
    let cfg = tiny();
    let samples = train_set(&cfg);
    let images: Vec<&Image> = samples[..2].iter().map(|s| &s.image).collect();
    let gts: Vec<&[_]> = samples[..2]
        .iter()
        .map(|s| s.annotations.as_slice())
        .collect();
    let trainer = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut experts = ExpertBundle::new(4, 32, &mut rng);
        experts.piem.frozen = true;
        let detector = Detector::new(cfg.detector.clone(), &mut rng).unwrap();
        Stage1Trainer::new(experts, detector, cfg.stage1.clone())
    };
    let mut plain = trainer();
    let mut cached = trainer();
    let frozen: Vec<Image> = images
        .iter()
        .map(|im| apply_expert(im, &cached.experts, 1).unwrap())
        .collect();
    let frozen_refs: Vec<&Image> = frozen.iter().collect();
    let a = plain.step(&images, &gts, 0.01).unwrap();
    let b = cached
        .step_with(&images, Some(&frozen_refs), &gts, 0.01)
        .unwrap();
    for (key, va) in &a {
        assert!(
            (va - b[key]).abs() <= 1e-12 * va.abs().max(1.0),
            "{key}: {va} vs {}",
            b[key]
        );
    }
    let short = &frozen_refs[..1];
    assert!(cached.step_with(&images, Some(short), &gts, 0.01).is_err());
}

#[test]
fn regression_target_gets_exactly_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut experts = ExpertBundle::new(4, 32, &mut rng);
    perturb(&mut experts.jiem.params, 12);
    let image = Image::from_fn(32, 32, |c, y, x| {
        0.05 + 0.3 * ((c * 7 + y * 3 + x) % 11) as f64 / 11.0
    })
    .unwrap();
    for (best, zero, other) in [(2, "jiem", "iaem"), (3, "iaem", "jiem")] {
        let tape = Tape::new();
        let nets = experts.bind(&tape, true);
        let outputs = experts
            .forward_all(&nets, tape.constant(image.batched()))
            .unwrap();
        let loss = dgrl_var(&outputs, &[best]).unwrap().mean();
        assert!(loss.item() > 0.0);
        let g = tape.backward(loss);
        let grads = |name: &str| match name {
            "jiem" => nets.jiem.params.grads(&g),
            _ => nets.iaem.params.grads(&g),
        };
        for t in grads(zero).into_iter().flatten() {
            assert!(
                t.data().iter().all(|&v| v == 0.0),
                "{zero} received gradient"
            );
        }
        let total: f64 = grads(other)
            .into_iter()
            .flatten()
            .map(|t| t.data().iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        assert!(total > 0.0, "{other} received no gradient");
        assert!(nets.piem.params.grads(&g).iter().all(Option::is_none));
    }
}

/// Zeroing the detector's first convolution makes its loss independent of
/// the input, so only the regression loss can reach the experts.
fn blind_detector(cfg: &Config, rng: &mut ChaCha8Rng) -> Detector {
    let mut det = Detector::new(cfg.detector.clone(), rng).unwrap();
    let w = det.params.get_mut("block0.conv.weight").unwrap();
    *w = Tensor::zeros(w.shape().to_vec());
    det
}

#[test]
fn detection_only_objective_ignores_the_regression_path() {
    let mut cfg = tiny();
    cfg.stage1.weight_decay = 0.0;
    let samples = train_set(&cfg);
    let images: Vec<&Image> = samples[..2].iter().map(|s| &s.image).collect();
    let gts: Vec<&[_]> = samples[..2]
        .iter()
        .map(|s| s.annotations.as_slice())
        .collect();
    for (alpha, moves) in [(1.0, false), (0.2, true)] {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut experts = ExpertBundle::new(4, 32, &mut rng);
        perturb(&mut experts.jiem.params, 6);
        let detector = blind_detector(&cfg, &mut rng);
        let before = (experts.jiem.params.digest(), experts.iaem.params.digest());
        let mut train = cfg.stage1.clone();
        train.alpha = alpha;
        let mut trainer = Stage1Trainer::new(experts, detector, train);
        let logged = trainer.step(&images, &gts, 0.01).unwrap();
        assert!(logged["dgrl"] > 0.0);
        let after = (
            trainer.experts.jiem.params.digest(),
            trainer.experts.iaem.params.digest(),
        );
        assert_eq!(before != after, moves, "alpha {alpha}");
    }
}

#[test]
fn selector_overfits_a_single_sample() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let esm = EsmWeights::new(cfg.esm.clone(), &mut rng).unwrap();
    let mut trainer = EsmTrainer::new(esm, cfg.stage2.clone());
    let image = train_set(&cfg)[0].image.clone();
    let mut loss = f64::INFINITY;
    for _ in 0..200 {
        loss = trainer.step(&[&image], &[2], 0.01).unwrap();
        if loss < 0.01 {
            break;
        }
    }
    assert!(loss < 0.01, "loss {loss}");
}

#[test]
fn steps_and_epochs_are_counted() {
    let mut cfg = tiny();
    cfg.stage1.epochs = 2;
    let samples = train_set(&cfg);
    assert_eq!(samples.len(), 4);
    let out = train_stage1(&cfg, &samples).unwrap();
    assert_eq!(out.log.len(), 4);
    let epochs: Vec<usize> = out.log.records.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, [0, 0, 1, 1]);
    let steps: Vec<usize> = out.log.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, [0, 1, 2, 3]);
    assert_eq!(out.checkpoint.epoch, 2);
    assert_eq!(out.checkpoint.stage, 1);
    assert!(out.checkpoint.esm.is_none());
    assert_eq!(out.pretrain_log.len(), 2);
    for key in [
        "box",
        "obj",
        "cls",
        "det",
        "dgrl",
        "total",
        "det_original",
        "det_jiem",
    ] {
        assert!(out.log.records[0].losses.contains_key(key), "{key}");
    }
}

#[test]
fn identical_seeds_give_identical_logs() {
    let cfg = tiny();
    let samples = train_set(&cfg);
    let a = train_stage1(&cfg, &samples).unwrap();
    let b = train_stage1(&cfg, &samples).unwrap();
    assert_eq!(a.log.to_jsonl().unwrap(), b.log.to_jsonl().unwrap());
    assert_eq!(
        a.pretrain_log.to_jsonl().unwrap(),
        b.pretrain_log.to_jsonl().unwrap()
    );
    assert_eq!(
        encode(&a.checkpoint).unwrap(),
        encode(&b.checkpoint).unwrap()
    );

    let (s2a, la) = train_stage2(&cfg, &samples, &a.checkpoint).unwrap();
    let (s2b, lb) = train_stage2(&cfg, &samples, &b.checkpoint).unwrap();
    assert_eq!(la.to_jsonl().unwrap(), lb.to_jsonl().unwrap());
    assert_eq!(s2a, s2b);

    let mut other = cfg.clone();
    other.set_seed(1);
    let c = train_stage1(&other, &samples).unwrap();
    assert_ne!(a.log.to_jsonl().unwrap(), c.log.to_jsonl().unwrap());
}

#[test]
fn empty_training_sets_are_rejected() {
    let cfg = tiny();
    assert!(matches!(
        train_stage1(&cfg, &[]),
        Err(Error::InvalidArgument(_))
    ));
    let (_, _, stage1) = stage1_checkpoint();
    assert!(matches!(
        train_stage2(&cfg, &[], &stage1),
        Err(Error::InvalidArgument(_))
    ));
}
