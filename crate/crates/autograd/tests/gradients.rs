use amieod_autograd::gradcheck::compare_all;
use amieod_autograd::{concat, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn assert_close<F>(f: F, inputs: &[Tensor])
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    assert_close_floor(f, inputs, 1e-6);
}

fn assert_close_floor<F>(f: F, inputs: &[Tensor], floor: f64)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    for m in compare_all(&f, inputs, 1e-5, floor) {
        assert!(m.rel_error < 1e-6, "{m:?}");
    }
}

#[test]
fn elementwise_and_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[2, 3, 2, 2], 0.2, 1.5, &mut rng);
    let b = random(&[1, 3, 1, 1], 0.2, 1.5, &mut rng);
    assert_close(
        |_, v| {
            let x = v[0].mul(v[1]).add(v[0].div(v[1])).sub(v[1].powf(1.7));
            x.mul(x).sum()
        },
        &[a.clone(), b.clone()],
    );
    assert_close(
        |_, v| {
            v[0].ln()
                .exp()
                .sqrt()
                .atan()
                .tanh()
                .sigmoid()
                .sin()
                .cos()
                .mean()
        },
        &[a.clone()],
    );
    assert_close(
        |_, v| {
            v[0].softplus()
                .mul(v[1].abs())
                .maximum(v[1].mul_scalar(0.9))
                .sum()
        },
        &[a, b],
    );
}

#[test]
fn reductions_and_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[2, 3, 4], -1.0, 1.0, &mut rng);
    assert_close(
        |_, v| {
            let s = v[0].sum_axes(&[0, 2]);
            let n = v[0].narrow(1, 1, 2).reshape(&[4, 4]);
            let g = v[0].gather(&[0, 5, 5, 23]);
            s.square()
                .sum()
                .add(n.transpose().matmul(n).sum())
                .add(g.square().sum())
        },
        &[a.clone()],
    );
    assert_close(
        |_, v| {
            let c = concat(&[v[0], v[0].mul_scalar(2.0)], 1);
            c.log_softmax().mul(c).sum()
        },
        &[a],
    );
}

#[test]
fn conv_and_resize() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 2, 7, 6], -1.0, 1.0, &mut rng);
    let w = random(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        assert_close(
            move |_, v| v[0].conv2d(v[1], stride, pad).square().sum(),
            &[x.clone(), w.clone()],
        );
    }
    assert_close(
        |_, v| v[0].resize_bilinear(11, 4).square().sum(),
        &[x.clone()],
    );
    assert_close(|_, v| v[0].resize_bilinear(3, 3).square().sum(), &[x]);
}

#[test]
fn fused_normalization_matches_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[2, 3, 3, 2], -1.0, 2.0, &mut rng);
    let g = random(&[3], 0.5, 1.5, &mut rng);
    let b = random(&[3], -0.5, 0.5, &mut rng);
    let w = random(&[2, 3, 3, 2], -1.0, 1.0, &mut rng);
    assert_close_floor(
        |_, v| v[0].batch_norm(v[1], v[2], 1e-5).0.mul(v[3]).sum(),
        &[x.clone(), g.clone(), b.clone(), w.clone()],
        1e-3,
    );
    assert_close_floor(
        |_, v| v[0].channel_affine(v[1], v[2]).square().mul(v[3]).sum(),
        &[x.clone(), g.clone(), b.clone(), w.clone()],
        1e-3,
    );
    let tape = Tape::new();
    let xv = tape.constant(x);
    let (gv, bv) = (tape.constant(g), tape.constant(b));
    let (y, mean, var) = xv.batch_norm(gv, bv, 1e-5);
    let m = xv.mean_axes(&[0, 2, 3]);
    let centered = xv.sub(m);
    let v = centered.square().mean_axes(&[0, 2, 3]);
    let reference = centered
        .div(v.add_scalar(1e-5).sqrt())
        .mul(gv.reshape(&[1, 3, 1, 1]))
        .add(bv.reshape(&[1, 3, 1, 1]));
    for (p, q) in y.value().data().iter().zip(reference.value().data()) {
        assert!((p - q).abs() < 1e-12);
    }
    for (p, q) in mean.iter().zip(m.value().data()) {
        assert!((p - q).abs() < 1e-14);
    }
    for (p, q) in var.iter().zip(v.value().data()) {
        assert!((p - q).abs() < 1e-14);
    }
}

#[test]
fn detach_blocks_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new([2], vec![1.0, 2.0]));
    let y = x.mul(x.detach()).sum();
    let grads = tape.backward(y);
    // d/dx (x * const(x)) = const(x)
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn constants_record_no_graph() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::ones([3]));
    let y = x.exp().sum();
    assert!(!y.requires_grad());
    let grads = tape.backward(y);
    assert!(grads.get(x).is_none());
}
