//! Differentiable operations on [`Var`].

use std::rc::Rc;

use crate::kernels;
use crate::tape::Var;
use crate::tensor::Tensor;

fn unary<'t>(
    x: Var<'t>,
    f: impl Fn(f64) -> f64,
    // derivative given (input, output)
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Var<'t> {
    let xv = x.value();
    let out = Rc::new(xv.map(f));
    let out_rc = out.clone();
    x.tape.record_rc(out, &[x], move |g| {
        let d = Tensor::from_fn(xv.shape().to_vec(), |i| {
            g.data()[i] * df(xv.data()[i], out_rc.data()[i])
        });
        vec![Some(d)]
    })
}

impl<'t> Var<'t> {
    fn constant_like(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        let out = kernels::broadcast_zip(&a, &b, |x, y| x + y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape.record(out, &[self, rhs], move |g| {
            vec![
                Some(kernels::sum_to_shape(g, &sa)),
                Some(kernels::sum_to_shape(g, &sb)),
            ]
        })
    }

    pub fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        let out = kernels::broadcast_zip(&a, &b, |x, y| x - y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape.record(out, &[self, rhs], move |g| {
            vec![
                Some(kernels::sum_to_shape(g, &sa)),
                Some(kernels::sum_to_shape(g, &sb).scale(-1.0)),
            ]
        })
    }

    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        let out = kernels::broadcast_zip(&a, &b, |x, y| x * y);
        let (need_a, need_b) = (self.requires_grad(), rhs.requires_grad());
        self.tape.record(out, &[self, rhs], move |g| {
            let ga = need_a.then(|| {
                kernels::sum_to_shape(&kernels::broadcast_zip(g, &b, |g, y| g * y), a.shape())
            });
            let gb = need_b.then(|| {
                kernels::sum_to_shape(&kernels::broadcast_zip(g, &a, |g, x| g * x), b.shape())
            });
            vec![ga, gb]
        })
    }

    pub fn div(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        let out = kernels::broadcast_zip(&a, &b, |x, y| x / y);
        let out = Rc::new(out);
        let (need_a, need_b) = (self.requires_grad(), rhs.requires_grad());
        let out_c = out.clone();
        self.tape.record_rc(out, &[self, rhs], move |g| {
            let ga = need_a.then(|| {
                kernels::sum_to_shape(&kernels::broadcast_zip(g, &b, |g, y| g / y), a.shape())
            });
            let gb = need_b.then(|| {
                // d(a/b)/db = -(a/b)/b
                let q = kernels::broadcast_zip(&out_c, &b, |q, y| -q / y);
                kernels::sum_to_shape(&kernels::broadcast_zip(g, &q, |g, q| g * q), b.shape())
            });
            vec![ga, gb]
        })
    }

    /// Elementwise maximum; ties send the gradient to `self`.
    pub fn maximum(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        let out = kernels::broadcast_zip(&a, &b, f64::max);
        self.tape.record(out, &[self, rhs], move |g| {
            let ma = kernels::broadcast_zip(&a, &b, |x, y| if x >= y { 1.0 } else { 0.0 });
            let ga = kernels::broadcast_zip(g, &ma, |g, m| g * m);
            let gb = kernels::broadcast_zip(g, &ma, |g, m| g * (1.0 - m));
            vec![
                Some(kernels::sum_to_shape(&ga, a.shape())),
                Some(kernels::sum_to_shape(&gb, b.shape())),
            ]
        })
    }

    pub fn neg(self) -> Var<'t> {
        self.mul_scalar(-1.0)
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        let out = self.value().map(|v| v + k);
        self.tape.record(out, &[self], |g| vec![Some(g.clone())])
    }

    pub fn mul_scalar(self, k: f64) -> Var<'t> {
        let out = self.value().map(|v| v * k);
        self.tape
            .record(out, &[self], move |g| vec![Some(g.scale(k))])
    }

    /// `k - self`.
    pub fn rsub_scalar(self, k: f64) -> Var<'t> {
        self.mul_scalar(-1.0).add_scalar(k)
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        unary(self, move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    pub fn square(self) -> Var<'t> {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'t> {
        unary(self, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn exp(self) -> Var<'t> {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        unary(self, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sin(self) -> Var<'t> {
        unary(self, f64::sin, |x, _| x.cos())
    }

    pub fn cos(self) -> Var<'t> {
        unary(self, f64::cos, |x, _| -x.sin())
    }

    pub fn atan(self) -> Var<'t> {
        unary(self, f64::atan, |x, _| 1.0 / (1.0 + x * x))
    }

    pub fn tanh(self) -> Var<'t> {
        unary(self, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(self) -> Var<'t> {
        unary(self, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(self) -> Var<'t> {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        unary(
            self,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// `|x|`, with subgradient 0 at the origin.
    pub fn abs(self) -> Var<'t> {
        unary(self, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the open interval
    /// and passes through on the boundary.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        unary(
            self,
            move |x| x.clamp(lo, hi),
            move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
        )
    }

    /// `ln(1 + e^x)` evaluated stably.
    pub fn softplus(self) -> Var<'t> {
        unary(self, softplus, |x, _| sigmoid(x))
    }

    pub fn sum(self) -> Var<'t> {
        let v = self.value();
        let shape = v.shape().to_vec();
        self.tape
            .record(Tensor::scalar(v.sum()), &[self], move |g| {
                vec![Some(Tensor::full(shape.clone(), g.item()))]
            })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(self, axes: &[usize]) -> Var<'t> {
        let v = self.value();
        let out = kernels::sum_axes(&v, axes);
        let shape = v.shape().to_vec();
        self.tape.record(out, &[self], move |g| {
            let z = Tensor::zeros(shape.clone());
            vec![Some(kernels::broadcast_zip(&z, g, |_, g| g))]
        })
    }

    pub fn mean_axes(self, axes: &[usize]) -> Var<'t> {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes).mul_scalar(1.0 / count as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let v = self.value();
        let old = v.shape().to_vec();
        let out = (*v).clone().reshape(shape.to_vec());
        self.tape.record(out, &[self], move |g| {
            vec![Some(g.clone().reshape(old.clone()))]
        })
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let v = self.value();
        let out = v.narrow(axis, start, len);
        let shape = v.shape().to_vec();
        self.tape.record(out, &[self], move |g| {
            let mut parts = Vec::new();
            let before = (start > 0).then(|| {
                let mut s = shape.clone();
                s[axis] = start;
                Tensor::zeros(s)
            });
            let after_len = shape[axis] - start - len;
            let after = (after_len > 0).then(|| {
                let mut s = shape.clone();
                s[axis] = after_len;
                Tensor::zeros(s)
            });
            if let Some(b) = before.as_ref() {
                parts.push(b);
            }
            parts.push(g);
            if let Some(a) = after.as_ref() {
                parts.push(a);
            }
            vec![Some(Tensor::concat(&parts, axis))]
        })
    }

    /// Flattened elements at `indices`, as a rank-1 variable.
    pub fn gather(self, indices: &[usize]) -> Var<'t> {
        let v = self.value();
        let out = Tensor::new(
            vec![indices.len()],
            indices.iter().map(|&i| v.data()[i]).collect(),
        );
        let shape = v.shape().to_vec();
        let idx = indices.to_vec();
        self.tape.record(out, &[self], move |g| {
            let mut d = Tensor::zeros(shape.clone());
            for (k, &i) in idx.iter().enumerate() {
                d.data_mut()[i] += g.data()[k];
            }
            vec![Some(d)]
        })
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        assert!(
            a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
            "matmul shapes"
        );
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
        let (need_a, need_b) = (self.requires_grad(), rhs.requires_grad());
        self.tape
            .record(Tensor::new(vec![m, n], out), &[self, rhs], move |g| {
                let ga = need_a.then(|| {
                    let mut d = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g.data(), false, b.data(), true, &mut d, 0.0);
                    Tensor::new(vec![m, k], d)
                });
                let gb = need_b.then(|| {
                    let mut d = vec![0.0; k * n];
                    kernels::gemm(k, m, n, a.data(), true, g.data(), false, &mut d, 0.0);
                    Tensor::new(vec![k, n], d)
                });
                vec![ga, gb]
            })
    }

    pub fn transpose(self) -> Var<'t> {
        let out = self.value().transpose2();
        self.tape
            .record(out, &[self], |g| vec![Some(g.transpose2())])
    }

    /// 2-D convolution, `self: [N,C,H,W]`, `weight: [O,C,kh,kw]`.
    pub fn conv2d(self, weight: Var<'t>, stride: usize, pad: usize) -> Var<'t> {
        let (x, w) = (self.value(), weight.value());
        let out = kernels::conv2d(&x, &w, stride, pad);
        let (need_x, need_w) = (self.requires_grad(), weight.requires_grad());
        self.tape.record(out, &[self, weight], move |g| {
            let (gx, gw) = kernels::conv2d_backward(&x, &w, g, stride, pad, need_x, need_w);
            vec![gx, gw]
        })
    }

    /// Batch normalization of `[N,C,H,W]` with batch statistics, followed by
    /// a per-channel affine map with `gamma, beta: [C]`. Also returns the
    /// batch means and biased variances.
    pub fn batch_norm(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        eps: f64,
    ) -> (Var<'t>, Vec<f64>, Vec<f64>) {
        let x = self.value();
        let (g, b) = (gamma.value(), beta.value());
        let c = x.dim(1);
        assert!(
            g.numel() == c && b.numel() == c,
            "batch_norm parameters must be [C]"
        );
        let (mean, var) = kernels::channel_moments(&x);
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let shift: Vec<f64> = mean.iter().zip(&inv).map(|(m, i)| -m * i).collect();
        let xhat = Rc::new(kernels::channel_affine(&x, &inv, &shift));
        let out = kernels::channel_affine(&xhat, g.data(), b.data());
        let count = (x.numel() / c) as f64;
        let (need_x, need_g, need_b) = (
            self.requires_grad(),
            gamma.requires_grad(),
            beta.requires_grad(),
        );
        let gamma_shape = g.shape().to_vec();
        let beta_shape = b.shape().to_vec();
        let var_out = self.tape.record(out, &[self, gamma, beta], move |gy| {
            let (sum_gy, dot) = kernels::channel_dot(gy, Some(&xhat));
            let gx = need_x.then(|| {
                let gd = g.data();
                let (n, plane) = (gy.dim(0), gy.dim(2) * gy.dim(3));
                let mut out = Vec::with_capacity(gy.numel());
                for i in 0..n {
                    for ch in 0..c {
                        let k = gd[ch] * inv[ch] / count;
                        let (s, d) = (sum_gy[ch], dot[ch]);
                        let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                        out.extend(
                            gy.data()[r.clone()]
                                .iter()
                                .zip(&xhat.data()[r])
                                .map(|(dy, xh)| k * (count * dy - s - xh * d)),
                        );
                    }
                }
                Tensor::new(gy.shape().to_vec(), out)
            });
            let gg = need_g.then(|| Tensor::new(gamma_shape.clone(), dot.clone()));
            let gb = need_b.then(|| Tensor::new(beta_shape.clone(), sum_gy.clone()));
            vec![gx, gg, gb]
        });
        (var_out, mean, var)
    }

    /// `self[n, c, ...] * scale[c] + shift[c]` for `self: [N,C,H,W]` and
    /// `scale, shift: [C]`.
    pub fn channel_affine(self, scale: Var<'t>, shift: Var<'t>) -> Var<'t> {
        let x = self.value();
        let (a, b) = (scale.value(), shift.value());
        let c = x.dim(1);
        assert!(
            a.numel() == c && b.numel() == c,
            "affine parameters must be [C]"
        );
        let out = kernels::channel_affine(&x, a.data(), b.data());
        let (need_x, need_a, need_b) = (
            self.requires_grad(),
            scale.requires_grad(),
            shift.requires_grad(),
        );
        let (a_shape, b_shape) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape.record(out, &[self, scale, shift], move |gy| {
            let zeros = vec![0.0; c];
            let gx = need_x.then(|| kernels::channel_affine(gy, a.data(), &zeros));
            let (sum, dot) = kernels::channel_dot(gy, need_a.then_some(&*x));
            let ga = need_a.then(|| Tensor::new(a_shape.clone(), dot));
            let gb = need_b.then(|| Tensor::new(b_shape.clone(), sum));
            vec![gx, ga, gb]
        })
    }

    /// Bilinear resize of the spatial axes of `[N,C,H,W]`.
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Var<'t> {
        let x = self.value();
        let (h, w) = (x.dim(2), x.dim(3));
        let out = kernels::resize_bilinear(&x, out_h, out_w);
        self.tape.record(out, &[self], move |g| {
            vec![Some(kernels::resize_bilinear_backward(g, h, w))]
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'t> {
        let shape = self.shape();
        let last = shape.len() - 1;
        let v = self.value();
        let width = shape[last];
        let mut maxes_shape = shape.clone();
        maxes_shape[last] = 1;
        let maxes = Tensor::new(
            maxes_shape,
            v.data()
                .chunks(width)
                .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                .collect(),
        );
        let shifted = self.sub(self.constant_like(maxes));
        let lse = shifted.exp().sum_axes(&[last]).ln();
        shifted.sub(lse)
    }

    pub fn softmax(self) -> Var<'t> {
        self.log_softmax().exp()
    }
}

/// Concatenates variables along `axis`.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Var<'t> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
    let out = Tensor::concat(&refs, axis);
    let lens: Vec<usize> = values.iter().map(|v| v.dim(axis)).collect();
    tape.record(out, parts, move |g| {
        let mut start = 0;
        lens.iter()
            .map(|&len| {
                let part = g.narrow(axis, start, len);
                start += len;
                Some(part)
            })
            .collect()
    })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
