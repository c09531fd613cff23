//! Forward and adjoint kernels operating on plain tensors.

use crate::tensor::{numel, Tensor};

/// Result shape of a numpy-style broadcast between equal-rank shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(
        a.len(),
        b.len(),
        "broadcast requires equal rank: {a:?} vs {b:?}"
    );
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(
                x == y || x == 1 || y == 1,
                "cannot broadcast {a:?} with {b:?}"
            );
            x.max(y)
        })
        .collect()
}

fn strides_for(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Elementwise binary op with broadcasting.
pub fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    if b.numel() == 1 && b.rank() == a.rank() {
        let s = b.data()[0];
        return a.map(|v| f(v, s));
    }
    if a.numel() == 1 && a.rank() == b.rank() {
        let s = a.data()[0];
        return b.map(|v| f(s, v));
    }
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let sa = strides_for(a.shape(), &out_shape);
    let sb = strides_for(b.shape(), &out_shape);
    let n = numel(&out_shape);
    let rank = out_shape.len();
    let inner = out_shape[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let (ad, bd) = (a.data(), b.data());
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    while data.len() < n {
        for j in 0..inner {
            data.push(f(ad[oa + j * ia], bd[ob + j * ib]));
        }
        // advance the odometer over all but the innermost axis
        let mut d = rank - 1;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * idx[d];
            ob -= sb[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, data)
}

/// Sums `t` down to `shape`, the adjoint of broadcasting `shape` up to `t.shape()`.
pub fn sum_to_shape(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    assert_eq!(t.rank(), shape.len(), "sum_to_shape rank mismatch");
    let axes: Vec<usize> = (0..shape.len())
        .filter(|&d| shape[d] == 1 && t.dim(d) != 1)
        .collect();
    sum_axes(t, &axes)
}

/// Sums over the listed axes, keeping them as size-1 dimensions.
pub fn sum_axes(t: &Tensor, axes: &[usize]) -> Tensor {
    let shape = t.shape();
    let mut out_shape = shape.to_vec();
    for &a in axes {
        out_shape[a] = 1;
    }
    if axes.is_empty() {
        return t.clone();
    }
    let out_strides = strides_for(&out_shape, shape);
    let rank = shape.len();
    let mut out = vec![0.0; numel(&out_shape)];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let inner = shape[rank - 1];
    let is = out_strides[rank - 1];
    let data = t.data();
    let mut pos = 0;
    while pos < data.len() {
        for j in 0..inner {
            out[off + j * is] += data[pos + j];
        }
        pos += inner;
        let mut d = rank - 1;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            off += out_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= out_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

/// `c = beta * c + op(a) * op(b)` where `op` optionally transposes.
/// `a` is `m×k` after op, `b` is `k×n` after op.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: slice lengths were checked above and the strides describe
    // in-bounds row-major (or transposed) layouts of those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }
}

/// Unfolds one image `[C,H,W]` into columns `[C*kh*kw, oh*ow]`.
pub fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncol = oh * ow;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..oh {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if y < 0 || y >= g.height as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if x < 0 || x >= g.width as isize {
                            0.0
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
pub fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncol = oh * ow;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..oh {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..ow {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        if x >= 0 && x < g.width as isize {
                            dst[x as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `x: [N,C,H,W]`, `w: [O,C,kh,kw]` → `[N,O,oh,ow]`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let g = conv_geom(x, w, stride, pad);
    let (n, o) = (x.dim(0), w.dim(0));
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncol = oh * ow;
    let in_size = g.channels * g.height * g.width;
    let mut cols = vec![0.0; g.col_rows() * ncol];
    let mut out = vec![0.0; n * o * ncol];
    for s in 0..n {
        im2col(&x.data()[s * in_size..(s + 1) * in_size], &g, &mut cols);
        gemm(
            o,
            g.col_rows(),
            ncol,
            w.data(),
            false,
            &cols,
            false,
            &mut out[s * o * ncol..(s + 1) * o * ncol],
            0.0,
        );
    }
    Tensor::new(vec![n, o, oh, ow], out)
}

pub(crate) fn conv_geom(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> ConvGeom {
    assert_eq!(x.rank(), 4, "conv2d input must be NCHW");
    assert_eq!(w.rank(), 4, "conv2d weight must be OIHW");
    assert_eq!(x.dim(1), w.dim(1), "conv2d channel mismatch");
    assert!(stride >= 1);
    let g = ConvGeom {
        channels: x.dim(1),
        height: x.dim(2),
        width: x.dim(3),
        kh: w.dim(2),
        kw: w.dim(3),
        stride,
        pad,
    };
    assert!(
        g.height + 2 * pad >= g.kh && g.width + 2 * pad >= g.kw,
        "conv2d kernel larger than padded input"
    );
    g
}

/// Gradients of [`conv2d`] with respect to its input and weight.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let g = conv_geom(x, w, stride, pad);
    let (n, o) = (x.dim(0), w.dim(0));
    let ncol = g.out_h() * g.out_w();
    let rows = g.col_rows();
    let in_size = g.channels * g.height * g.width;
    let mut cols = vec![0.0; rows * ncol];
    let mut gx = need_x.then(|| vec![0.0; x.numel()]);
    let mut gw = need_w.then(|| vec![0.0; w.numel()]);
    for s in 0..n {
        let go = &grad_out.data()[s * o * ncol..(s + 1) * o * ncol];
        if let Some(gw) = gw.as_mut() {
            im2col(&x.data()[s * in_size..(s + 1) * in_size], &g, &mut cols);
            gemm(o, ncol, rows, go, false, &cols, true, gw, 1.0);
        }
        if let Some(gx) = gx.as_mut() {
            gemm(rows, o, ncol, w.data(), true, go, false, &mut cols, 0.0);
            col2im(&cols, &g, &mut gx[s * in_size..(s + 1) * in_size]);
        }
    }
    (
        gx.map(|d| Tensor::new(x.shape().to_vec(), d)),
        gw.map(|d| Tensor::new(w.shape().to_vec(), d)),
    )
}

/// Per-channel statistics of `[N, C, H, W]`: means and biased variances.
pub fn channel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, c) = (x.dim(0), x.dim(1));
    let plane = x.dim(2) * x.dim(3);
    let count = (n * plane) as f64;
    let d = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            s += d[(i * c + ch) * plane..(i * c + ch + 1) * plane]
                .iter()
                .sum::<f64>();
        }
        let m = s / count;
        let mut q = 0.0;
        for i in 0..n {
            q += d[(i * c + ch) * plane..(i * c + ch + 1) * plane]
                .iter()
                .map(|v| (v - m) * (v - m))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    (mean, var)
}

/// `y[n, c, ...] = x[n, c, ...] * scale[c] + shift[c]`.
pub fn channel_affine(x: &Tensor, scale: &[f64], shift: &[f64]) -> Tensor {
    let (n, c) = (x.dim(0), x.dim(1));
    let plane = x.dim(2) * x.dim(3);
    assert!(
        scale.len() == c && shift.len() == c,
        "affine parameters must have one value per channel"
    );
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..n {
        for ch in 0..c {
            let (a, b) = (scale[ch], shift[ch]);
            let src = &x.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
            out.extend(src.iter().map(|v| v * a + b));
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Per-channel sums of `a` and of `a * b` over all but the channel axis.
pub fn channel_dot(a: &Tensor, b: Option<&Tensor>) -> (Vec<f64>, Vec<f64>) {
    let (n, c) = (a.dim(0), a.dim(1));
    let plane = a.dim(2) * a.dim(3);
    let mut sum = vec![0.0; c];
    let mut dot = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
            let av = &a.data()[r.clone()];
            sum[ch] += av.iter().sum::<f64>();
            if let Some(b) = b {
                dot[ch] += av.iter().zip(&b.data()[r]).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    }
    (sum, dot)
}

/// Interpolation taps for one axis of a half-pixel-centred bilinear resize.
#[derive(Clone, Debug)]
pub struct Taps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

pub fn bilinear_taps(input: usize, output: usize) -> Taps {
    assert!(input > 0 && output > 0);
    let scale = input as f64 / output as f64;
    let mut taps = Taps {
        lo: Vec::with_capacity(output),
        hi: Vec::with_capacity(output),
        frac: Vec::with_capacity(output),
    };
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(input - 1);
        let hi = (lo + 1).min(input - 1);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(if hi == lo { 0.0 } else { src - lo as f64 });
    }
    taps
}

/// Bilinear resize of the last two axes of a rank-4 tensor.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    assert_eq!(x.rank(), 4, "resize expects NCHW");
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if h == out_h && w == out_w {
        return x.clone();
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = vec![0.0; n * c * out_h * out_w];
    let mut row = vec![0.0; out_w];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for oy in 0..out_h {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for (ox, r) in row.iter_mut().enumerate() {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                *r = top * (1.0 - fy) + bot * fy;
            }
            dst[oy * out_w..(oy + 1) * out_w].copy_from_slice(&row);
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward(grad_out: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let (n, c, oh, ow) = (
        grad_out.dim(0),
        grad_out.dim(1),
        grad_out.dim(2),
        grad_out.dim(3),
    );
    if oh == in_h && ow == in_w {
        return grad_out.clone();
    }
    let ty = bilinear_taps(in_h, oh);
    let tx = bilinear_taps(in_w, ow);
    let mut gx = vec![0.0; n * c * in_h * in_w];
    for p in 0..n * c {
        let go = &grad_out.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * in_h * in_w..(p + 1) * in_h * in_w];
        for oy in 0..oh {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..ow {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let g = go[oy * ow + ox];
                dst[y0 * in_w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * in_w + x1] += g * (1.0 - fy) * fx;
                dst[y1 * in_w + x0] += g * fy * (1.0 - fx);
                dst[y1 * in_w + x1] += g * fy * fx;
            }
        }
    }
    Tensor::new(vec![n, c, in_h, in_w], gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_channel_bias() {
        let x = Tensor::from_fn([2, 3, 2, 2], |i| i as f64);
        let b = Tensor::new([1, 3, 1, 1], vec![100.0, 200.0, 300.0]);
        let y = broadcast_zip(&x, &b, |a, b| a + b);
        assert_eq!(y.shape(), &[2, 3, 2, 2]);
        assert_eq!(y.data()[0], 100.0);
        assert_eq!(y.data()[4], 204.0);
        assert_eq!(y.data()[12], 112.0);
        let back = sum_to_shape(&Tensor::ones([2, 3, 2, 2]), &[1, 3, 1, 1]);
        assert_eq!(back.data(), &[8.0, 8.0, 8.0]);
    }

    #[test]
    fn broadcast_both_sides() {
        let a = Tensor::new([2, 1], vec![1.0, 2.0]);
        let b = Tensor::new([1, 3], vec![10.0, 20.0, 30.0]);
        let y = broadcast_zip(&a, &b, |a, b| a * b);
        assert_eq!(y.data(), &[10.0, 20.0, 30.0, 20.0, 40.0, 60.0]);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = Tensor::from_fn([1, 2, 5, 4], |i| ((i * 7) % 11) as f64 - 5.0);
        let w = Tensor::from_fn([3, 2, 3, 3], |i| ((i * 3) % 5) as f64 - 2.0);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let y = conv2d(&x, &w, stride, pad);
            let (oh, ow) = (y.dim(2), y.dim(3));
            for o in 0..3 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..2 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let yy = (oy * stride + ki) as isize - pad as isize;
                                    let xx = (ox * stride + kj) as isize - pad as isize;
                                    if yy < 0 || yy >= 5 || xx < 0 || xx >= 4 {
                                        continue;
                                    }
                                    acc += x.data()[(c * 5 + yy as usize) * 4 + xx as usize]
                                        * w.data()[((o * 2 + c) * 3 + ki) * 3 + kj];
                                }
                            }
                        }
                        assert_eq!(y.data()[(o * oh + oy) * ow + ox], acc);
                    }
                }
            }
        }
    }

    #[test]
    fn resize_identity_and_constant() {
        let x = Tensor::full([1, 1, 3, 5], 0.7);
        let y = resize_bilinear(&x, 8, 2);
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
        let z = Tensor::from_fn([1, 2, 4, 4], |i| i as f64);
        assert_eq!(resize_bilinear(&z, 4, 4), z);
    }

    #[test]
    fn resize_halving_averages_pairs() {
        let x = Tensor::new([1, 1, 1, 4], vec![0.0, 2.0, 4.0, 6.0]);
        let y = resize_bilinear(&x, 1, 2);
        assert_eq!(y.data(), &[1.0, 5.0]);
    }
}
