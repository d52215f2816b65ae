//! Minimal NHWC tensor ops with hand-written backward passes.
//!
//! Everything is `f64`. Convolutions are 3×3, stride 1, zero padding 1,
//! lowered to a GEMM through `im2col`; weights are stored `[9·C_in, C_out]`
//! with the row index ordered `(ky, kx, c_in)`.

use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Tensor {
            n,
            h,
            w,
            c,
            data: vec![0.0; n * h * w * c],
        }
    }

    pub fn from_vec(n: usize, h: usize, w: usize, c: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * h * w * c, "tensor data length");
        Tensor { n, h, w, c, data }
    }

    pub fn like(&self) -> Self {
        Tensor::zeros(self.n, self.h, self.w, self.c)
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let stride = self.h * self.w * self.c;
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let stride = self.h * self.w * self.c;
        &mut self.data[i * stride..(i + 1) * stride]
    }
}

/// `C = A·B + beta·C` for row-major operands described by explicit strides.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= (m - 1) * rsc + n);
    // SAFETY: the assertions above check the extents; every caller
    // passes buffers sized exactly for the described matrices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

fn im2col(x: &Tensor, cols: &mut Vec<f64>) {
    let k = 9 * x.c;
    let (h, w, c) = (x.h, x.w, x.c);
    cols.clear();
    cols.reserve_exact(x.pixels() * k);
    let zeros = vec![0.0; c];
    for n in 0..x.n {
        for y in 0..h {
            for xx in 0..w {
                for ky in 0..3 {
                    let sy = y as isize + ky - 1;
                    for kx in 0..3 {
                        let sx = xx as isize + kx - 1;
                        if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                            cols.extend_from_slice(&zeros);
                        } else {
                            let src = ((n * h + sy as usize) * w + sx as usize) * c;
                            cols.extend_from_slice(&x.data[src..src + c]);
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], dx: &mut Tensor) {
    let (h, w, c) = (dx.h, dx.w, dx.c);
    let k = 9 * c;
    for n in 0..dx.n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((n * h + y) * w + xx) * k;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((n * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for (d, s) in dx.data[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// 3×3 same-padding convolution. Returns the output and the `im2col`
/// buffer needed by [`conv3x3_backward`].
pub fn conv3x3(x: &Tensor, weight: &[f64], bias: &[f64]) -> (Tensor, Vec<f64>) {
    let cout = bias.len();
    let k = 9 * x.c;
    debug_assert_eq!(weight.len(), k * cout);
    let mut cols = Vec::new();
    im2col(x, &mut cols);
    let m = x.pixels();
    let mut out = Tensor::zeros(x.n, x.h, x.w, cout);
    for row in out.data.chunks_exact_mut(cout) {
        row.copy_from_slice(bias);
    }
    gemm(m, k, cout, &cols, (k, 1), weight, (cout, 1), 1.0, &mut out.data, cout);
    (out, cols)
}

/// Accumulates weight/bias gradients and returns `dL/dx` when `input_shape`
/// is given.
pub fn conv3x3_backward(
    dy: &Tensor,
    cols: &[f64],
    weight: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    input_channels: usize,
    need_dx: bool,
) -> Option<Tensor> {
    let cout = dy.c;
    let k = 9 * input_channels;
    let m = dy.pixels();
    // dW += colsᵀ · dy
    gemm(k, m, cout, cols, (1, k), &dy.data, (cout, 1), 1.0, grad_w, cout);
    for row in dy.data.chunks_exact(cout) {
        for (g, v) in grad_b.iter_mut().zip(row) {
            *g += v;
        }
    }
    if !need_dx {
        return None;
    }
    let mut dcols = vec![0.0; m * k];
    // dcols = dy · Wᵀ
    gemm(m, cout, k, &dy.data, (cout, 1), weight, (1, cout), 0.0, &mut dcols, k);
    let mut dx = Tensor::zeros(dy.n, dy.h, dy.w, input_channels);
    col2im(&dcols, &mut dx);
    Some(dx)
}

/// Dense layer on `rows × in` input with `[in, out]` weights.
pub fn linear(x: &[f64], rows: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let out_dim = bias.len();
    let in_dim = x.len() / rows.max(1);
    let mut y = Vec::with_capacity(rows * out_dim);
    for _ in 0..rows {
        y.extend_from_slice(bias);
    }
    gemm(rows, in_dim, out_dim, x, (in_dim, 1), weight, (out_dim, 1), 1.0, &mut y, out_dim);
    y
}

pub fn linear_backward(
    dy: &[f64],
    x: &[f64],
    rows: usize,
    weight: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> Vec<f64> {
    let out_dim = grad_b.len();
    let in_dim = x.len() / rows.max(1);
    gemm(in_dim, rows, out_dim, x, (1, in_dim), dy, (out_dim, 1), 1.0, grad_w, out_dim);
    for row in dy.chunks_exact(out_dim) {
        for (g, v) in grad_b.iter_mut().zip(row) {
            *g += v;
        }
    }
    let mut dx = vec![0.0; rows * in_dim];
    gemm(rows, out_dim, in_dim, dy, (out_dim, 1), weight, (1, out_dim), 0.0, &mut dx, in_dim);
    dx
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[inline]
pub fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

#[inline]
pub fn silu_grad(v: f64) -> f64 {
    let s = sigmoid(v);
    s * (1.0 + v * (1.0 - s))
}

pub fn silu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| silu(v)).collect()
}

/// `dy ⊙ silu'(x)` in place on `dy`.
pub fn silu_backward(dy: &mut [f64], x: &[f64]) {
    for (d, &v) in dy.iter_mut().zip(x) {
        *d *= silu_grad(v);
    }
}

pub fn silu_tensor(x: &Tensor) -> Tensor {
    Tensor::from_vec(x.n, x.h, x.w, x.c, silu_vec(&x.data))
}

pub fn relu_tensor(x: &Tensor) -> Tensor {
    Tensor::from_vec(x.n, x.h, x.w, x.c, x.data.iter().map(|v| v.max(0.0)).collect())
}

pub fn relu_backward(dy: &mut [f64], x: &[f64]) {
    for (d, &v) in dy.iter_mut().zip(x) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
}

/// 2×2 average pooling (even spatial dims).
pub fn avgpool2(x: &Tensor) -> Tensor {
    let (h2, w2, c) = (x.h / 2, x.w / 2, x.c);
    let mut out = Tensor::zeros(x.n, h2, w2, c);
    for n in 0..x.n {
        for y in 0..h2 {
            for xx in 0..w2 {
                let dst = ((n * h2 + y) * w2 + xx) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = ((n * x.h + 2 * y + dy) * x.w + 2 * xx + dx) * c;
                    for ci in 0..c {
                        out.data[dst + ci] += 0.25 * x.data[src + ci];
                    }
                }
            }
        }
    }
    out
}

pub fn avgpool2_backward(dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(dy.n, dy.h * 2, dy.w * 2, dy.c);
    let c = dy.c;
    for n in 0..dy.n {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                let src = ((n * dy.h + y) * dy.w + xx) * c;
                for (oy, ox) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let dst = ((n * dx.h + 2 * y + oy) * dx.w + 2 * xx + ox) * c;
                    for ci in 0..c {
                        dx.data[dst + ci] = 0.25 * dy.data[src + ci];
                    }
                }
            }
        }
    }
    dx
}

/// 2×2 max pooling. Also returns the flat input index of every maximum.
pub fn maxpool2(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (h2, w2, c) = (x.h / 2, x.w / 2, x.c);
    let mut out = Tensor::zeros(x.n, h2, w2, c);
    let mut arg = vec![0; out.data.len()];
    for n in 0..x.n {
        for y in 0..h2 {
            for xx in 0..w2 {
                let dst = ((n * h2 + y) * w2 + xx) * c;
                for ci in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let src = ((n * x.h + 2 * y + dy) * x.w + 2 * xx + dx) * c + ci;
                        if x.data[src] > best {
                            best = x.data[src];
                            arg[dst + ci] = src;
                        }
                    }
                    out.data[dst + ci] = best;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(dy: &Tensor, arg: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(dy.n, dy.h * 2, dy.w * 2, dy.c);
    for (g, &i) in dy.data.iter().zip(arg) {
        dx.data[i] += g;
    }
    dx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.n, x.h * 2, x.w * 2, x.c);
    let c = x.c;
    for n in 0..x.n {
        for y in 0..out.h {
            for xx in 0..out.w {
                let src = ((n * x.h + y / 2) * x.w + xx / 2) * c;
                let dst = ((n * out.h + y) * out.w + xx) * c;
                out.data[dst..dst + c].copy_from_slice(&x.data[src..src + c]);
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(dy.n, dy.h / 2, dy.w / 2, dy.c);
    let c = dy.c;
    for n in 0..dy.n {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                let src = ((n * dy.h + y) * dy.w + xx) * c;
                let dst = ((n * dx.h + y / 2) * dx.w + xx / 2) * c;
                for ci in 0..c {
                    dx.data[dst + ci] += dy.data[src + ci];
                }
            }
        }
    }
    dx
}

/// Channel concatenation `[a | b]`.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let c = a.c + b.c;
    let mut out = Tensor::zeros(a.n, a.h, a.w, c);
    for p in 0..a.pixels() {
        out.data[p * c..p * c + a.c].copy_from_slice(&a.data[p * a.c..(p + 1) * a.c]);
        out.data[p * c + a.c..(p + 1) * c].copy_from_slice(&b.data[p * b.c..(p + 1) * b.c]);
    }
    out
}

pub fn split_channels(x: &Tensor, first: usize) -> (Tensor, Tensor) {
    let second = x.c - first;
    let mut a = Tensor::zeros(x.n, x.h, x.w, first);
    let mut b = Tensor::zeros(x.n, x.h, x.w, second);
    for p in 0..x.pixels() {
        a.data[p * first..(p + 1) * first].copy_from_slice(&x.data[p * x.c..p * x.c + first]);
        b.data[p * second..(p + 1) * second].copy_from_slice(&x.data[p * x.c + first..(p + 1) * x.c]);
    }
    (a, b)
}

/// Fold each `f×f` pixel block into channels, ordered `(dy, dx, c)`.
pub fn space_to_depth(x: &Tensor, f: usize) -> Tensor {
    if f == 1 {
        return x.clone();
    }
    let (h, w, c) = (x.h / f, x.w / f, x.c * f * f);
    let mut out = Tensor::zeros(x.n, h, w, c);
    for n in 0..x.n {
        for y in 0..x.h {
            for xx in 0..x.w {
                let src = ((n * x.h + y) * x.w + xx) * x.c;
                let dst = ((n * h + y / f) * w + xx / f) * c + ((y % f) * f + xx % f) * x.c;
                out.data[dst..dst + x.c].copy_from_slice(&x.data[src..src + x.c]);
            }
        }
    }
    out
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor, f: usize) -> Tensor {
    if f == 1 {
        return x.clone();
    }
    let (h, w, c) = (x.h * f, x.w * f, x.c / (f * f));
    let mut out = Tensor::zeros(x.n, h, w, c);
    for n in 0..x.n {
        for y in 0..h {
            for xx in 0..w {
                let dst = ((n * h + y) * w + xx) * c;
                let src = ((n * x.h + y / f) * x.w + xx / f) * x.c + ((y % f) * f + xx % f) * c;
                out.data[dst..dst + c].copy_from_slice(&x.data[src..src + c]);
            }
        }
    }
    out
}

/// Kaiming-style normal init scaled by `gain`.
pub fn init_normal<R: Rng + ?Sized>(dst: &mut [f64], fan_in: usize, gain: f64, rng: &mut R) {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    for v in dst {
        *v = std * rng.sample::<f64, _>(StandardNormal);
    }
}
