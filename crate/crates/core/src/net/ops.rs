//! Tensor operations with matching backward passes.
//!
//! Every op works on `(N, C, H, W)` tensors and loops over the batch, so each
//! sample's result is independent of its batch-mates.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point element type of tensors and parameters.
pub trait Real: Float + FromPrimitive + NumAssign + Sum + Default + Debug + Send + Sync + 'static {
    /// `c = alpha * op(a) * op(b) + beta * c`, all row-major with explicit
    /// strides. `op(a)` is `m x k`, `op(b)` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: MatView<'_, Self>, b: MatView<'_, Self>, beta: Self, c: &mut [Self]);

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite float")
    }

    /// Largest value strictly below `self`.
    fn below(self) -> Self;
}

/// A borrowed matrix, optionally read transposed.
#[derive(Clone, Copy)]
pub struct MatView<'a, T> {
    pub data: &'a [T],
    /// Row stride of the stored (untransposed) matrix.
    pub ld: usize,
    pub transposed: bool,
}

impl<'a, T> MatView<'a, T> {
    pub fn new(data: &'a [T], ld: usize) -> Self {
        MatView { data, ld, transposed: false }
    }

    pub fn t(data: &'a [T], ld: usize) -> Self {
        MatView { data, ld, transposed: true }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.ld as isize)
        } else {
            (self.ld as isize, 1)
        }
    }

    /// Minimum buffer length for an `rows x cols` logical view.
    fn required(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return 0;
        }
        let (r, c) = if self.transposed { (cols, rows) } else { (rows, cols) };
        (r - 1) * self.ld + c
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(m: usize, k: usize, n: usize, a: MatView<'_, Self>, b: MatView<'_, Self>, beta: Self, c: &mut [Self]) {
                assert!(a.data.len() >= a.required(m, k), "gemm: lhs too short");
                assert!(b.data.len() >= b.required(k, n), "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = a.strides();
                let (rsb, csb) = b.strides();
                // SAFETY: the asserts above guarantee every index the kernel
                // touches lies inside the three slices.
                unsafe {
                    $gemm(
                        m, k, n, 1.0, a.data.as_ptr(), rsa, csa, b.data.as_ptr(), rsb, csb, beta,
                        c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }

            fn below(self) -> Self {
                self.next_down()
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    /// `[N, C, H, W]`.
    pub shape: [usize; 4],
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "tensor data length");
        Tensor { shape, data }
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.sample_len();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let s = self.sample_len();
        &mut self.data[n * s..(n + 1) * s]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.shape[2] * self.shape[3];
        let off = n * self.sample_len() + c * hw;
        &self.data[off..off + hw]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// Concatenates samples along the batch axis.
    pub fn stack(parts: &[Tensor<T>]) -> Tensor<T> {
        let first = parts.first().expect("stack of zero tensors");
        let mut shape = first.shape;
        shape[0] = parts.iter().map(|p| p.shape[0]).sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            assert_eq!(p.shape[1..], first.shape[1..], "stack shape mismatch");
            data.extend_from_slice(&p.data);
        }
        Tensor { shape, data }
    }
}

/// Weights and bias of a 3x3 convolution, weights laid out `(out, in, 3, 3)`.
/// An empty bias means the layer has none.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvLayer<T> {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        ConvLayer {
            in_ch,
            out_ch,
            weight: vec![T::zero(); out_ch * in_ch * 9],
            bias: vec![T::zero(); out_ch],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Unrolls 3x3 zero-padded neighbourhoods: row `ci*9 + ky*3 + kx` holds the
/// input shifted by `(ky-1, kx-1)`.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, col: &mut Vec<T>) {
    let hw = h * w;
    col.clear();
    col.resize(c * 9 * hw, T::zero());
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                let (x_lo, x_hi) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    let sx0 = x_lo + kx - 1;
                    dst[x_lo..x_hi].copy_from_slice(&src[sx0..sx0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, gx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut gx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                let (x_lo, x_hi) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let sx0 = x_lo + kx - 1;
                    let dst = &mut plane[sy as usize * w + sx0..][..x_hi - x_lo];
                    for (d, &s) in dst.iter_mut().zip(&row[y * w + x_lo..y * w + x_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// 3x3 convolution, stride 1, zero padding 1.
pub fn conv3x3_forward<T: Real>(x: &Tensor<T>, layer: &ConvLayer<T>) -> Tensor<T> {
    assert_eq!(x.c(), layer.in_ch, "conv input channels");
    let (n, h, w) = (x.n(), x.h(), x.w());
    let hw = h * w;
    let co = layer.out_ch;
    let k = layer.in_ch * 9;
    let mut out = Tensor::zeros([n, co, h, w]);
    let mut col = Vec::new();
    for s in 0..n {
        im2col(x.sample(s), layer.in_ch, h, w, &mut col);
        let y = out.sample_mut(s);
        for (o, &b) in layer.bias.iter().enumerate() {
            y[o * hw..(o + 1) * hw].fill(b);
        }
        T::gemm(co, k, hw, MatView::new(&layer.weight, k), MatView::new(&col, hw), T::one(), y);
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)` for upstream `gy`.
pub fn conv3x3_backward<T: Real>(x: &Tensor<T>, layer: &ConvLayer<T>, gy: &Tensor<T>) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, h, w) = (x.n(), x.h(), x.w());
    let hw = h * w;
    let co = layer.out_ch;
    let k = layer.in_ch * 9;
    assert_eq!(gy.shape, [n, co, h, w], "conv upstream gradient shape");
    let mut gx = Tensor::zeros(x.shape);
    let mut gw = vec![T::zero(); co * k];
    let mut gb = vec![T::zero(); layer.bias.len()];
    let mut col = Vec::new();
    let mut gcol = vec![T::zero(); k * hw];
    for s in 0..n {
        let g = gy.sample(s);
        for (o, b) in gb.iter_mut().enumerate() {
            *b += g[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
        }
        im2col(x.sample(s), layer.in_ch, h, w, &mut col);
        // gw (co x k) += g (co x hw) * col^T (hw x k)
        T::gemm(co, hw, k, MatView::new(g, hw), MatView::t(&col, hw), T::one(), &mut gw);
        // gcol (k x hw) = W^T (k x co) * g (co x hw)
        T::gemm(k, co, hw, MatView::t(&layer.weight, k), MatView::new(g, hw), T::zero(), &mut gcol);
        col2im(&gcol, layer.in_ch, h, w, gx.sample_mut(s));
    }
    (gx, gw, gb)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// SiLU, `x * sigmoid(x)`.
pub fn silu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: x.shape,
        data: x.data.iter().map(|&v| v * sigmoid(v)).collect(),
    }
}

pub fn silu_backward<T: Real>(x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: x.shape,
        data: x
            .data
            .iter()
            .zip(&gy.data)
            .map(|(&v, &g)| {
                let s = sigmoid(v);
                g * s * (T::one() + v * (T::one() - s))
            })
            .collect(),
    }
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Largest group count not above `max_groups` that divides `channels`.
pub fn group_count(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// Per-sample normalization over groups of channels, without learned
/// scale or shift. Returns the output and `1 / sqrt(var + eps)` per
/// (sample, group).
pub fn group_norm_forward<T: Real>(x: &Tensor<T>, groups: usize) -> (Tensor<T>, Vec<T>) {
    let [n, c, h, w] = x.shape;
    assert!(groups > 0 && c % groups == 0, "groups must divide channels");
    let len = c / groups * h * w;
    let eps = T::of(GROUP_NORM_EPS);
    let inv_len = T::of(1.0 / len as f64);
    let mut y = Tensor::zeros(x.shape);
    let mut inv_std = Vec::with_capacity(n * groups);
    for (xs, ys) in x.data.chunks(len).zip(y.data.chunks_mut(len)).take(n * groups) {
        let mean = xs.iter().fold(T::zero(), |a, &v| a + v) * inv_len;
        let var = xs.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_len;
        let is = T::one() / (var + eps).sqrt();
        for (o, &v) in ys.iter_mut().zip(xs) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    (y, inv_std)
}

/// Gradient of [`group_norm_forward`] given its output `y`.
pub fn group_norm_backward<T: Real>(y: &Tensor<T>, inv_std: &[T], groups: usize, gy: &Tensor<T>) -> Tensor<T> {
    let [_, c, h, w] = y.shape;
    let len = c / groups * h * w;
    let inv_len = T::of(1.0 / len as f64);
    let mut gx = Tensor::zeros(y.shape);
    for (((ys, gs), out), &is) in y.data.chunks(len).zip(gy.data.chunks(len)).zip(gx.data.chunks_mut(len)).zip(inv_std) {
        let mean_g = gs.iter().fold(T::zero(), |a, &v| a + v) * inv_len;
        let mean_gy = ys.iter().zip(gs).fold(T::zero(), |a, (&yv, &g)| a + yv * g) * inv_len;
        for ((o, &yv), &g) in out.iter_mut().zip(ys).zip(gs) {
            *o = is * (g - mean_g - yv * mean_gy);
        }
    }
    gx
}

/// `range * tanh(x)`, clamped so rounding never lands on `±range`.
pub fn scaled_tanh_forward<T: Real>(x: &Tensor<T>, range: T) -> Tensor<T> {
    let top = range.below();
    Tensor {
        shape: x.shape,
        data: x.data.iter().map(|&v| (range * v.tanh()).max(-top).min(top)).collect(),
    }
}

pub fn scaled_tanh_backward<T: Real>(x: &Tensor<T>, range: T, gy: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: x.shape,
        data: x
            .data
            .iter()
            .zip(&gy.data)
            .map(|(&v, &g)| {
                let t = v.tanh();
                g * range * (T::one() - t * t)
            })
            .collect(),
    }
}

/// 2x2 max-pool, stride 2. Also returns the flat input index of each max.
pub fn maxpool2_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [n, c, h, w] = x.shape;
    assert!(h % 2 == 0 && w % 2 == 0, "max-pool needs even extent");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut idx = Vec::with_capacity(out.data.len());
    let mut o = 0;
    for nc in 0..n * c {
        let base = nc * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for cand in [best + 1, best + w, best + w + 1] {
                    if x.data[cand] > x.data[best] {
                        best = cand;
                    }
                }
                out.data[o] = x.data[best];
                idx.push(best as u32);
                o += 1;
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_backward<T: Real>(input_shape: [usize; 4], idx: &[u32], gy: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(input_shape);
    for (&i, &g) in idx.iter().zip(&gy.data) {
        gx.data[i as usize] += g;
    }
    gx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape;
    let ow = 2 * w;
    let mut out = Tensor::zeros([n, c, 2 * h, ow]);
    for nc in 0..n * c {
        let src = &x.data[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out.data[nc * 4 * h * w..(nc + 1) * 4 * h * w];
        for i in 0..h {
            for j in 0..w {
                let v = src[i * w + j];
                let o = 2 * i * ow + 2 * j;
                dst[o] = v;
                dst[o + 1] = v;
                dst[o + ow] = v;
                dst[o + ow + 1] = v;
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(gy: &Tensor<T>) -> Tensor<T> {
    let [n, c, oh, ow] = gy.shape;
    let (h, w) = (oh / 2, ow / 2);
    let mut gx = Tensor::zeros([n, c, h, w]);
    for nc in 0..n * c {
        let src = &gy.data[nc * oh * ow..(nc + 1) * oh * ow];
        let dst = &mut gx.data[nc * h * w..(nc + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let o = 2 * i * ow + 2 * j;
                dst[i * w + j] = src[o] + src[o + 1] + src[o + ow] + src[o + ow + 1];
            }
        }
    }
    gx
}

/// Channel concatenation `[a, b]`.
pub fn concat_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!((a.n(), a.h(), a.w()), (b.n(), b.h(), b.w()), "concat shape mismatch");
    let mut out = Vec::with_capacity(a.data.len() + b.data.len());
    for s in 0..a.n() {
        out.extend_from_slice(a.sample(s));
        out.extend_from_slice(b.sample(s));
    }
    Tensor::from_vec([a.n(), a.c() + b.c(), a.h(), a.w()], out)
}

/// Splits a concatenated gradient back into `(grad_a, grad_b)`.
pub fn concat_backward<T: Real>(gy: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = gy.shape;
    let split = ca * h * w;
    let mut ga = Vec::with_capacity(n * split);
    let mut gb = Vec::with_capacity(n * (c - ca) * h * w);
    for s in 0..n {
        let g = gy.sample(s);
        ga.extend_from_slice(&g[..split]);
        gb.extend_from_slice(&g[split..]);
    }
    (Tensor::from_vec([n, ca, h, w], ga), Tensor::from_vec([n, c - ca, h, w], gb))
}
