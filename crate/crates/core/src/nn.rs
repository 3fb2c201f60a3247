//! Minimal layer library with explicit backward passes.
//!
//! Parameters of a network live in one flat buffer; each layer knows the
//! offsets of its tensors. Convolution, normalization and activation layers
//! are generic over the scalar type so the same network can run in `f32`
//! (training) or `f64` (gradient checks). Activations are per-sample
//! `(C, H, W)` arrays except for the fully connected layers, which run on
//! `(batch, features)` matrices in `f64`.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Sub};

use matrixmultiply::{dgemm, sgemm};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Name, shape and location of one tensor in the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Allocates named tensors back to back.
#[derive(Debug, Default)]
pub struct ParamAllocator {
    pub specs: Vec<ParamSpec>,
    pub total: usize,
}

impl ParamAllocator {
    pub fn alloc(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.total;
        let spec = ParamSpec { name, shape, offset };
        self.total += spec.len();
        self.specs.push(spec);
        offset
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scalar type of the convolutional layers.
pub trait Real:
    Copy
    + Default
    + Debug
    + Send
    + Sync
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + AddAssign
    + 'static
{
    const ZERO: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = a · b` (or `c += a · b` with `accumulate`) for row-major `a: m×k`,
    /// `b: k×n`; `ta` / `tb` read the stored matrices transposed.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool, c: &mut [Self], accumulate: bool);
}

macro_rules! impl_real {
    ($t:ty, $gemm:ident) => {
        impl Real for $t {
            const ZERO: Self = 0.0;

            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn to_f64(self) -> f64 {
                self as f64
            }

            fn gemm(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool, c: &mut [Self], accumulate: bool) {
                let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                // SAFETY: slice lengths cover the strided extents asserted above.
                unsafe {
                    $gemm(
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
                        if accumulate { 1.0 } else { 0.0 },
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, sgemm);
impl_real!(f64, dgemm);

fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], accumulate: bool) {
    f64::gemm(m, k, n, a, ta, b, tb, c, accumulate)
}

/// Output positions `o` in `[lo, hi)` whose input index `o * stride + offset`
/// falls inside `[0, len)`.
fn valid_range(offset: isize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let hi = ((len as isize - offset + s - 1) / s).clamp(0, out_len as isize);
    (lo.max(0) as usize, (hi as usize).max(lo.max(0) as usize))
}

/// Square convolution with zero padding `kernel / 2`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: usize,
    pub bias: usize,
}

pub struct ConvCache<T> {
    cols: Vec<T>,
    in_shape: Shape3,
}

impl Conv2d {
    pub fn new(alloc: &mut ParamAllocator, name: &str, in_c: usize, out_c: usize, kernel: usize, stride: usize) -> Self {
        let weight = alloc.alloc(format!("{name}.weight"), vec![out_c, in_c, kernel, kernel]);
        let bias = alloc.alloc(format!("{name}.bias"), vec![out_c]);
        Self {
            in_c,
            out_c,
            kernel,
            stride,
            weight,
            bias,
        }
    }

    pub fn out_shape(&self, s: Shape3) -> Shape3 {
        let pad = self.kernel / 2;
        Shape3 {
            c: self.out_c,
            h: (s.h + 2 * pad - self.kernel) / self.stride + 1,
            w: (s.w + 2 * pad - self.kernel) / self.stride + 1,
        }
    }

    fn k_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        let fan_in = self.k_len() as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        for w in &mut params[self.weight..self.weight + self.out_c * self.k_len()] {
            *w = normal.sample(rng);
        }
        params[self.bias..self.bias + self.out_c].fill(0.0);
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    fn im2col<T: Real>(&self, x: &[T], s: Shape3, o: Shape3) -> Vec<T> {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let st = self.stride;
        let p = o.h * o.w;
        let mut cols = vec![T::ZERO; self.k_len() * p];
        for ci in 0..s.c {
            let plane = &x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
            for ky in 0..k {
                let (y_lo, y_hi) = valid_range(ky as isize - pad, st, s.h, o.h);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x_lo, x_hi) = valid_range(dx, st, s.w, o.w);
                    let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in y_lo..y_hi {
                        let iy = oy * st + ky - pad as usize;
                        let src = &plane[iy * s.w..(iy + 1) * s.w];
                        let dst = &mut row[oy * o.w..(oy + 1) * o.w];
                        if x_lo >= x_hi {
                            continue;
                        }
                        let first = (x_lo as isize * st as isize + dx) as usize;
                        if st == 1 {
                            dst[x_lo..x_hi].copy_from_slice(&src[first..first + (x_hi - x_lo)]);
                        } else {
                            for (d, s) in dst[x_lo..x_hi].iter_mut().zip(src[first..].iter().step_by(st)) {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T], s: Shape3, o: Shape3) -> Vec<T> {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let st = self.stride;
        let p = o.h * o.w;
        let mut out = vec![T::ZERO; s.len()];
        for ci in 0..s.c {
            let plane = &mut out[ci * s.h * s.w..(ci + 1) * s.h * s.w];
            for ky in 0..k {
                let (y_lo, y_hi) = valid_range(ky as isize - pad, st, s.h, o.h);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x_lo, x_hi) = valid_range(dx, st, s.w, o.w);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                    for oy in y_lo..y_hi {
                        let iy = oy * st + ky - pad as usize;
                        let dst = &mut plane[iy * s.w..(iy + 1) * s.w];
                        let src = &row[oy * o.w + x_lo..oy * o.w + x_hi];
                        let first = (x_lo as isize * st as isize + dx) as usize;
                        for (d, v) in dst[first..].iter_mut().step_by(st).zip(src) {
                            *d += *v;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &[T], s: Shape3) -> (Vec<T>, Shape3, ConvCache<T>) {
        debug_assert_eq!(s.c, self.in_c);
        let o = self.out_shape(s);
        let p = o.h * o.w;
        let cols = if self.is_pointwise() { x.to_vec() } else { self.im2col(x, s, o) };
        let mut out = vec![T::ZERO; self.out_c * p];
        let w = &params[self.weight..self.weight + self.out_c * self.k_len()];
        T::gemm(self.out_c, self.k_len(), p, w, false, &cols, false, &mut out, false);
        for (oc, chunk) in out.chunks_mut(p).enumerate() {
            let b = params[self.bias + oc];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        (out, o, ConvCache { cols, in_shape: s })
    }

    /// Accumulates parameter gradients into `grads`; returns the input
    /// gradient when `need_input_grad`.
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        cache: &ConvCache<T>,
        dout: &[T],
        grads: &mut [T],
        need_input_grad: bool,
    ) -> Option<Vec<T>> {
        let s = cache.in_shape;
        let o = self.out_shape(s);
        let p = o.h * o.w;
        let kl = self.k_len();
        T::gemm(
            self.out_c,
            p,
            kl,
            dout,
            false,
            &cache.cols,
            true,
            &mut grads[self.weight..self.weight + self.out_c * kl],
            true,
        );
        for (oc, chunk) in dout.chunks(p).enumerate() {
            let sum = chunk.iter().fold(0.0, |a, v| a + v.to_f64());
            grads[self.bias + oc] += T::from_f64(sum);
        }
        if !need_input_grad {
            return None;
        }
        let w = &params[self.weight..self.weight + self.out_c * kl];
        let mut dcols = vec![T::ZERO; kl * p];
        T::gemm(kl, self.out_c, p, w, true, dout, false, &mut dcols, false);
        if self.is_pointwise() {
            Some(dcols)
        } else {
            Some(self.col2im(&dcols, s, o))
        }
    }
}

/// Group normalization with a per-channel affine transform.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    pub gamma: usize,
    pub beta: usize,
}

pub struct NormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<f64>,
}

pub const NORM_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new(alloc: &mut ParamAllocator, name: &str, channels: usize, groups: usize) -> Self {
        assert!(groups >= 1 && channels % groups == 0, "groups must divide channels");
        let gamma = alloc.alloc(format!("{name}.gamma"), vec![channels]);
        let beta = alloc.alloc(format!("{name}.beta"), vec![channels]);
        Self {
            channels,
            groups,
            gamma,
            beta,
        }
    }

    pub fn init(&self, params: &mut [f64]) {
        params[self.gamma..self.gamma + self.channels].fill(1.0);
        params[self.beta..self.beta + self.channels].fill(0.0);
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &[T], s: Shape3) -> (Vec<T>, NormCache<T>) {
        let hw = s.h * s.w;
        let per_group = self.channels / self.groups * hw;
        let n = per_group as f64;
        let mut xhat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let xs = &x[g * per_group..(g + 1) * per_group];
            let (sum, sq) = xs.iter().fold((0.0, 0.0), |(a, b), v| {
                let v = v.to_f64();
                (a + v, b + v * v)
            });
            let mean = sum / n;
            let var = (sq / n - mean * mean).max(0.0);
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(is);
            let (tm, ti) = (T::from_f64(mean), T::from_f64(is));
            let c0 = g * per_group / hw;
            for (ci, chunk) in xs.chunks(hw).enumerate() {
                let (ga, be) = (params[self.gamma + c0 + ci], params[self.beta + c0 + ci]);
                for &v in chunk {
                    let h = (v - tm) * ti;
                    xhat.push(h);
                    out.push(h * ga + be);
                }
            }
        }
        (out, NormCache { xhat, inv_std })
    }

    pub fn backward<T: Real>(&self, params: &[T], cache: &NormCache<T>, dout: &[T], s: Shape3, grads: &mut [T]) -> Vec<T> {
        let hw = s.h * s.w;
        let per_c = self.channels / self.groups;
        let n = (per_c * hw) as f64;
        let mut dx = vec![T::ZERO; dout.len()];
        for g in 0..self.groups {
            let (mut sum_d, mut sum_dx) = (0.0, 0.0);
            for c in g * per_c..(g + 1) * per_c {
                let ga = params[self.gamma + c].to_f64();
                let (mut dg, mut db) = (0.0, 0.0);
                for i in c * hw..(c + 1) * hw {
                    let d = dout[i].to_f64();
                    let h = cache.xhat[i].to_f64();
                    dg += d * h;
                    db += d;
                }
                sum_d += db * ga;
                sum_dx += dg * ga;
                grads[self.gamma + c] += T::from_f64(dg);
                grads[self.beta + c] += T::from_f64(db);
            }
            let is = cache.inv_std[g];
            let (a, b) = (sum_d / n, sum_dx / n);
            for c in g * per_c..(g + 1) * per_c {
                let k = T::from_f64(is * params[self.gamma + c].to_f64());
                let (ta, tb) = (T::from_f64(a), T::from_f64(b));
                for i in c * hw..(c + 1) * hw {
                    // is * (ga * dout - mean(ga * dout) - xhat * mean(ga * dout * xhat))
                    dx[i] = k * dout[i] - T::from_f64(is) * (ta + cache.xhat[i] * tb);
                }
            }
        }
        dx
    }
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    x.iter_mut().for_each(|v| {
        if *v < T::ZERO {
            *v = T::ZERO
        }
    });
}

/// Zeroes gradient entries where the forward output was not positive.
pub fn relu_backward<T: Real>(out: &[T], dout: &mut [T]) {
    for (d, &o) in dout.iter_mut().zip(out) {
        if o <= T::ZERO {
            *d = T::ZERO;
        }
    }
}

fn pool_bins(n: usize, bins: usize) -> Vec<(usize, usize)> {
    (0..bins)
        .map(|i| ((i * n) / bins, ((i + 1) * n).div_ceil(bins)))
        .collect()
}

/// Adaptive average pooling of a `(C, H, W)` map to `(C, ph, pw)`.
pub fn adaptive_avg_pool(x: &[f64], s: Shape3, ph: usize, pw: usize) -> Vec<f64> {
    let (rows, cols) = (pool_bins(s.h, ph), pool_bins(s.w, pw));
    let mut out = Vec::with_capacity(s.c * ph * pw);
    for c in 0..s.c {
        let plane = &x[c * s.h * s.w..(c + 1) * s.h * s.w];
        for &(y0, y1) in &rows {
            for &(x0, x1) in &cols {
                let mut sum = 0.0;
                for y in y0..y1 {
                    sum += plane[y * s.w + x0..y * s.w + x1].iter().sum::<f64>();
                }
                out.push(sum / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward(dout: &[f64], s: Shape3, ph: usize, pw: usize) -> Vec<f64> {
    let (rows, cols) = (pool_bins(s.h, ph), pool_bins(s.w, pw));
    let mut dx = vec![0.0; s.len()];
    let mut i = 0;
    for c in 0..s.c {
        let plane = &mut dx[c * s.h * s.w..(c + 1) * s.h * s.w];
        for &(y0, y1) in &rows {
            for &(x0, x1) in &cols {
                let g = dout[i] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    plane[y * s.w + x0..y * s.w + x1].iter_mut().for_each(|v| *v += g);
                }
                i += 1;
            }
        }
    }
    dx
}

/// Fully connected layer applied to a row-major `(batch, in)` matrix.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_f: usize,
    pub out_f: usize,
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn new(alloc: &mut ParamAllocator, name: &str, in_f: usize, out_f: usize) -> Self {
        let weight = alloc.alloc(format!("{name}.weight"), vec![out_f, in_f]);
        let bias = alloc.alloc(format!("{name}.bias"), vec![out_f]);
        Self {
            in_f,
            out_f,
            weight,
            bias,
        }
    }

    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng, gain: f64) {
        let normal = Normal::new(0.0, gain * (2.0 / self.in_f as f64).sqrt()).expect("positive std");
        for w in &mut params[self.weight..self.weight + self.in_f * self.out_f] {
            *w = normal.sample(rng);
        }
        params[self.bias..self.bias + self.out_f].fill(0.0);
    }

    pub fn forward(&self, params: &[f64], x: &[f64], batch: usize) -> Vec<f64> {
        let mut y = vec![0.0; batch * self.out_f];
        let w = &params[self.weight..self.weight + self.in_f * self.out_f];
        gemm(batch, self.in_f, self.out_f, x, false, w, true, &mut y, false);
        let b = &params[self.bias..self.bias + self.out_f];
        for row in y.chunks_mut(self.out_f) {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        y
    }

    pub fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], batch: usize, grads: &mut [f64]) -> Vec<f64> {
        gemm(
            self.out_f,
            batch,
            self.in_f,
            dy,
            true,
            x,
            false,
            &mut grads[self.weight..self.weight + self.in_f * self.out_f],
            true,
        );
        for row in dy.chunks(self.out_f) {
            for (g, d) in grads[self.bias..self.bias + self.out_f].iter_mut().zip(row) {
                *g += d;
            }
        }
        let w = &params[self.weight..self.weight + self.in_f * self.out_f];
        let mut dx = vec![0.0; batch * self.in_f];
        gemm(batch, self.out_f, self.in_f, dy, false, w, false, &mut dx, false);
        dx
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // direct nested-loop convolution as an independent reference
    fn conv_reference(conv: &Conv2d, params: &[f64], x: &[f64], s: Shape3) -> Vec<f64> {
        let o = conv.out_shape(s);
        let k = conv.kernel;
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; o.len()];
        for oc in 0..conv.out_c {
            for oy in 0..o.h {
                for ox in 0..o.w {
                    let mut acc = params[conv.bias + oc];
                    for ic in 0..s.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride) as isize + ky as isize - pad;
                                let ix = (ox * conv.stride) as isize + kx as isize - pad;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                let wi = ((oc * s.c + ic) * k + ky) * k + kx;
                                acc += params[conv.weight + wi] * x[(ic * s.h + iy as usize) * s.w + ix as usize];
                            }
                        }
                    }
                    out[(oc * o.h + oy) * o.w + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(stride, h, w) in &[(1usize, 5usize, 6usize), (2, 7, 8), (2, 8, 8)] {
            let mut alloc = ParamAllocator::default();
            let conv = Conv2d::new(&mut alloc, "c", 3, 4, 3, stride);
            let mut params = vec![0.0; alloc.total];
            conv.init(&mut params, &mut rng);
            params[conv.bias] = 0.3;
            let s = Shape3 { c: 3, h, w };
            let x: Vec<f64> = (0..s.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (out, o, _) = conv.forward(&params, &x, s);
            assert_eq!(o, conv.out_shape(s));
            let reference = conv_reference(&conv, &params, &x, s);
            for (a, b) in out.iter().zip(&reference) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut alloc = ParamAllocator::default();
        let conv = Conv2d::new(&mut alloc, "c", 2, 3, 3, 2);
        let mut params = vec![0.0; alloc.total];
        conv.init(&mut params, &mut rng);
        let s = Shape3 { c: 2, h: 5, w: 4 };
        let x: Vec<f64> = (0..s.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (out, _, cache) = conv.forward(&params, &x, s);
        let r: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut grads = vec![0.0; alloc.total];
        let dx = conv.backward(&params, &cache, &r, &mut grads, true).unwrap();
        let f = |x: &[f64], p: &[f64]| -> f64 {
            conv.forward(p, x, s).0.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&xp, &params) - f(&xm, &params)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-7, "input {i}");
        }
        for i in 0..params.len() {
            let (mut pp, mut pm) = (params.clone(), params.clone());
            pp[i] += h;
            pm[i] -= h;
            let fd = (f(&x, &pp) - f(&x, &pm)) / (2.0 * h);
            assert!((fd - grads[i]).abs() < 1e-7, "param {i}");
        }
    }

    #[test]
    fn group_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut alloc = ParamAllocator::default();
        let gn = GroupNorm::new(&mut alloc, "n", 4, 2);
        let mut params: Vec<f64> = (0..alloc.total).map(|_| rng.gen_range(0.5..1.5)).collect();
        params[gn.beta] = 0.1;
        let s = Shape3 { c: 4, h: 3, w: 2 };
        let x: Vec<f64> = (0..s.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let r: Vec<f64> = (0..s.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, cache) = gn.forward(&params, &x, s);
        let mut grads = vec![0.0; alloc.total];
        let dx = gn.backward(&params, &cache, &r, s, &mut grads);
        let f = |x: &[f64], p: &[f64]| -> f64 { gn.forward(p, x, s).0.iter().zip(&r).map(|(a, b)| a * b).sum() };
        let h = 1e-6;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            assert!(((f(&xp, &params) - f(&xm, &params)) / (2.0 * h) - dx[i]).abs() < 1e-6);
        }
        for i in 0..params.len() {
            let (mut pp, mut pm) = (params.clone(), params.clone());
            pp[i] += h;
            pm[i] -= h;
            assert!(((f(&x, &pp) - f(&x, &pm)) / (2.0 * h) - grads[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn adaptive_pool_bins_cover_input() {
        let s = Shape3 { c: 1, h: 5, w: 3 };
        let x: Vec<f64> = (0..15).map(|v| v as f64).collect();
        let out = adaptive_avg_pool(&x, s, 2, 2);
        // rows [0,3) and [2,5); cols [0,2) and [1,3)
        assert_eq!(out, vec![3.5, 4.5, 9.5, 10.5]);
        let ones = adaptive_avg_pool_backward(&[1.0; 4], s, 2, 2);
        assert!((ones.iter().sum::<f64>() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn linear_batched_matches_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut alloc = ParamAllocator::default();
        let lin = Linear::new(&mut alloc, "fc", 3, 2);
        let mut params = vec![0.0; alloc.total];
        lin.init(&mut params, &mut rng, 1.0);
        params[lin.bias + 1] = -0.5;
        let x = [1.0, 2.0, 3.0, -1.0, 0.0, 0.5];
        let y = lin.forward(&params, &x, 2);
        for b in 0..2 {
            for o in 0..2 {
                let mut acc = params[lin.bias + o];
                for i in 0..3 {
                    acc += params[lin.weight + o * 3 + i] * x[b * 3 + i];
                }
                assert!((y[b * 2 + o] - acc).abs() < 1e-12);
            }
        }
    }
}
