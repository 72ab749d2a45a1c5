//! Layer kernels with explicit backward passes. Tensors are CHW.

use crate::real::{gemm, Mat, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Self { c, h, w, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn same_shape(&self, o: &Self) -> bool {
        self.c == o.c && self.h == o.h && self.w == o.w
    }

    /// Channel concatenation.
    pub fn concat(&self, other: &Self) -> Self {
        assert!(self.h == other.h && self.w == other.w, "concat spatial mismatch");
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Self::from_vec(self.c + other.c, self.h, self.w, data)
    }

    /// Splits off the first `c` channels.
    pub fn split(mut self, c: usize) -> (Self, Self) {
        let rest = self.data.split_off(c * self.plane());
        let (h, w, total) = (self.h, self.w, self.c);
        (Self::from_vec(c, h, w, self.data), Self::from_vec(total - c, h, w, rest))
    }

    pub fn add_assign(&mut self, o: &Self) {
        assert!(self.same_shape(o));
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a = *a + *b;
        }
    }

    pub fn add_scaled(&mut self, o: &Self, s: T) {
        assert!(self.same_shape(o));
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a = *a + s * *b;
        }
    }

    pub fn dot(&self, o: &Self) -> T {
        self.data.iter().zip(&o.data).map(|(a, b)| *a * *b).sum()
    }

    /// 2x box downsample.
    pub fn downsample2(&self) -> Self {
        let (h, w) = (self.h / 2, self.w / 2);
        let q = T::from_f64(0.25);
        let mut out = Self::zeros(self.c, h, w);
        for c in 0..self.c {
            let src = &self.data[c * self.plane()..];
            for y in 0..h {
                for x in 0..w {
                    let i = 2 * y * self.w + 2 * x;
                    out.data[c * h * w + y * w + x] =
                        q * (src[i] + src[i + 1] + src[i + self.w] + src[i + self.w + 1]);
                }
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_vec(self.c, self.h, self.w, self.data.iter().map(|v| U::from_f64(v.as_f64())).collect())
    }
}

fn out_size(n: usize, ksize: usize, stride: usize) -> usize {
    let pad = ksize / 2;
    (n + 2 * pad - ksize) / stride + 1
}

/// Gathers `ksize x ksize` patches into a `(c k k) x (oh ow)` matrix.
pub fn im2col<T: Real>(x: &Tensor<T>, ksize: usize, stride: usize, oh: usize, ow: usize) -> Vec<T> {
    let pad = ksize as isize / 2;
    let p = oh * ow;
    let mut cols = vec![T::zero(); x.c * ksize * ksize * p];
    for c in 0..x.c {
        let src = &x.data[c * x.plane()..(c + 1) * x.plane()];
        for ky in 0..ksize {
            for kx in 0..ksize {
                let row = ((c * ksize + ky) * ksize + kx) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..oh {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let src_row = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                    for ox in 0..ow {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < x.w as isize {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch columns back onto a `c x h x w`
/// image.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, ksize: usize, stride: usize, oh: usize, ow: usize) -> Tensor<T> {
    let pad = ksize as isize / 2;
    let p = oh * ow;
    let mut out = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let dst = &mut out.data[ch * h * w..(ch + 1) * h * w];
        for ky in 0..ksize {
            for kx in 0..ksize {
                let row = ((ch * ksize + ky) * ksize + kx) * p;
                let src = &cols[row..row + p];
                for oy in 0..oh {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            let d = &mut dst[iy as usize * w + ix as usize];
                            *d = *d + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

fn add_bias<T: Real>(y: &mut Tensor<T>, b: &[T]) {
    let p = y.plane();
    for (c, &bc) in b.iter().enumerate() {
        for v in &mut y.data[c * p..(c + 1) * p] {
            *v = *v + bc;
        }
    }
}

fn channel_sums<T: Real>(dy: &Tensor<T>) -> Vec<T> {
    let p = dy.plane();
    (0..dy.c).map(|c| dy.data[c * p..(c + 1) * p].iter().copied().sum()).collect()
}

/// Square convolution, zero padding `ksize / 2`. Weights `[cout, cin, k, k]`.
/// Returns the output and the patch matrix for the backward pass.
pub fn conv_forward<T: Real>(x: &Tensor<T>, w: &[T], b: &[T], cout: usize, ksize: usize, stride: usize) -> (Tensor<T>, Vec<T>) {
    let (oh, ow) = (out_size(x.h, ksize, stride), out_size(x.w, ksize, stride));
    let cols = im2col(x, ksize, stride, oh, ow);
    let kk = x.c * ksize * ksize;
    let mut y = Tensor::zeros(cout, oh, ow);
    gemm(Mat::new(w, cout, kk), Mat::new(&cols, kk, oh * ow), &mut y.data, false);
    add_bias(&mut y, b);
    (y, cols)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    dy: &Tensor<T>,
    cols: &[T],
    w: &[T],
    x_shape: (usize, usize, usize),
    ksize: usize,
    stride: usize,
    need_dx: bool,
) -> ConvGrads<T> {
    let (cin, h, wd) = x_shape;
    let kk = cin * ksize * ksize;
    let p = dy.plane();
    let mut dw = vec![T::zero(); dy.c * kk];
    gemm(Mat::new(&dy.data, dy.c, p), Mat::new(cols, kk, p).t(), &mut dw, false);
    let db = channel_sums(dy);
    let dx = need_dx.then(|| {
        let mut dcols = vec![T::zero(); kk * p];
        gemm(Mat::new(w, dy.c, kk).t(), Mat::new(&dy.data, dy.c, p), &mut dcols, false);
        col2im(&dcols, cin, h, wd, ksize, stride, dy.h, dy.w)
    });
    ConvGrads { dx, dw, db }
}

/// 3x3 transposed convolution with stride 2 (the adjoint of the strided
/// convolution), doubling the spatial size. Weights `[cin, cout, 3, 3]`.
pub fn tconv_forward<T: Real>(x: &Tensor<T>, w: &[T], b: &[T], cout: usize) -> Tensor<T> {
    let p = x.plane();
    let kk = cout * 9;
    let mut cols = vec![T::zero(); kk * p];
    gemm(Mat::new(w, x.c, kk).t(), Mat::new(&x.data, x.c, p), &mut cols, false);
    let mut y = col2im(&cols, cout, 2 * x.h, 2 * x.w, 3, 2, x.h, x.w);
    add_bias(&mut y, b);
    y
}

pub fn tconv_backward<T: Real>(dy: &Tensor<T>, x: &Tensor<T>, w: &[T]) -> ConvGrads<T> {
    let p = x.plane();
    let kk = dy.c * 9;
    let dcols = im2col(dy, 3, 2, x.h, x.w);
    let mut dx = Tensor::zeros(x.c, x.h, x.w);
    gemm(Mat::new(w, x.c, kk), Mat::new(&dcols, kk, p), &mut dx.data, false);
    let mut dw = vec![T::zero(); x.c * kk];
    gemm(Mat::new(&x.data, x.c, p), Mat::new(&dcols, kk, p).t(), &mut dw, false);
    ConvGrads {
        dx: Some(dx),
        dw,
        db: channel_sums(dy),
    }
}

pub const NORM_EPS: f64 = 1e-5;

pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Group normalization with per-channel affine. Statistics span the
/// channels of a group and all pixels.
pub fn group_norm_forward<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T], groups: usize) -> (Tensor<T>, NormCache<T>) {
    let per = x.c / groups * x.plane();
    let n = T::from_f64(per as f64);
    let eps = T::from_f64(NORM_EPS);
    let mut xhat = vec![T::zero(); x.data.len()];
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let seg = &x.data[g * per..(g + 1) * per];
        let mean = seg.iter().copied().sum::<T>() / n;
        let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = (var + eps).sqrt().recip();
        inv_std.push(is);
        for (o, &v) in xhat[g * per..(g + 1) * per].iter_mut().zip(seg) {
            *o = (v - mean) * is;
        }
    }
    let p = x.plane();
    let mut y = Tensor::zeros(x.c, x.h, x.w);
    for c in 0..x.c {
        for i in c * p..(c + 1) * p {
            y.data[i] = gamma[c] * xhat[i] + beta[c];
        }
    }
    (y, NormCache { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward<T: Real>(dy: &Tensor<T>, cache: &NormCache<T>, gamma: &[T], groups: usize) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let p = dy.plane();
    let per = dy.c / groups * p;
    let mut dgamma = vec![T::zero(); dy.c];
    let mut dbeta = vec![T::zero(); dy.c];
    let mut dxhat = vec![T::zero(); dy.data.len()];
    for c in 0..dy.c {
        let mut sg = T::zero();
        let mut sb = T::zero();
        for i in c * p..(c + 1) * p {
            sg = sg + dy.data[i] * cache.xhat[i];
            sb = sb + dy.data[i];
            dxhat[i] = dy.data[i] * gamma[c];
        }
        dgamma[c] = sg;
        dbeta[c] = sb;
    }
    let mut dx = Tensor::zeros(dy.c, dy.h, dy.w);
    let n = T::from_f64(per as f64);
    for g in 0..groups {
        let r = g * per..(g + 1) * per;
        let s1: T = dxhat[r.clone()].iter().copied().sum();
        let s2: T = dxhat[r.clone()].iter().zip(&cache.xhat[r.clone()]).map(|(a, b)| *a * *b).sum();
        let k = cache.inv_std[g] / n;
        for i in r {
            dx.data[i] = k * (n * dxhat[i] - s1 - cache.xhat[i] * s2);
        }
    }
    (dx, dgamma, dbeta)
}

/// Per-channel parametric ReLU.
pub fn prelu_forward<T: Real>(x: &Tensor<T>, a: &[T]) -> Tensor<T> {
    let p = x.plane();
    let mut y = x.clone();
    for c in 0..x.c {
        for v in &mut y.data[c * p..(c + 1) * p] {
            if *v < T::zero() {
                *v = *v * a[c];
            }
        }
    }
    y
}

/// Returns `(dx, da)` given the layer input `x`.
pub fn prelu_backward<T: Real>(dy: &Tensor<T>, x: &Tensor<T>, a: &[T]) -> (Tensor<T>, Vec<T>) {
    let p = x.plane();
    let mut dx = dy.clone();
    let mut da = vec![T::zero(); x.c];
    for c in 0..x.c {
        for i in c * p..(c + 1) * p {
            if x.data[i] < T::zero() {
                da[c] = da[c] + dy.data[i] * x.data[i];
                dx.data[i] = dy.data[i] * a[c];
            }
        }
    }
    (dx, da)
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Dense layer `y = W x + b`, `W` is `[out, in]`.
pub fn dense_forward<T: Real>(x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let mut y = b.to_vec();
    gemm(Mat::new(w, b.len(), x.len()), Mat::new(x, x.len(), 1), &mut y, true);
    y
}

/// Returns `(dx, dw, db)`.
pub fn dense_backward<T: Real>(dy: &[T], x: &[T], w: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); dy.len() * x.len()];
    gemm(Mat::new(dy, dy.len(), 1), Mat::new(x, 1, x.len()), &mut dw, false);
    let mut dx = vec![T::zero(); x.len()];
    gemm(Mat::new(w, dy.len(), x.len()).t(), Mat::new(dy, dy.len(), 1), &mut dx, false);
    (dx, dw, dy.to_vec())
}

/// Normalization of a feature vector across its entries (one group, one
/// pixel), with per-feature affine.
pub fn vec_norm_forward<T: Real>(x: &[T], gamma: &[T], beta: &[T]) -> (Vec<T>, NormCache<T>) {
    let t = Tensor::from_vec(x.len(), 1, 1, x.to_vec());
    let (y, cache) = group_norm_forward(&t, gamma, beta, 1);
    (y.data, cache)
}

pub fn vec_norm_backward<T: Real>(dy: &[T], cache: &NormCache<T>, gamma: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let t = Tensor::from_vec(dy.len(), 1, 1, dy.to_vec());
    let (dx, dg, db) = group_norm_backward(&t, cache, gamma, 1);
    (dx.data, dg, db)
}
