//! Forward and backward passes of the relighting network.
//!
//! Encoder: per level a stride-2 3x3 convolution, group norm and PReLU on
//! the RGB image concatenated with its tiled light direction. Pooling: an
//! alias-free weighted sum of the per-light pyramids. Decoder: a dense stem
//! on the query direction whose output is broadcast over the coarsest grid,
//! then per level the pooled skip is concatenated before a stride-2
//! transposed convolution, group norm and PReLU; a 3x3 convolution and a
//! sigmoid produce the image.

use lumisr_core::stage::alias_free_from_dots;
use lumisr_core::{Image, Vec3};
use rayon::prelude::*;

use crate::config::{Ablation, ModelConfig};
use crate::ops::{self, NormCache, Tensor};
use crate::params::{BlockIdx, HalfResParams, Layout, ModelParams, ParamSet};
use crate::real::Real;
use crate::{NeuralError, Result};

/// Per-level activations, finest level first.
pub type FeaturePyramid<T> = Vec<Tensor<T>>;

/// RGB image plus tiled light direction as a 6-channel tensor.
pub fn input_tensor<T: Real>(image: &Image, light: &Vec3) -> Tensor<T> {
    let (w, h) = (image.width(), image.height());
    let p = w * h;
    let mut t = Tensor::zeros(6, h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                t.data[c * p + y * w + x] = T::from_f64(image.get(x, y, c) as f64);
            }
        }
    }
    for (c, v) in [light.x, light.y, light.z].into_iter().enumerate() {
        t.data[(3 + c) * p..(4 + c) * p].fill(T::from_f64(v));
    }
    t
}

pub fn image_tensor<T: Real>(image: &Image) -> Tensor<T> {
    let (w, h, ch) = (image.width(), image.height(), image.channels());
    let p = w * h;
    let mut t = Tensor::zeros(ch, h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                t.data[c * p + y * w + x] = T::from_f64(image.get(x, y, c) as f64);
            }
        }
    }
    t
}

pub fn tensor_image<T: Real>(t: &Tensor<T>) -> Image {
    let p = t.plane();
    let mut img = Image::zeros(t.w, t.h, t.c);
    for y in 0..t.h {
        for x in 0..t.w {
            for c in 0..t.c {
                img.set(x, y, c, t.data[c * p + y * t.w + x].as_f64() as f32);
            }
        }
    }
    img
}

/// Full model, or the truncated half-resolution model of the first
/// progressive phase.
#[derive(Clone, Copy)]
pub enum Net<'a, T> {
    Full,
    Half(&'a HalfResParams<T>),
}

impl<T> Net<'_, T> {
    fn first_level(&self) -> usize {
        match self {
            Net::Full => 0,
            Net::Half(_) => 1,
        }
    }
}

struct BlockCache<T> {
    /// Convolution patches (encoder) or block input (decoder).
    saved: Vec<T>,
    input_shape: (usize, usize, usize),
    norm: NormCache<T>,
    pre_act: Tensor<T>,
}

pub struct EncodeCache<T> {
    blocks: Vec<BlockCache<T>>,
    inject_cols: Option<(Vec<T>, (usize, usize, usize))>,
}

fn block_tail<T: Real>(y: Tensor<T>, v: &[Vec<T>], idx: &BlockIdx, groups: usize) -> (Tensor<T>, NormCache<T>, Tensor<T>) {
    let (g, norm) = ops::group_norm_forward(&y, &v[idx.gamma], &v[idx.beta], groups);
    let a = ops::prelu_forward(&g, &v[idx.prelu]);
    (a, norm, g)
}

/// Encodes one 6-channel input at the net's working resolution (the
/// truncated net downsamples it internally).
pub fn encode<T: Real>(p: &ModelParams<T>, lay: &Layout, net: Net<T>, input: &Tensor<T>, keep: bool) -> (FeaturePyramid<T>, Option<EncodeCache<T>>) {
    let v = &p.tensors.values;
    let c = &p.config;
    let enc_ch = c.enc_channels();
    let mut x;
    let mut inject_cols = None;
    match net {
        Net::Full => x = input.clone(),
        Net::Half(hp) => {
            let hl = hp.layout();
            let small = input.downsample2();
            let (y, cols) = ops::conv_forward(&small, &hp.tensors.values[hl.inject.w], &hp.tensors.values[hl.inject.b], enc_ch[0], 1, 1);
            if keep {
                inject_cols = Some((cols, (small.c, small.h, small.w)));
            }
            x = y;
        }
    }
    let mut pyramid = Vec::with_capacity(c.levels);
    let mut blocks = Vec::new();
    for l in net.first_level()..c.levels {
        let idx = &lay.enc[l];
        let shape = (x.c, x.h, x.w);
        let (y, cols) = ops::conv_forward(&x, &v[idx.w], &v[idx.b], enc_ch[l], 3, 2);
        let (a, norm, g) = block_tail(y, v, idx, c.groups(enc_ch[l]));
        if keep {
            blocks.push(BlockCache {
                saved: cols,
                input_shape: shape,
                norm,
                pre_act: g,
            });
        }
        pyramid.push(a.clone());
        x = a;
    }
    let cache = keep.then_some(EncodeCache { blocks, inject_cols });
    (pyramid, cache)
}

/// Pooling weights for an active set given `dots[i] = query · light_i`.
pub fn pool_weights(config: &ModelConfig, dots: &[f64], s: f64) -> Vec<f64> {
    if config.ablation == Some(Ablation::AvgPool) {
        return vec![1.0 / dots.len() as f64; dots.len()];
    }
    alias_free_from_dots(dots, s).0
}

/// Weighted sum of pyramids, accumulated in the order given (callers pass
/// members in ascending light index).
pub fn pool<T: Real>(pyramids: &[&FeaturePyramid<T>], weights: &[f64]) -> Result<FeaturePyramid<T>> {
    let first = pyramids
        .first()
        .ok_or_else(|| NeuralError::Shape("no pyramids to pool".into()))?;
    if pyramids.len() != weights.len() {
        return Err(NeuralError::Shape(format!(
            "{} pyramids for {} weights",
            pyramids.len(),
            weights.len()
        )));
    }
    let mut out: FeaturePyramid<T> = first.iter().map(|t| Tensor::zeros(t.c, t.h, t.w)).collect();
    for (pyr, &w) in pyramids.iter().zip(weights) {
        if pyr.len() != out.len() || pyr.iter().zip(&out).any(|(a, b)| !a.same_shape(b)) {
            return Err(NeuralError::Shape("pyramid shapes differ".into()));
        }
        let w = T::from_f64(w);
        for (o, t) in out.iter_mut().zip(pyr.iter()) {
            o.add_scaled(t, w);
        }
    }
    Ok(out)
}

struct FcCache<T> {
    input: Vec<T>,
    norm: NormCache<T>,
    pre_act: Vec<T>,
}

pub struct DecodeCache<T> {
    fc: Vec<FcCache<T>>,
    seed_shape: (usize, usize),
    blocks: Vec<BlockCache<T>>,
    head_cols: Vec<T>,
    head_in_shape: (usize, usize, usize),
    sigmoid: Vec<T>,
}

/// Decodes a pooled pyramid for `query` into an image tensor in (0, 1).
pub fn decode<T: Real>(
    p: &ModelParams<T>,
    lay: &Layout,
    net: Net<T>,
    pooled: &FeaturePyramid<T>,
    query: &Vec3,
    keep: bool,
) -> Result<(Tensor<T>, Option<DecodeCache<T>>)> {
    let v = &p.tensors.values;
    let c = &p.config;
    let first = net.first_level();
    if pooled.len() != c.levels - first {
        return Err(NeuralError::Shape(format!(
            "pooled pyramid has {} levels, expected {}",
            pooled.len(),
            c.levels - first
        )));
    }
    let mut fc = Vec::new();
    let mut h: Vec<T> = [query.x, query.y, query.z].map(T::from_f64).to_vec();
    for idx in &lay.fc {
        let z = ops::dense_forward(&h, &v[idx.w], &v[idx.b]);
        let (n, norm) = ops::vec_norm_forward(&z, &v[idx.gamma], &v[idx.beta]);
        let pre = Tensor::from_vec(n.len(), 1, 1, n);
        let a = ops::prelu_forward(&pre, &v[idx.prelu]).data;
        if keep {
            fc.push(FcCache {
                input: h,
                norm,
                pre_act: pre.data,
            });
        }
        h = a;
    }
    let coarse = pooled.last().expect("levels >= 1");
    let (sh, sw) = (coarse.h, coarse.w);
    let mut x = Tensor::zeros(h.len(), sh, sw);
    for (ch, &val) in h.iter().enumerate() {
        x.data[ch * sh * sw..(ch + 1) * sh * sw].fill(val);
    }
    let mut blocks = Vec::new();
    for d in (first..c.levels).rev() {
        let idx = &lay.dec[d];
        let skip = &pooled[d - first];
        if skip.h != x.h || skip.w != x.w {
            return Err(NeuralError::Shape("skip resolution mismatch".into()));
        }
        let cat = x.concat(skip);
        let (_, cout) = c.dec_channels(d);
        let y = ops::tconv_forward(&cat, &v[idx.w], &v[idx.b], cout);
        let (a, norm, g) = block_tail(y, v, idx, c.groups(cout));
        if keep {
            blocks.push(BlockCache {
                input_shape: (cat.c, cat.h, cat.w),
                saved: cat.data,
                norm,
                pre_act: g,
            });
        }
        x = a;
    }
    let (hw, hb) = match net {
        Net::Full => (&v[lay.head.w], &v[lay.head.b]),
        Net::Half(hp) => {
            let hl = hp.layout();
            (&hp.tensors.values[hl.head.w], &hp.tensors.values[hl.head.b])
        }
    };
    let head_in_shape = (x.c, x.h, x.w);
    let (mut y, head_cols) = ops::conv_forward(&x, hw, hb, 3, 3, 1);
    let lo = T::min_positive_value();
    let hi = T::one() - T::epsilon() / T::from_f64(2.0);
    let mut sig = Vec::with_capacity(if keep { y.data.len() } else { 0 });
    for val in &mut y.data {
        let s = ops::sigmoid(*val);
        if keep {
            sig.push(s);
        }
        // strictly inside (0, 1) even where the sigmoid saturates
        *val = s.max(lo).min(hi);
    }
    let cache = keep.then_some(DecodeCache {
        fc,
        seed_shape: (sh, sw),
        blocks,
        head_cols,
        head_in_shape,
        sigmoid: sig,
    });
    Ok((y, cache))
}

fn block_backward<T: Real>(
    dy: &Tensor<T>,
    cache: &BlockCache<T>,
    v: &[Vec<T>],
    g: &mut [Vec<T>],
    idx: &BlockIdx,
    groups: usize,
) -> Tensor<T> {
    let (dg, da) = ops::prelu_backward(dy, &cache.pre_act, &v[idx.prelu]);
    add_into(&mut g[idx.prelu], &da);
    let (dz, dgamma, dbeta) = ops::group_norm_backward(&dg, &cache.norm, &v[idx.gamma], groups);
    add_into(&mut g[idx.gamma], &dgamma);
    add_into(&mut g[idx.beta], &dbeta);
    dz
}

fn add_into<T: Real>(acc: &mut [T], d: &[T]) {
    for (a, b) in acc.iter_mut().zip(d) {
        *a = *a + *b;
    }
}

/// Backpropagates `dout` (gradient w.r.t. the decoded image) and returns the
/// gradient w.r.t. each pooled level.
pub fn decode_backward<T: Real>(
    p: &ModelParams<T>,
    lay: &Layout,
    net: Net<T>,
    cache: &DecodeCache<T>,
    dout: &Tensor<T>,
    grads: &mut ParamSet<T>,
    half_grads: Option<&mut ParamSet<T>>,
) -> FeaturePyramid<T> {
    let v = &p.tensors.values;
    let c = &p.config;
    let first = net.first_level();
    let mut dz = dout.clone();
    for (d, s) in dz.data.iter_mut().zip(&cache.sigmoid) {
        *d = *d * *s * (T::one() - *s);
    }
    let (hw, hgrad_w, hgrad_b): (&[T], _, _) = match (net, half_grads) {
        (Net::Half(hp), Some(hg)) => {
            let hl = hp.layout();
            let (a, b) = hg.values.split_at_mut(hl.head.b);
            (&hp.tensors.values[hl.head.w], &mut a[hl.head.w], &mut b[0])
        }
        (Net::Half(_), None) => panic!("half-resolution backward needs its gradient set"),
        (Net::Full, _) => {
            let (a, b) = grads.values.split_at_mut(lay.head.b);
            (&v[lay.head.w][..], &mut a[lay.head.w], &mut b[0])
        }
    };
    let hg = ops::conv_backward(&dz, &cache.head_cols, hw, cache.head_in_shape, 3, 1, true);
    add_into(hgrad_w, &hg.dw);
    add_into(hgrad_b, &hg.db);
    let mut dx = hg.dx.expect("requested");
    let mut dpooled: Vec<Option<Tensor<T>>> = vec![None; c.levels - first];
    // decoder blocks were cached coarsest first
    for (bi, d) in (first..c.levels).rev().enumerate().collect::<Vec<_>>().into_iter().rev() {
        let idx = &lay.dec[d];
        let bc = &cache.blocks[bi];
        let (_, cout) = c.dec_channels(d);
        let dtail = block_backward(&dx, bc, v, &mut grads.values, idx, c.groups(cout));
        let (ci, h, w) = bc.input_shape;
        let cat = Tensor::from_vec(ci, h, w, bc.saved.clone());
        let tg = ops::tconv_backward(&dtail, &cat, &v[idx.w]);
        add_into(&mut grads.values[idx.w], &tg.dw);
        add_into(&mut grads.values[idx.b], &tg.db);
        let below = ci - c.enc_channels()[d];
        let (dprev, dskip) = tg.dx.expect("tconv dx").split(below);
        dpooled[d - first] = Some(dskip);
        dx = dprev;
    }
    // broadcast seed: the stem output gradient sums over the grid
    let (sh, sw) = cache.seed_shape;
    let mut dh: Vec<T> = (0..dx.c)
        .map(|ch| dx.data[ch * sh * sw..(ch + 1) * sh * sw].iter().copied().sum())
        .collect();
    for (i, idx) in lay.fc.iter().enumerate().rev() {
        let fcc = &cache.fc[i];
        let pre = Tensor::from_vec(fcc.pre_act.len(), 1, 1, fcc.pre_act.clone());
        let (dn, da) = ops::prelu_backward(&Tensor::from_vec(dh.len(), 1, 1, dh), &pre, &v[idx.prelu]);
        add_into(&mut grads.values[idx.prelu], &da);
        let (dzv, dgamma, dbeta) = ops::vec_norm_backward(&dn.data, &fcc.norm, &v[idx.gamma]);
        add_into(&mut grads.values[idx.gamma], &dgamma);
        add_into(&mut grads.values[idx.beta], &dbeta);
        let (dxv, dw, db) = ops::dense_backward(&dzv, &fcc.input, &v[idx.w]);
        add_into(&mut grads.values[idx.w], &dw);
        add_into(&mut grads.values[idx.b], &db);
        dh = dxv;
    }
    dpooled.into_iter().map(|t| t.expect("every level visited")).collect()
}

/// Backpropagates a gradient on one member's pyramid into the encoder.
pub fn encode_backward<T: Real>(
    p: &ModelParams<T>,
    lay: &Layout,
    net: Net<T>,
    cache: &EncodeCache<T>,
    dpyr: &FeaturePyramid<T>,
    grads: &mut ParamSet<T>,
    half_grads: Option<&mut ParamSet<T>>,
) {
    let v = &p.tensors.values;
    let c = &p.config;
    let first = net.first_level();
    let enc_ch = c.enc_channels();
    let mut carry: Option<Tensor<T>> = None;
    for l in (first..c.levels).rev() {
        let bi = l - first;
        let mut d = dpyr[bi].clone();
        if let Some(cg) = carry.take() {
            d.add_assign(&cg);
        }
        let idx = &lay.enc[l];
        let bc = &cache.blocks[bi];
        let dtail = block_backward(&d, bc, v, &mut grads.values, idx, c.groups(enc_ch[l]));
        let need_dx = l > first || matches!(net, Net::Half(_));
        let cg = ops::conv_backward(&dtail, &bc.saved, &v[idx.w], bc.input_shape, 3, 2, need_dx);
        add_into(&mut grads.values[idx.w], &cg.dw);
        add_into(&mut grads.values[idx.b], &cg.db);
        carry = cg.dx;
    }
    if let (Net::Half(hp), Some(hg)) = (net, half_grads) {
        let hl = hp.layout();
        let (cols, shape) = cache.inject_cols.as_ref().expect("inject cache");
        let dy = carry.expect("inject gradient");
        let ig = ops::conv_backward(&dy, cols, &hp.tensors.values[hl.inject.w], *shape, 1, 1, false);
        add_into(&mut hg.values[hl.inject.w], &ig.dw);
        add_into(&mut hg.values[hl.inject.b], &ig.db);
    }
}

/// Masked L1 normalized by foreground pixels times channels, and its
/// gradient w.r.t. `pred`.
pub fn masked_l1<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>, mask: &[T]) -> Result<(f64, Tensor<T>)> {
    if !pred.same_shape(truth) || mask.len() != pred.plane() {
        return Err(NeuralError::Shape("prediction, target and mask differ in shape".into()));
    }
    let count = mask.iter().filter(|&&m| m > T::from_f64(0.5)).count();
    if count == 0 {
        return Err(NeuralError::Core(lumisr_core::Error::EmptyMask));
    }
    let norm = 1.0 / (count * pred.c) as f64;
    let p = pred.plane();
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(pred.c, pred.h, pred.w);
    let step = T::from_f64(norm);
    for ch in 0..pred.c {
        for i in 0..p {
            if mask[i] <= T::from_f64(0.5) {
                continue;
            }
            let j = ch * p + i;
            let diff = pred.data[j] - truth.data[j];
            loss += diff.abs().as_f64();
            grad.data[j] = if diff > T::zero() {
                step
            } else if diff < T::zero() {
                -step
            } else {
                T::zero()
            };
        }
    }
    Ok((loss * norm, grad))
}

/// One training example: inputs in ascending light index order.
pub struct Example<T> {
    pub inputs: Vec<Tensor<T>>,
    pub dots: Vec<f64>,
    pub query: Vec3,
    pub target: Tensor<T>,
    pub mask: Vec<T>,
}

pub struct StepResult<T> {
    pub loss: f64,
    pub grads: ParamSet<T>,
    pub half_grads: Option<ParamSet<T>>,
}

/// Loss and gradients of one example. The truncated net works at half the
/// example's resolution against a downsampled target.
pub fn loss_and_grad<T: Real>(p: &ModelParams<T>, net: Net<T>, ex: &Example<T>) -> Result<StepResult<T>> {
    let lay = p.layout();
    let s = p.tensors.values[lay.sharpness][0].as_f64();
    let weights = pool_weights(&p.config, &ex.dots, s);
    let encoded: Vec<(FeaturePyramid<T>, Option<EncodeCache<T>>)> = ex
        .inputs
        .par_iter()
        .map(|x| encode(p, &lay, net, x, true))
        .collect();
    let pyr_refs: Vec<&FeaturePyramid<T>> = encoded.iter().map(|e| &e.0).collect();
    let pooled = pool(&pyr_refs, &weights)?;
    let (pred, dcache) = decode(p, &lay, net, &pooled, &ex.query, true)?;
    let (target, mask) = match net {
        Net::Full => (ex.target.clone(), ex.mask.clone()),
        Net::Half(_) => {
            let t = ex.target.downsample2();
            let m = Tensor::from_vec(1, ex.target.h, ex.target.w, ex.mask.clone()).downsample2();
            let half = T::from_f64(0.5);
            let m = m.data.into_iter().map(|v| if v >= half { T::one() } else { T::zero() }).collect();
            (t, m)
        }
    };
    let (loss, dout) = masked_l1(&pred, &target, &mask)?;
    let mut grads = p.tensors.zeros_like();
    let mut half_grads = match net {
        Net::Half(hp) => Some(hp.tensors.zeros_like()),
        Net::Full => None,
    };
    let dpooled = decode_backward(p, &lay, net, dcache.as_ref().expect("kept"), &dout, &mut grads, half_grads.as_mut());

    // pooling: d pyramid_i = w_i d pooled, d w_i = <d pooled, pyramid_i>
    let dw: Vec<f64> = encoded
        .iter()
        .map(|(pyr, _)| pyr.iter().zip(&dpooled).map(|(a, b)| a.dot(b).as_f64()).sum())
        .collect();
    if p.config.ablation != Some(Ablation::AvgPool) {
        grads.values[lay.sharpness][0] = T::from_f64(sharpness_grad(&ex.dots, s, &dw));
    }
    for ((pyr, cache), &w) in encoded.iter().zip(&weights) {
        if w == 0.0 {
            continue;
        }
        let wt = T::from_f64(w);
        let dpyr: FeaturePyramid<T> = dpooled
            .iter()
            .zip(pyr)
            .map(|(d, t)| {
                let mut out = Tensor::zeros(t.c, t.h, t.w);
                out.add_scaled(d, wt);
                out
            })
            .collect();
        encode_backward(p, &lay, net, cache.as_ref().expect("kept"), &dpyr, &mut grads, half_grads.as_mut());
    }
    Ok(StepResult {
        loss,
        grads,
        half_grads,
    })
}

/// `dL/ds` through the offset-exponential weights.
pub fn sharpness_grad(dots: &[f64], s: f64, dl_dw: &[f64]) -> f64 {
    let e: Vec<f64> = dots.iter().map(|d| (s * (d - 1.0)).exp()).collect();
    let (jmin, &emin) = e
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty active set");
    let r: Vec<f64> = e.iter().map(|x| (x - emin).max(0.0)).collect();
    let total: f64 = r.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return 0.0;
    }
    let dmin = dots[jmin] - 1.0;
    let dr: Vec<f64> = e
        .iter()
        .zip(dots)
        .map(|(ei, di)| (di - 1.0) * ei - dmin * emin)
        .collect();
    let dtotal: f64 = dr.iter().sum();
    r.iter()
        .zip(&dr)
        .zip(dl_dw)
        .map(|((ri, dri), g)| g * (dri - ri / total * dtotal) / total)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use lumisr_core::LightStage;

    fn tiny() -> ModelConfig {
        let stage = LightStage::build(1, &[]).unwrap();
        ModelConfig {
            input_res: 16,
            levels: 2,
            base_channels: 4,
            max_channels: 8,
            k: 3,
            m: 6,
            fc_layers: 2,
            group_count: 2,
            s_init: stage.half_weight_sharpness(),
            seed: 5,
            crop: 16,
            ablation: None,
        }
    }

    #[test]
    fn zero_input_gives_zero_pyramid() {
        let c = tiny();
        let mut p: ModelParams<f64> = ModelParams::init(&c).unwrap();
        let lay = p.layout();
        for l in &lay.enc {
            p.tensors.values[l.b].fill(0.0);
        }
        let x = Tensor::zeros(6, 16, 16);
        let (pyr, _) = encode(&p, &lay, Net::Full, &x, false);
        assert_eq!(pyr.iter().map(|t| (t.c, t.h)).collect::<Vec<_>>(), vec![(4, 8), (8, 4)]);
        assert!(pyr.iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn pool_cases() {
        let a: FeaturePyramid<f64> = vec![Tensor::from_vec(1, 1, 2, vec![1.0, 2.0])];
        let b: FeaturePyramid<f64> = vec![Tensor::from_vec(1, 1, 2, vec![5.0, -1.0])];
        assert_eq!(pool(&[&a, &b], &[1.0, 0.0]).unwrap(), a);
        assert_eq!(pool(&[&a, &a], &[0.3, 0.7]).unwrap()[0].data, vec![1.0, 2.0]);
        let mixed = pool(&[&a, &b], &[0.25, 0.75]).unwrap();
        assert!((mixed[0].data[0] - (0.25 + 3.75)).abs() < 1e-12);
        assert!(pool::<f64>(&[&a], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn decode_range_and_size() {
        let c = tiny();
        let p: ModelParams<f32> = ModelParams::init(&c).unwrap();
        let lay = p.layout();
        let mut x = Tensor::zeros(6, 16, 16);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = ((i * 37) % 11) as f32 * 10.0 - 50.0;
        }
        let (pyr, _) = encode(&p, &lay, Net::Full, &x, false);
        let (out, _) = decode(&p, &lay, Net::Full, &pyr, &Vec3::new(0.0, 0.6, 0.8), false).unwrap();
        assert_eq!((out.c, out.h, out.w), (3, 16, 16));
        assert!(out.data.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn masked_l1_cases() {
        let a = Tensor::from_vec(3, 1, 2, vec![0.5f64; 6]);
        assert_eq!(masked_l1(&a, &a, &[1.0, 1.0]).unwrap().0, 0.0);
        let ones = Tensor::from_vec(3, 1, 2, vec![1.0f64; 6]);
        let zeros = Tensor::from_vec(3, 1, 2, vec![0.0f64; 6]);
        assert_eq!(masked_l1(&zeros, &ones, &[1.0, 1.0]).unwrap().0, 1.0);
        assert_eq!(masked_l1(&zeros, &ones, &[1.0, 0.0]).unwrap().0, 1.0);
        assert!(masked_l1(&zeros, &ones, &[0.0, 0.0]).is_err());
        // scalar loop
        let p = Tensor::from_vec(3, 1, 2, vec![0.1, 0.9, 0.4, 0.2, 0.7, 0.0]);
        let t = Tensor::from_vec(3, 1, 2, vec![0.3, 0.5, 0.4, 0.8, 0.1, 0.6]);
        let want = ((0.1f64 - 0.3).abs() + (0.4f64 - 0.4).abs() + (0.7f64 - 0.1).abs()) / 3.0;
        assert!((masked_l1(&p, &t, &[1.0, 0.0]).unwrap().0 - want).abs() < 1e-12);
    }

    #[test]
    fn sharpness_grad_matches_differences() {
        let dots = [0.99, 0.97, 0.95, 0.9];
        let g = [0.3, -1.0, 0.5, 2.0];
        let s = 25.0;
        let f = |s: f64| -> f64 { alias_free_from_dots(&dots, s).0.iter().zip(&g).map(|(a, b)| a * b).sum() };
        let num = (f(s + 1e-5) - f(s - 1e-5)) / 2e-5;
        assert!((sharpness_grad(&dots, s, &g) - num).abs() < 1e-7);
    }
}
