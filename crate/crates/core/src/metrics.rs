//! Image-quality metrics restricted to the foreground mask.

use serde::{Deserialize, Serialize};

use crate::{Error, Image, Result};

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub h1: f64,
    pub dssim: f64,
}

impl MetricReport {
    pub fn compute(a: &Image, b: &Image, mask: &Image) -> Result<Self> {
        Ok(Self {
            rmse: rmse(a, b, mask)?,
            h1: h1(a, b, mask)?,
            dssim: dssim(a, b, mask)?,
        })
    }

    /// Arithmetic mean of each column.
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        let n = reports.len().max(1) as f64;
        let mut out = MetricReport::default();
        for r in reports {
            out.rmse += r.rmse / n;
            out.h1 += r.h1 / n;
            out.dssim += r.dssim / n;
        }
        out
    }
}

fn check(a: &Image, b: &Image, mask: &Image) -> Result<()> {
    a.check_same_shape(b)?;
    a.check_mask(mask)?;
    if mask.mask_count() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(())
}

#[inline]
fn fg(mask: &Image, x: usize, y: usize) -> bool {
    mask.get(x, y, 0) > 0.5
}

/// Root mean squared difference over foreground pixels and channels.
pub fn rmse(a: &Image, b: &Image, mask: &Image) -> Result<f64> {
    check(a, b, mask)?;
    let c = a.channels();
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            if !fg(mask, x, y) {
                continue;
            }
            for ch in 0..c {
                let d = a.get(x, y, ch) as f64 - b.get(x, y, ch) as f64;
                sum += d * d;
            }
            count += c;
        }
    }
    Ok((sum / count as f64).sqrt())
}

/// Discrete Sobolev H1 distance: pixel error plus forward-difference
/// gradient error. Gradient terms only count where the forward neighbor is
/// also foreground.
pub fn h1(a: &Image, b: &Image, mask: &Image) -> Result<f64> {
    check(a, b, mask)?;
    let (w, h, c) = (a.width(), a.height(), a.channels());
    let diff = |x: usize, y: usize, ch: usize| a.get(x, y, ch) as f64 - b.get(x, y, ch) as f64;
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !fg(mask, x, y) {
                continue;
            }
            for ch in 0..c {
                let d = diff(x, y, ch);
                sum += d * d;
                if x + 1 < w && fg(mask, x + 1, y) {
                    let g = diff(x + 1, y, ch) - d;
                    sum += g * g;
                }
                if y + 1 < h && fg(mask, x, y + 1) {
                    let g = diff(x, y + 1, ch) - d;
                    sum += g * g;
                }
            }
            count += c;
        }
    }
    Ok((sum / count as f64).sqrt())
}

fn gaussian_kernel() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Gaussian-filtered values at every position where the window fits.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = SSIM_RADIUS;
    let (ow, oh) = (w - 2 * r, h - 2 * r);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k.len()).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k.len()).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Structural dissimilarity `(1 - SSIM) / 2` with an 11x11 Gaussian window
/// (sigma 1.5), averaged over channels and over windows lying entirely in
/// the foreground.
pub fn dssim(a: &Image, b: &Image, mask: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    a.check_mask(mask)?;
    let (w, h, c) = (a.width(), a.height(), a.channels());
    let size = 2 * SSIM_RADIUS + 1;
    if w < size || h < size {
        return Err(Error::ShapeMismatch(format!(
            "{w}x{h} image is smaller than the {size}x{size} SSIM window"
        )));
    }
    let (ow, oh) = (w - 2 * SSIM_RADIUS, h - 2 * SSIM_RADIUS);
    // summed-area table of background pixels to test windows in O(1)
    let mut sat = vec![0usize; (w + 1) * (h + 1)];
    for y in 0..h {
        for x in 0..w {
            let bg = usize::from(!fg(mask, x, y));
            sat[(y + 1) * (w + 1) + x + 1] =
                bg + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x] - sat[y * (w + 1) + x];
        }
    }
    let window_clean = |x: usize, y: usize| {
        let (x1, y1) = (x + size, y + size);
        sat[y1 * (w + 1) + x1] + sat[y * (w + 1) + x] == sat[y * (w + 1) + x1] + sat[y1 * (w + 1) + x]
    };
    let valid: Vec<usize> = (0..oh)
        .flat_map(|y| (0..ow).map(move |x| (x, y)))
        .filter(|&(x, y)| window_clean(x, y))
        .map(|(x, y)| y * ow + x)
        .collect();
    if valid.is_empty() {
        return Err(Error::EmptyMask);
    }

    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = (0..w * h).map(|i| a.data()[i * c + ch] as f64).collect();
        let pb: Vec<f64> = (0..w * h).map(|i| b.data()[i * c + ch] as f64).collect();
        let mu_a = filter_valid(&pa, w, h, &k);
        let mu_b = filter_valid(&pb, w, h, &k);
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let s_aa = filter_valid(&aa, w, h, &k);
        let s_bb = filter_valid(&bb, w, h, &k);
        let s_ab = filter_valid(&ab, w, h, &k);
        let mut sum = 0.0;
        for &i in &valid {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = s_aa[i] - ma * ma;
            let vb = s_bb[i] - mb * mb;
            let cov = s_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / valid.len() as f64;
    }
    let ssim = total / c as f64;
    Ok(((1.0 - ssim) / 2.0).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TemporalProfile {
    /// RMSE between frame `i` and frame `i + 1`.
    pub steps: Vec<f64>,
    /// Index into `steps` of the largest step.
    pub max_index: usize,
    pub max_step: f64,
    pub median_step: f64,
}

/// Consecutive-frame RMSE over a sequence of frames (whole image).
pub fn temporal_profile(frames: &[Image]) -> Result<TemporalProfile> {
    if frames.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "temporal profile needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let full = Image::filled(frames[0].width(), frames[0].height(), 1, 1.0);
    let steps = frames
        .windows(2)
        .map(|p| rmse(&p[0], &p[1], &full))
        .collect::<Result<Vec<_>>>()?;
    let (max_index, max_step) = steps
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
    let mut sorted = steps.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median_step = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    Ok(TemporalProfile {
        steps,
        max_index,
        max_step,
        median_step,
    })
}
