//! Classical relighting baselines and soft shadows.

use nalgebra::{Matrix3, SVD};

use crate::scan::OlatScan;
use crate::stage::{alias_free_weights, SelectMode};
use crate::{Error, Image, Result, Vec3};

/// Blends the `k` nearest OLAT images with alias-free weights of fixed
/// sharpness `s`. `holdout` removes one light from consideration.
pub fn linear_blend(scan: &OlatScan, query: &Vec3, s: f64, k: usize, holdout: Option<usize>) -> Result<Image> {
    let stage = scan.stage();
    if k > stage.n() {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds the {} stage lights", stage.n())));
    }
    let q = unit(query)?;
    let active = stage.select_active_set(&q, k, k, 0, SelectMode::Eval { holdout })?;
    let dirs: Vec<Vec3> = active.indices.iter().map(|&i| stage.light(i)).collect();
    let w = alias_free_weights(&q, &dirs, s)?;
    let terms: Vec<(usize, f64)> = active.indices.iter().copied().zip(w.weights).collect();
    Ok(weighted_sum(scan, &terms).clamp01())
}

/// Blends the three corners of the stage triangle containing `query`.
pub fn barycentric_blend(scan: &OlatScan, query: &Vec3) -> Result<Image> {
    let q = unit(query)?;
    let (t, w) = scan.stage().barycentric_weights(&q)?;
    let tri = scan.stage().triangles()[t];
    let terms: Vec<(usize, f64)> = tri.iter().copied().zip(w).collect();
    Ok(weighted_sum(scan, &terms).clamp01())
}

fn unit(v: &Vec3) -> Result<Vec3> {
    let n = v.norm();
    if !(n.is_finite() && n > 1e-12) {
        return Err(Error::InvalidArgument("light direction must be a nonzero finite vector".into()));
    }
    Ok(v / n)
}

fn weighted_sum(scan: &OlatScan, terms: &[(usize, f64)]) -> Image {
    let mut acc = vec![0.0f64; scan.image(0).data().len()];
    for &(i, w) in terms {
        if w == 0.0 {
            continue;
        }
        for (a, &v) in acc.iter_mut().zip(scan.image(i).data()) {
            *a += w * v as f64;
        }
    }
    Image::from_vec(scan.width(), scan.height(), 3, acc.into_iter().map(|v| v as f32).collect())
        .expect("scan image shape")
}

/// Per-pixel Lambertian fit.
#[derive(Clone, Debug, PartialEq)]
pub struct PsModel {
    pub albedo: Image,
    /// Unit normals on fitted pixels, zero elsewhere. Row-major.
    pub normals: Vec<Vec3>,
}

impl PsModel {
    pub fn width(&self) -> usize {
        self.albedo.width()
    }

    pub fn height(&self) -> usize {
        self.albedo.height()
    }

    pub fn is_fitted(&self, x: usize, y: usize) -> bool {
        self.normals[y * self.width() + x] != Vec3::zeros()
    }
}

/// Which observations enter the per-pixel fit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ShadowHandling {
    /// Every light, shadowed or not.
    #[default]
    All,
    /// Drop the darkest 20% of observations per pixel.
    TrimDarkest,
    /// Drop observations that are black (attached or cast shadow).
    ExcludeShadowed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PsOptions {
    pub shadows: ShadowHandling,
}

const SHADOW_LEVEL: f64 = 1e-6;

pub fn photometric_stereo_fit(scan: &OlatScan, options: PsOptions) -> Result<PsModel> {
    fit_lambertian(scan.stage().lights(), scan.images(), scan.mask(), options)
}

/// Photometric stereo over arbitrary light directions and matching RGB
/// images.
pub fn fit_lambertian(lights: &[Vec3], images: &[Image], mask: &Image, options: PsOptions) -> Result<PsModel> {
    let n = lights.len();
    if n < 4 {
        return Err(Error::InvalidArgument(format!("photometric stereo needs at least 4 lights, got {n}")));
    }
    if images.len() != n {
        return Err(Error::ShapeMismatch(format!("{} images for {n} lights", images.len())));
    }
    for img in images {
        img.check_mask(mask)?;
        if img.channels() != 3 {
            return Err(Error::ShapeMismatch("photometric stereo needs RGB images".into()));
        }
    }
    let full_inv = normal_matrix_inverse(lights.iter())?;
    let (w, h) = (mask.width(), mask.height());
    let mut albedo = Image::zeros(w, h, 3);
    let mut normals = vec![Vec3::zeros(); w * h];
    let mut obs: Vec<(usize, [f64; 3], f64)> = Vec::with_capacity(n);
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y, 0) <= 0.5 {
                continue;
            }
            obs.clear();
            for i in 0..n {
                let rgb = [0, 1, 2].map(|c| images[i].get(x, y, c) as f64);
                obs.push((i, rgb, (rgb[0] + rgb[1] + rgb[2]) / 3.0));
            }
            match options.shadows {
                ShadowHandling::All => {}
                ShadowHandling::TrimDarkest => {
                    obs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
                    obs.truncate(n - n / 5);
                }
                ShadowHandling::ExcludeShadowed => obs.retain(|o| o.2 > SHADOW_LEVEL),
            }
            let inv = if obs.len() == n {
                full_inv
            } else {
                match normal_matrix_inverse(obs.iter().map(|o| &lights[o.0])) {
                    Ok(m) => m,
                    Err(_) => continue,
                }
            };
            let mut rhs = Vec3::zeros();
            for (i, _, b) in &obs {
                rhs += lights[*i] * *b;
            }
            let g = inv * rhs;
            let norm = g.norm();
            if !(norm >= 1e-9) {
                continue;
            }
            let normal = g / norm;
            // albedo per channel: least squares against the clamped shading
            let mut num = [0.0; 3];
            let mut den = 0.0;
            for (i, rgb, _) in &obs {
                let shade = normal.dot(&lights[*i]).max(0.0);
                den += shade * shade;
                for c in 0..3 {
                    num[c] += shade * rgb[c];
                }
            }
            if den <= 0.0 {
                continue;
            }
            normals[y * w + x] = normal;
            for c in 0..3 {
                albedo.set(x, y, c, (num[c] / den).max(0.0) as f32);
            }
        }
    }
    Ok(PsModel { albedo, normals })
}

fn normal_matrix_inverse<'a>(dirs: impl Iterator<Item = &'a Vec3>) -> Result<Matrix3<f64>> {
    let mut ata = Matrix3::zeros();
    for l in dirs {
        ata += l * l.transpose();
    }
    let svd = SVD::new(ata, false, false);
    let (max, min) = svd
        .singular_values
        .iter()
        .fold((0.0f64, f64::INFINITY), |(a, b), &s| (a.max(s), b.min(s)));
    if !(max > 0.0) || min / max < 1e-9 {
        return Err(Error::RankDeficient(format!(
            "light directions span fewer than 3 dimensions (singular values {max:.3e}..{min:.3e})"
        )));
    }
    ata.try_inverse()
        .ok_or_else(|| Error::RankDeficient("singular normal matrix".into()))
}

/// Lambertian rendering of a fitted model, clamped to `[0, 1]`.
pub fn ps_render(model: &PsModel, light_dir: &Vec3) -> Result<Image> {
    let l = unit(light_dir)?;
    let (w, h) = (model.width(), model.height());
    let mut out = Image::zeros(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            let shade = model.normals[y * w + x].dot(&l).max(0.0);
            for c in 0..3 {
                out.set(x, y, c, (model.albedo.get(x, y, c) as f64 * shade).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(out)
}

/// Directions covering the spherical cap of angular radius `radius` around
/// `center`, equal-area by a Fibonacci spiral. The seed rotates the spiral.
pub fn cap_samples(center: &Vec3, radius: f64, samples: usize, seed: u64) -> Result<Vec<Vec3>> {
    if samples < 1 {
        return Err(Error::InvalidArgument("soft shadow needs at least one sample".into()));
    }
    if !(0.0..=std::f64::consts::PI).contains(&radius) {
        return Err(Error::InvalidArgument(format!("cap radius {radius} outside [0, pi]")));
    }
    let c = unit(center)?;
    if radius == 0.0 {
        return Ok(vec![c]);
    }
    let helper = if c.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = c.cross(&helper).normalize();
    let e2 = c.cross(&e1);
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    // fractional part of seed * golden ratio conjugate, as a turn offset
    let offset = 2.0 * std::f64::consts::PI * ((seed as f64 * 0.618_033_988_749_894_9).fract());
    let one_minus_cos = 1.0 - radius.cos();
    Ok((0..samples)
        .map(|i| {
            let cos_a = 1.0 - one_minus_cos * (i as f64 + 0.5) / samples as f64;
            let sin_a = (1.0 - cos_a * cos_a).max(0.0).sqrt();
            let (sp, cp) = (offset + golden * i as f64).sin_cos();
            (c * cos_a + e1 * (sin_a * cp) + e2 * (sin_a * sp)).normalize()
        })
        .collect())
}

/// Averages renders over a cap of light directions.
pub fn soft_shadow<F>(mut renderer: F, center: &Vec3, radius: f64, samples: usize, seed: u64) -> Result<Image>
where
    F: FnMut(&Vec3) -> Result<Image>,
{
    let dirs = cap_samples(center, radius, samples, seed)?;
    let mut acc: Vec<f64> = Vec::new();
    let mut shape = None;
    for d in &dirs {
        let img = renderer(d)?;
        match shape {
            None => {
                shape = Some((img.width(), img.height(), img.channels()));
                acc = img.data().iter().map(|&v| v as f64).collect();
            }
            Some(s) => {
                if s != (img.width(), img.height(), img.channels()) {
                    return Err(Error::ShapeMismatch("renderer changed output size".into()));
                }
                for (a, &v) in acc.iter_mut().zip(img.data()) {
                    *a += v as f64;
                }
            }
        }
    }
    let (w, h, c) = shape.expect("at least one sample");
    let inv = 1.0 / dirs.len() as f64;
    Image::from_vec(w, h, c, acc.into_iter().map(|v| (v * inv) as f32).collect())
}
