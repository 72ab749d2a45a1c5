//! Equirectangular environment maps: solid angles, image-based relighting
//! by direct summation, spherical-harmonic analysis and synthetic
//! band-limited maps.
//!
//! Row `v` maps to polar angle `theta = pi (v + 0.5) / height` measured from
//! +z, column `u` to azimuth `phi = 2 pi (u + 0.5) / width`. Directions are
//! taken at pixel centers.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::sh::{self, coeff_count};
use crate::{Error, Image, Result, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct EnvMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShSpectrum {
    pub degree_max: usize,
    /// RGB coefficient per `(l, m)`, see [`crate::sh`] for the ordering.
    pub coeffs: Vec<[f64; 3]>,
}

impl EnvMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width != 2 * height {
            return Err(Error::ShapeMismatch(format!(
                "environment map {width}x{height} must have width = 2 * height"
            )));
        }
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{} samples for a {width}x{height} RGB map",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("environment radiance must be finite and >= 0".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn constant(height: usize, rgb: [f32; 3]) -> Self {
        let width = 2 * height;
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn radiance(&self, u: usize, v: usize) -> [f32; 3] {
        let i = (v * self.width + u) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_radiance(&mut self, u: usize, v: usize, rgb: [f32; 3]) {
        let i = (v * self.width + u) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn theta(&self, v: usize) -> f64 {
        PI * (v as f64 + 0.5) / self.height as f64
    }

    pub fn phi(&self, u: usize) -> f64 {
        2.0 * PI * (u as f64 + 0.5) / self.width as f64
    }

    /// Unit direction through the center of pixel `(u, v)`.
    pub fn direction(&self, u: usize, v: usize) -> Vec3 {
        let (st, ct) = self.theta(v).sin_cos();
        let (sp, cp) = self.phi(u).sin_cos();
        Vec3::new(st * cp, st * sp, ct)
    }

    /// Solid angle of any pixel in row `v`, in steradians.
    pub fn pixel_solid_angle(&self, v: usize) -> f64 {
        (2.0 * PI / self.width as f64) * (PI / self.height as f64) * self.theta(v).sin()
    }

    /// Per-channel integral of radiance over the sphere.
    pub fn total_power(&self) -> [f64; 3] {
        let mut out = [0.0; 3];
        for v in 0..self.height {
            let dw = self.pixel_solid_angle(v);
            for u in 0..self.width {
                let r = self.radiance(u, v);
                for c in 0..3 {
                    out[c] += r[c] as f64 * dw;
                }
            }
        }
        out
    }

    pub fn into_image(self) -> Image {
        Image::from_vec(self.width, self.height, 3, self.data).expect("valid env shape")
    }

    pub fn from_image(image: Image) -> Result<Self> {
        if image.channels() != 3 {
            return Err(Error::ShapeMismatch("environment maps are RGB".into()));
        }
        let (w, h) = (image.width(), image.height());
        Self::new(w, h, image.into_data())
    }
}

/// Relights by summing `radiance * solid angle * renderer(direction)` over
/// every environment pixel. Zero-radiance pixels are skipped; the result is
/// high dynamic range and not clamped. Renderer calls may run concurrently,
/// accumulation runs in fixed pixel order.
pub fn env_relight<F>(renderer: F, env: &EnvMap) -> Result<Image>
where
    F: Fn(&Vec3) -> Result<Image> + Sync,
{
    let mut out = env_relight_many(renderer, std::slice::from_ref(env))?;
    Ok(out.pop().expect("one output per map"))
}

const RENDER_BATCH: usize = 64;

/// Like [`env_relight`] for several same-size maps, calling the renderer
/// once per direction that is lit in any of them.
pub fn env_relight_many<F>(renderer: F, envs: &[EnvMap]) -> Result<Vec<Image>>
where
    F: Fn(&Vec3) -> Result<Image> + Sync,
{
    let Some(first) = envs.first() else {
        return Ok(Vec::new());
    };
    if envs.iter().any(|e| e.width != first.width || e.height != first.height) {
        return Err(Error::ShapeMismatch("environment maps differ in size".into()));
    }
    let lit: Vec<(usize, usize)> = (0..first.height)
        .flat_map(|v| (0..first.width).map(move |u| (u, v)))
        .filter(|&(u, v)| envs.iter().any(|e| e.radiance(u, v).iter().any(|&r| r > 0.0)))
        .collect();
    let mut acc: Vec<Vec<f64>> = Vec::new();
    let mut dims: Option<(usize, usize, usize)> = None;
    for batch in lit.chunks(RENDER_BATCH) {
        let images: Vec<Result<Image>> = batch
            .par_iter()
            .map(|&(u, v)| {
                renderer(&first.direction(u, v)).map_err(|e| Error::Renderer {
                    x: u,
                    y: v,
                    message: e.to_string(),
                })
            })
            .collect();
        for (&(u, v), img) in batch.iter().zip(images) {
            let img = img?;
            let d = (img.width(), img.height(), img.channels());
            match dims {
                None => {
                    dims = Some(d);
                    acc = vec![vec![0.0; img.data().len()]; envs.len()];
                }
                Some(prev) if prev != d => {
                    return Err(Error::Renderer {
                        x: u,
                        y: v,
                        message: "renderer changed output size".into(),
                    })
                }
                _ => {}
            }
            let c = d.2;
            let dw = first.pixel_solid_angle(v);
            for (e, out) in envs.iter().zip(acc.iter_mut()) {
                let r = e.radiance(u, v);
                if r == [0.0; 3] {
                    continue;
                }
                let scale: Vec<f64> = (0..c).map(|ch| r[if c == 3 { ch } else { 0 }] as f64 * dw).collect();
                for (i, px) in img.data().iter().enumerate() {
                    out[i] += scale[i % c] * *px as f64;
                }
            }
        }
    }
    let Some((w, h, c)) = dims else {
        return Err(Error::InvalidArgument("environment maps are all black".into()));
    };
    acc.into_iter()
        .map(|buf| Image::from_vec(w, h, c, buf.into_iter().map(|v| v as f32).collect()))
        .collect()
}

/// Memoizes a renderer by direction quantized to `1 / resolution`. The inner
/// renderer always sees the snapped direction, so results do not depend on
/// which member of a cell was requested first.
pub struct CachedRenderer<F> {
    inner: F,
    resolution: f64,
    cache: Mutex<HashMap<[i64; 3], Arc<Image>>>,
}

impl<F> CachedRenderer<F>
where
    F: Fn(&Vec3) -> Result<Image> + Sync,
{
    pub fn new(inner: F, resolution: f64) -> Self {
        Self {
            inner,
            resolution,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn render(&self, dir: &Vec3) -> Result<Image> {
        let key = [dir.x, dir.y, dir.z].map(|c| (c * self.resolution).round() as i64);
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok((**hit).clone());
        }
        let snapped = Vec3::new(key[0] as f64, key[1] as f64, key[2] as f64) / self.resolution;
        let img = (self.inner)(&snapped.normalize())?;
        self.cache
            .lock()
            .expect("cache lock")
            .insert(key, Arc::new(img.clone()));
        Ok(img)
    }

    pub fn len(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Projects the map onto real spherical harmonics up to `degree` by
/// solid-angle-weighted summation.
pub fn sh_project(env: &EnvMap, degree: usize) -> Result<ShSpectrum> {
    if degree > 50 {
        return Err(Error::InvalidArgument(format!("degree {degree} exceeds 50")));
    }
    let n = coeff_count(degree);
    let mut coeffs = vec![[0.0; 3]; n];
    let mut basis = vec![0.0; n];
    for v in 0..env.height {
        let dw = env.pixel_solid_angle(v);
        let legendre = sh::legendre_normalized(degree, env.theta(v).cos());
        for u in 0..env.width {
            let r = env.radiance(u, v);
            if r == [0.0; 3] {
                continue;
            }
            sh::fill_basis(degree, &legendre, env.phi(u), &mut basis);
            for (c, y) in coeffs.iter_mut().zip(&basis) {
                for ch in 0..3 {
                    c[ch] += r[ch] as f64 * y * dw;
                }
            }
        }
    }
    Ok(ShSpectrum {
        degree_max: degree,
        coeffs,
    })
}

impl ShSpectrum {
    /// Energy `sum_m |c_lm|^2` (summed over RGB) of each degree.
    pub fn band_energy(&self) -> Vec<f64> {
        (0..=self.degree_max)
            .map(|l| {
                let lo = l * l;
                self.coeffs[lo..lo + 2 * l + 1]
                    .iter()
                    .map(|c| c.iter().map(|v| v * v).sum::<f64>())
                    .sum()
            })
            .collect()
    }

    /// Evaluates the truncated expansion on an equirectangular grid; negative
    /// values are kept.
    pub fn reconstruct(&self, height: usize) -> Vec<[f64; 3]> {
        let width = 2 * height;
        let grid = EnvMap::constant(height, [0.0; 3]);
        let mut out = vec![[0.0; 3]; width * height];
        let mut basis = vec![0.0; self.coeffs.len()];
        for v in 0..height {
            let legendre = sh::legendre_normalized(self.degree_max, grid.theta(v).cos());
            for u in 0..width {
                sh::fill_basis(self.degree_max, &legendre, grid.phi(u), &mut basis);
                let px = &mut out[v * width + u];
                for (c, y) in self.coeffs.iter().zip(&basis) {
                    for ch in 0..3 {
                        px[ch] += c[ch] * y;
                    }
                }
            }
        }
        out
    }
}

/// Smallest degree `d` whose bands `0..=d` hold at least `fraction` of the
/// total energy.
pub fn sh_energy_degree(spec: &ShSpectrum, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    let bands = spec.band_energy();
    let total: f64 = bands.iter().sum();
    let target = fraction * total;
    let mut running = 0.0;
    for (l, e) in bands.iter().enumerate() {
        running += e;
        // relative slack so fraction = 1 is reachable despite rounding
        if running >= target * (1.0 - 1e-12) {
            return Ok(l);
        }
    }
    Ok(spec.degree_max)
}

pub const DEFAULT_ENV_HEIGHT: usize = 64;

/// Random band-limited map at the default 128x64 resolution.
pub fn bandlimited_env(degree: usize, seed: u64) -> EnvMap {
    bandlimited_env_sized(degree, seed, DEFAULT_ENV_HEIGHT)
}

/// Draws standard-normal coefficients for every band `l <= degree`,
/// synthesizes the map, shifts it so its minimum is zero and scales it to
/// unit integrated power. A shift that would leave the map black (degree 0)
/// yields the constant map instead. The map is grey (equal RGB).
pub fn bandlimited_env_sized(degree: usize, seed: u64, height: usize) -> EnvMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = coeff_count(degree);
    let coeffs: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let width = 2 * height;
    let grid = EnvMap::constant(height, [0.0; 3]);
    let mut values = vec![0.0; width * height];
    let mut basis = vec![0.0; n];
    for v in 0..height {
        let legendre = sh::legendre_normalized(degree, grid.theta(v).cos());
        for u in 0..width {
            sh::fill_basis(degree, &legendre, grid.phi(u), &mut basis);
            values[v * width + u] = coeffs.iter().zip(&basis).map(|(c, y)| c * y).sum();
        }
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max - min <= 1e-12 * max.abs().max(1.0) {
        values.iter_mut().for_each(|x| *x = 1.0);
    } else {
        values.iter_mut().for_each(|x| *x -= min);
    }
    let power: f64 = (0..height)
        .map(|v| grid.pixel_solid_angle(v) * values[v * width..(v + 1) * width].iter().sum::<f64>())
        .sum();
    let data = values
        .iter()
        .flat_map(|x| {
            let r = (x / power) as f32;
            [r, r, r]
        })
        .collect();
    EnvMap {
        width,
        height,
        data,
    }
}
