//! Experiment building blocks shared by the subcommands and the acceptance
//! suite.

use lumisr_core::env::bandlimited_env_sized;
use lumisr_core::metrics::{dssim, rmse, MetricReport};
use lumisr_core::relight::{barycentric_blend, linear_blend, photometric_stereo_fit, ps_render, PsOptions};
use lumisr_core::render::{preset, render_scene, shadow_edge_position, Scene};
use lumisr_core::scan::OlatScan;
use lumisr_core::stage::default_neighbors;
use lumisr_core::{Error as CoreError, Image, LightStage, Vec3};
use lumisr_neural::{EncodedScan, ModelConfig, ModelParams, RenderMode};
use lumisr_service::{Method, RelightContext};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::CliError;

/// Lowest elevation of sampled off-grid queries. Below it the ground plane
/// of the synthetic scenes is lit at grazing angles or not at all.
pub const MIN_QUERY_ELEVATION_DEG: f64 = 15.0;
/// Off-grid queries keep at least this fraction of the mean light spacing
/// from every stage light.
pub const OFFGRID_CLEARANCE: f64 = 0.25;

/// Training config for a scan: desk defaults with the scan's resolution.
pub fn default_config(scan: &OlatScan) -> ModelConfig {
    let mut c = ModelConfig::desk(scan.stage());
    c.input_res = scan.width();
    c.crop = scan.width();
    c
}

/// Seeded query directions above [`MIN_QUERY_ELEVATION_DEG`], uniform in
/// solid angle, away from every light of `stage`.
pub fn offgrid_queries(stage: &LightStage, count: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zmin = MIN_QUERY_ELEVATION_DEG.to_radians().sin();
    let clearance = OFFGRID_CLEARANCE * stage.mean_spacing();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let z: f64 = rng.random_range(zmin..1.0);
        let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let r = (1.0 - z * z).sqrt();
        let q = Vec3::new(r * phi.cos(), r * phi.sin(), z);
        let nearest = stage.nearest_lights(&q, 1).expect("stage has lights")[0];
        if stage.lights()[nearest].dot(&q).clamp(-1.0, 1.0).acos() >= clearance {
            out.push(q);
        }
    }
    out
}

/// `frames` directions evenly spaced along the minor arc from `a` to `b`,
/// endpoints included.
pub fn great_circle(a: &Vec3, b: &Vec3, frames: usize) -> Result<Vec<Vec3>, CliError> {
    let (a, b) = (a.normalize(), b.normalize());
    let angle = a.dot(&b).clamp(-1.0, 1.0).acos();
    if frames < 2 {
        return Err(CliError::usage("a path needs at least 2 frames"));
    }
    if angle < 1e-12 || (std::f64::consts::PI - angle) < 1e-9 {
        return Err(CliError::usage("path endpoints must be distinct and not antipodal"));
    }
    let s = angle.sin();
    Ok((0..frames)
        .map(|i| {
            let t = i as f64 / (frames - 1) as f64;
            (a * ((1.0 - t) * angle).sin() / s + b * (t * angle).sin() / s).normalize()
        })
        .collect())
}

/// Point reached by rotating `a` by `degrees` toward `toward` along their great circle.
pub fn rotate_toward(a: &Vec3, toward: &Vec3, degrees: f64) -> Vec3 {
    let a = a.normalize();
    let perp = (toward - a * a.dot(toward)).normalize();
    let t = degrees.to_radians();
    (a * t.cos() + perp * t.sin()).normalize()
}

/// Tilt of a light from the zenith within the xz-plane, in radians.
pub fn xz_tilt(dir: &Vec3) -> f64 {
    dir.x.atan2(dir.z)
}

/// Median shadow-edge column over the middle half of the rows.
pub fn edge_position(image: &Image) -> Result<f64, CoreError> {
    let h = image.height();
    let mut cols: Vec<f64> = (h / 4..h - h / 4).filter_map(|r| shadow_edge_position(image, r).ok()).collect();
    if cols.is_empty() {
        return Err(CoreError::NoCrossing(h / 2));
    }
    cols.sort_by(f64::total_cmp);
    let m = cols.len() / 2;
    Ok(if cols.len() % 2 == 1 { cols[m] } else { 0.5 * (cols[m - 1] + cols[m]) })
}

/// Least-squares line `y = slope x + intercept` and its R².
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}

/// Scene a synthetic scan was generated from.
pub fn scan_scene(scan: &OlatScan) -> Result<Scene, CliError> {
    preset(&scan.meta.name, scan.meta.seed).map_err(|e| {
        CliError::new(
            "input",
            format!("scan `{}` has no oracle scene: {e}", scan.meta.name),
        )
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalRow {
    pub method: String,
    pub scan: String,
    pub query_id: String,
    pub rmse: f64,
    pub h1: f64,
    pub dssim: f64,
}

/// Leave-one-light-out reconstruction of each held-out light from the
/// remaining ones. Returns per-light rows then one `mean` row per method.
pub fn leave_one_out(ctx: &RelightContext, methods: &[Method], holdouts: &[usize], sharpness: f64) -> Result<Vec<EvalRow>, CliError> {
    let scan = ctx.scan();
    let n = scan.stage().n();
    if let Some(&bad) = holdouts.iter().find(|&&i| i >= n) {
        return Err(CliError::usage(format!("holdout {bad} outside the {n} stage lights")));
    }
    let encoded = match (methods.contains(&Method::Neural), ctx.params()) {
        (true, Some(p)) => Some(EncodedScan::new(p, scan)?),
        (true, None) => return Err(CliError::usage("method neural needs --weights")),
        _ => None,
    };
    let k = ctx.blend_k();
    let mut rows = Vec::new();
    for &method in methods {
        let reports: Vec<MetricReport> = holdouts
            .par_iter()
            .map(|&i| -> Result<MetricReport, CliError> {
                let q = scan.stage().lights()[i];
                let img = match method {
                    Method::Neural => encoded
                        .as_ref()
                        .expect("built above")
                        .render(ctx.params().expect("checked"), scan, &q, RenderMode::Eval, Some(i))?,
                    Method::Linear => linear_blend(scan, &q, sharpness, k, Some(i))?,
                    Method::Barycentric => barycentric_blend(&scan.without_lights(&[i])?, &q)?,
                    Method::Ps => {
                        let reduced = scan.without_lights(&[i])?;
                        ps_render(&photometric_stereo_fit(&reduced, PsOptions::default())?, &q)?
                    }
                };
                Ok(MetricReport::compute(&img, scan.image(i), scan.mask())?)
            })
            .collect::<Result<_, _>>()?;
        for (&i, r) in holdouts.iter().zip(&reports) {
            rows.push(row(method, scan, i.to_string(), r));
        }
        rows.push(row(method, scan, "mean".into(), &MetricReport::mean(&reports)));
    }
    Ok(rows)
}

fn row(method: Method, scan: &OlatScan, query_id: String, r: &MetricReport) -> EvalRow {
    EvalRow {
        method: method.as_str().into(),
        scan: scan.meta.name.clone(),
        query_id,
        rmse: r.rmse,
        h1: r.h1,
        dssim: r.dssim,
    }
}

/// Per-query RMSE against the oracle renderer: `(neural, linear)`.
pub fn oracle_rmse(
    params: &ModelParams<f32>,
    scan: &OlatScan,
    scene: &Scene,
    queries: &[Vec3],
    linear_sharpness: f64,
) -> Result<Vec<(f64, f64)>, CliError> {
    let enc = EncodedScan::new(params, scan)?;
    queries
        .par_iter()
        .map(|q| {
            let truth = render_scene(scene, q, scan.width(), scan.height())?;
            let n = enc.render(params, scan, q, RenderMode::Eval, None)?;
            let l = linear_blend(scan, q, linear_sharpness, params.config.k, None)?;
            Ok((rmse(&n, &truth, scan.mask())?, rmse(&l, &truth, scan.mask())?))
        })
        .collect()
}

/// The scan with `n` of its lights kept; the dropped ones are a seeded
/// random choice.
pub fn subsample_scan(scan: &OlatScan, n: usize, seed: u64) -> Result<OlatScan, CliError> {
    let total = scan.stage().n();
    if n > total || n < 4 {
        return Err(CliError::usage(format!("cannot keep {n} of {total} lights")));
    }
    if n == total {
        return Ok(scan.clone());
    }
    // Icosphere subdivision appends vertices, so a coarser level is a prefix
    // of a full icosphere stage. Keep the largest such level that fits and
    // fill up with a seeded random pick; 42 of 162 is then exactly the
    // subdivision-1 stage and smaller stages nest inside larger ones.
    let base = (0..)
        .map(|j| 10 * 4usize.pow(j) + 2)
        .take_while(|&size| size <= n)
        .last()
        .filter(|&size| is_icosphere_prefix(scan.stage(), size))
        .unwrap_or(0);
    let mut rest: Vec<usize> = (base..total).collect();
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut drop = rest[..total - n].to_vec();
    drop.sort_unstable();
    Ok(scan.without_lights(&drop)?)
}

fn is_icosphere_prefix(stage: &LightStage, size: usize) -> bool {
    let Some(sub) = (0..8).find(|&j| 10 * 4usize.pow(j) + 2 == size) else {
        return false;
    };
    let (verts, _) = lumisr_core::stage::icosphere(sub);
    stage.n() >= size && verts.iter().zip(stage.lights()).all(|(a, b)| (a - b).norm() < 1e-9)
}

/// Neighbor schedule used when retraining on `n` lights.
pub fn schedule(n: usize) -> (usize, usize) {
    default_neighbors(n)
}

#[derive(Clone, Debug, Serialize)]
pub struct FreqRow {
    pub degree: usize,
    pub seed: String,
    pub dssim: f64,
}

/// DSSIM between neural and linear environment relighting of bandlimited
/// maps. Both images are scaled by the same factor, which maps the linear
/// render's brightest foreground pixel to 1, then clamped.
pub fn freq_study(ctx: &RelightContext, degrees: &[usize], seeds: u64, env_height: usize) -> Result<Vec<FreqRow>, CliError> {
    if ctx.params().is_none() {
        return Err(CliError::usage("freq needs --weights"));
    }
    let mask = ctx.scan().mask();
    let keys: Vec<(usize, u64)> = degrees.iter().flat_map(|&d| (0..seeds).map(move |s| (d, s))).collect();
    let envs: Vec<_> = keys.iter().map(|&(d, s)| bandlimited_env_sized(d, s, env_height)).collect();
    // one pass per method renders every direction once for all maps
    let neural = ctx.render_env_many(Method::Neural, &envs)?;
    let linear = ctx.render_env_many(Method::Linear, &envs)?;
    let mut rows = Vec::new();
    for (i, &degree) in degrees.iter().enumerate() {
        let span = i * seeds as usize..(i + 1) * seeds as usize;
        let mut vals = Vec::new();
        for j in span {
            let d = normalized_dssim(&neural[j], &linear[j], mask)?;
            vals.push(d);
            rows.push(FreqRow {
                degree,
                seed: keys[j].1.to_string(),
                dssim: d,
            });
        }
        rows.push(FreqRow {
            degree,
            seed: "mean".into(),
            dssim: vals.iter().sum::<f64>() / vals.len().max(1) as f64,
        });
    }
    Ok(rows)
}

pub fn normalized_dssim(a: &Image, reference: &Image, mask: &Image) -> Result<f64, CoreError> {
    let mut peak = 0.0f32;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y, 0) > 0.5 {
                for c in 0..reference.channels() {
                    peak = peak.max(reference.get(x, y, c));
                }
            }
        }
    }
    let scale = if peak > 0.0 { 1.0 / peak } else { 1.0 };
    let norm = |img: &Image| {
        let mut out = img.clone();
        out.data_mut().iter_mut().for_each(|v| *v *= scale);
        out.clamp01()
    };
    dssim(&norm(a), &norm(reference), mask)
}

/// Parses `0..40` (inclusive) or a comma list.
pub fn parse_degrees(s: &str) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::usage(format!("bad degree list `{s}` (use 0..40 or 0,5,25,40)"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect()
}
