//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Trained models are cached under `target/acceptance-cache`, keyed by
//! scan, config and training schedule. Delete the directory to retrain.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lumisr_cli::experiments::{
    default_config, edge_position, freq_study, great_circle, linear_fit, offgrid_queries, oracle_rmse, rotate_toward,
    schedule, subsample_scan, xz_tilt,
};
use lumisr_core::env::{bandlimited_env, bandlimited_env_sized, env_relight, sh_energy_degree, sh_project, EnvMap};
use lumisr_core::io::{load_scan, save_scan};
use lumisr_core::metrics::temporal_profile;
use lumisr_core::relight::{photometric_stereo_fit, PsOptions, ShadowHandling};
use lumisr_core::render::{
    generate_olat, occluder, preset, render_scene, surface_normals, Camera, Material, Primitive, Scene, Shape,
};
use lumisr_core::scan::OlatScan;
use lumisr_core::stage::{alias_free_weights, SelectMode};
use lumisr_core::{Image, LightStage, Vec3};
use lumisr_neural::model::{loss_and_grad, Example, Net};
use lumisr_neural::weights::{load_params, save_params};
use lumisr_neural::{Ablation, ModelConfig, ModelParams, TrainOptions};
use lumisr_service::{Method, RelightContext};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REFERENCE_STEPS: usize = 20_000;
/// Half-resolution warm-up for the first part of training, as in the full method.
const PROGRESSIVE: bool = true;
const REFERENCE_RES: usize = 64;
const REFERENCE_SUBDIVISION: u32 = 2;
const QUERY_COUNT: usize = 50;
const QUERY_SEED: u64 = 0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Check = fn(&mut Fixtures) -> Result<Outcome, String>;

fn main() {
    let checks: [(&str, Check); 12] = [
        ("weight correctness", weight_correctness),
        ("weight continuity", weight_continuity),
        ("gradient check", gradient_check),
        ("oracle superiority", oracle_superiority),
        ("leave-one-out eval", leave_one_out_eval),
        ("flicker ablation", flicker_ablation),
        ("shadow linearity", shadow_linearity),
        ("frequency trend", frequency_trend),
        ("subsampling trend", subsampling_trend),
        ("photometric stereo oracle", photometric_stereo),
        ("env machinery", env_machinery),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut fx = Fixtures::new();
    let mut failed = 0;
    for (name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = check(&mut fx).unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        let secs = start.elapsed().as_secs_f64();
        let tag = if result.pass { "PASS" } else { "FAIL" };
        println!("{tag} {name}: {} [{secs:.1}s]", result.detail);
        failed += usize::from(!result.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        // a failing criterion is a measured result, not a broken build;
        // set LUMISR_ACCEPTANCE_STRICT=1 to turn it into a nonzero exit
        if std::env::var_os("LUMISR_ACCEPTANCE_STRICT").is_some_and(|v| v != "0") {
            std::process::exit(1);
        }
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Scans and trained models shared between checks.
struct Fixtures {
    cache: PathBuf,
    scans: Vec<(String, OlatScan)>,
}

impl Fixtures {
    fn new() -> Self {
        let target = std::env::var_os("CARGO_TARGET_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target"));
        let cache = target.join("acceptance-cache");
        fs::create_dir_all(&cache).expect("create acceptance cache");
        Self { cache, scans: Vec::new() }
    }

    fn scan_dir(&self, preset_name: &str) -> PathBuf {
        self.cache
            .join(format!("scan-{preset_name}-s{REFERENCE_SUBDIVISION}-{REFERENCE_RES}"))
    }

    /// Reference scan as stored on disk, so every consumer sees the same
    /// manifest-rounded light directions.
    fn scan(&mut self, preset_name: &str) -> Result<OlatScan, String> {
        if let Some((_, s)) = self.scans.iter().find(|(n, _)| n == preset_name) {
            return Ok(s.clone());
        }
        let dir = self.scan_dir(preset_name);
        if !dir.join("manifest.json").exists() {
            let scene = preset(preset_name, 0).map_err(err)?;
            let stage = LightStage::build(REFERENCE_SUBDIVISION, &[]).map_err(err)?;
            let scan = generate_olat(&scene, &stage, REFERENCE_RES, REFERENCE_RES).map_err(err)?;
            save_scan(&dir, &scan).map_err(err)?;
        }
        let scan = load_scan(&dir).map_err(err)?;
        self.scans.push((preset_name.to_string(), scan.clone()));
        Ok(scan)
    }

    fn weights_path(&self, tag: &str, scan: &OlatScan, config: &ModelConfig, steps: usize) -> PathBuf {
        let lights: Vec<[f64; 3]> = scan.stage().lights().iter().map(|l| [l.x, l.y, l.z]).collect();
        let key = format!(
            "{}|{}|{:?}|{}x{}|{}|{}|progressive={PROGRESSIVE}",
            scan.meta.name,
            scan.stage().n(),
            lights,
            scan.width(),
            scan.height(),
            serde_json::to_string(config).expect("config serializes"),
            steps
        );
        self.cache.join(format!("{tag}-{:016x}.olsr", fnv1a(key.as_bytes())))
    }

    fn trained(&self, tag: &str, scan: &OlatScan, config: &ModelConfig) -> Result<ModelParams<f32>, String> {
        let path = self.weights_path(tag, scan, config, REFERENCE_STEPS);
        if path.exists() {
            return load_params(&path).map_err(err);
        }
        eprintln!("training `{tag}` ({} lights, {REFERENCE_STEPS} steps)", scan.stage().n());
        let start = Instant::now();
        let out = lumisr_neural::train::train_with_progress(
            std::slice::from_ref(scan),
            config,
            TrainOptions {
                steps: REFERENCE_STEPS,
                progressive: PROGRESSIVE,
                ..TrainOptions::default()
            },
            |step, loss| {
                if step % 2000 == 0 {
                    eprintln!("  {tag} step {step} loss {loss:.5} ({:.0}s)", start.elapsed().as_secs_f64());
                }
            },
        )
        .map_err(err)?;
        save_params(&path, &out.params).map_err(err)?;
        Ok(out.params)
    }

    fn reference(&mut self) -> Result<(OlatScan, ModelParams<f32>), String> {
        let scan = self.scan("sphere_plane")?;
        let params = self.trained("reference", &scan, &default_config(&scan))?;
        Ok((scan, params))
    }

    fn reference_weights_path(&mut self) -> Result<PathBuf, String> {
        let (scan, _) = self.reference()?;
        Ok(self.weights_path("reference", &scan, &default_config(&scan), REFERENCE_STEPS))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    let z: f64 = rng.random_range(-1.0..1.0);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).sqrt();
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Direct evaluation of the offset spherical Gaussian weights.
fn oracle_weights(query: &Vec3, dirs: &[Vec3], s: f64) -> (Vec<f64>, bool) {
    let g: Vec<f64> = dirs
        .iter()
        .map(|d| (s * (query.x * d.x + query.y * d.y + query.z * d.z - 1.0)).exp())
        .collect();
    let mut lo = g[0];
    for &v in &g[1..] {
        if v < lo {
            lo = v;
        }
    }
    let raw: Vec<f64> = g.iter().map(|&v| if v - lo > 0.0 { v - lo } else { 0.0 }).collect();
    let mut total = 0.0;
    for v in &raw {
        total += v;
    }
    if total == 0.0 {
        return (vec![1.0 / dirs.len() as f64; dirs.len()], true);
    }
    (raw.into_iter().map(|v| v / total).collect(), false)
}

fn weight_correctness(_: &mut Fixtures) -> Result<Outcome, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_diff: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    let mut farthest_ok = true;
    let mut nondegenerate = 0;
    for _ in 0..1000 {
        let q = random_unit(&mut rng);
        let k = rng.random_range(1..=16);
        let dirs: Vec<Vec3> = (0..k)
            .map(|_| {
                let toward = random_unit(&mut rng);
                let angle = rng.random_range(0.0..40.0);
                if (toward - q).norm() < 1e-6 || (toward + q).norm() < 1e-6 {
                    q
                } else {
                    rotate_toward(&q, &toward, angle)
                }
            })
            .collect();
        let s = 10f64.powf(rng.random_range(-1.0..2.7));
        let got = alias_free_weights(&q, &dirs, s).map_err(err)?;
        let (want, degenerate) = oracle_weights(&q, &dirs, s);
        for (a, b) in got.weights.iter().zip(&want) {
            worst_diff = worst_diff.max((a - b).abs());
        }
        worst_sum = worst_sum.max((got.weights.iter().sum::<f64>() - 1.0).abs());
        if !degenerate {
            nondegenerate += 1;
            let min_dot = dirs.iter().map(|d| d.dot(&q)).fold(f64::INFINITY, f64::min);
            for (d, w) in dirs.iter().zip(&got.weights) {
                if d.dot(&q) == min_dot && *w != 0.0 {
                    farthest_ok = false;
                }
            }
        }
        if got.degenerate != degenerate || got.weights.iter().any(|w| *w < 0.0) {
            farthest_ok = false;
        }
    }
    // equidistant rings around coordinate axes have bit-equal dot products
    let mut fallback_ok = true;
    for axis in 0..3 {
        for k in 2..=8 {
            let theta = 0.05 * (k as f64 + axis as f64 + 1.0);
            let mut q = [0.0; 3];
            q[axis] = 1.0;
            let dirs: Vec<Vec3> = (0..k)
                .map(|j| {
                    let phi = std::f64::consts::TAU * j as f64 / k as f64;
                    let mut v = [0.0; 3];
                    v[axis] = theta.cos();
                    v[(axis + 1) % 3] = theta.sin() * phi.cos();
                    v[(axis + 2) % 3] = theta.sin() * phi.sin();
                    Vec3::new(v[0], v[1], v[2])
                })
                .collect();
            let w = alias_free_weights(&Vec3::new(q[0], q[1], q[2]), &dirs, 20.0).map_err(err)?;
            fallback_ok &= w.degenerate && w.weights.iter().all(|&x| x == 1.0 / k as f64);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_diff <= 1e-6 && worst_sum <= 1e-6 && farthest_ok && fallback_ok && secs < 1.0;
    Ok(outcome(
        pass,
        format!(
            "max |w - oracle| {worst_diff:.2e}, max |sum - 1| {worst_sum:.2e}, farthest zero {farthest_ok} \
             ({nondegenerate} non-degenerate), equidistant fallback {fallback_ok}, {secs:.3}s"
        ),
    ))
}

/// Eval-mode weights scattered over all stage lights.
fn full_weights(stage: &LightStage, q: &Vec3, k: usize, s: f64) -> Result<(Vec<f64>, Vec<usize>), String> {
    let set = stage
        .select_active_set(q, k, k, 0, SelectMode::Eval { holdout: None })
        .map_err(err)?;
    let dirs: Vec<Vec3> = set.indices.iter().map(|&i| stage.light(i)).collect();
    let w = alias_free_weights(q, &dirs, s).map_err(err)?;
    let mut full = vec![0.0; stage.n()];
    for (&i, &v) in set.indices.iter().zip(&w.weights) {
        full[i] = v;
    }
    Ok((full, set.indices))
}

fn weight_continuity(_: &mut Fixtures) -> Result<Outcome, String> {
    let stage = LightStage::build(REFERENCE_SUBDIVISION, &[]).map_err(err)?;
    let (_, k) = schedule(stage.n());
    let s = stage.half_weight_sharpness();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut pass = true;
    let mut parts = Vec::new();
    let arc = 30.0;
    for path in 0..3 {
        let a = random_unit(&mut rng);
        let b = rotate_toward(&a, &random_unit(&mut rng), arc);
        let mut maxima = Vec::new();
        let mut transitions = 0;
        for delta in [0.2, 0.1, 0.05] {
            let frames = (arc / delta).round() as usize + 1;
            let dirs = great_circle(&a, &b, frames).map_err(|e| e.message)?;
            let mut prev: Option<(Vec<f64>, Vec<usize>)> = None;
            let mut worst: f64 = 0.0;
            transitions = 0;
            for d in &dirs {
                let cur = full_weights(&stage, d, k, s)?;
                if let Some((pw, pi)) = &prev {
                    let step = pw.iter().zip(&cur.0).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                    worst = worst.max(step);
                    transitions += usize::from(*pi != cur.1);
                }
                prev = Some(cur);
            }
            maxima.push(worst);
        }
        let r1 = maxima[0] / maxima[1];
        let r2 = maxima[1] / maxima[2];
        let ok = (1.3..=3.0).contains(&r1) && (1.3..=3.0).contains(&r2) && transitions > 0;
        pass &= ok;
        parts.push(format!("path {path}: ratios {r1:.3} {r2:.3}, {transitions} set changes"));
    }
    Ok(outcome(pass, parts.join("; ")))
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        input_res: 8,
        levels: 2,
        base_channels: 4,
        max_channels: 8,
        k: 3,
        m: 5,
        fc_layers: 2,
        group_count: 2,
        s_init: 12.0,
        seed: 7,
        crop: 8,
        ablation: None,
    }
}

fn gradient_check(_: &mut Fixtures) -> Result<Outcome, String> {
    let config = tiny_config();
    let res = config.input_res;
    let scene = preset("sphere_plane", 0).map_err(err)?;
    let stage = LightStage::build(1, &[]).map_err(err)?;
    let scan = generate_olat(&scene, &stage, res, res).map_err(err)?;
    // off-grid, so the active lights sit at distinct distances and the
    // loss depends on s
    let query = (stage.light(5) + Vec3::new(0.07, -0.04, 0.02)).normalize();
    let set = stage
        .select_active_set(&query, config.m, config.k, 3, SelectMode::Train)
        .map_err(err)?;
    let example = Example::<f64> {
        inputs: set
            .indices
            .iter()
            .map(|&i| lumisr_neural::model::input_tensor(scan.image(i), &stage.light(i)))
            .collect(),
        dots: set.indices.iter().map(|&i| stage.light(i).dot(&query)).collect(),
        query,
        target: lumisr_neural::model::image_tensor(&render_scene(&scene, &query, res, res).map_err(err)?),
        mask: scan.mask().data().iter().map(|&v| v as f64).collect(),
    };
    let mut p: ModelParams<f64> = ModelParams::init(&config).map_err(err)?;
    let base = loss_and_grad(&p, Net::Full, &example).map_err(err)?;
    let lay = p.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut picks = vec![(lay.sharpness, 0usize)];
    while picks.len() < 20 {
        let t = rng.random_range(0..p.tensors.len());
        let i = rng.random_range(0..p.tensors.values[t].len());
        if !picks.contains(&(t, i)) {
            picks.push((t, i));
        }
    }
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    let mut s_err = 0.0;
    let mut s_grad = 0.0;
    for &(t, i) in &picks {
        let analytic = base.grads.values[t][i];
        let mut loss_at = |delta: f64| -> Result<f64, String> {
            p.tensors.values[t][i] += delta;
            let l = loss_and_grad(&p, Net::Full, &example).map_err(err)?.loss;
            p.tensors.values[t][i] -= delta;
            Ok(l)
        };
        let numeric = (loss_at(h)? - loss_at(-h)?) / (2.0 * h);
        let e = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
        if t == lay.sharpness {
            s_err = e;
            s_grad = analytic;
        }
        if e > worst {
            worst = e;
            worst_name = format!("{}[{i}]", p.tensors.names[t]);
        }
    }
    Ok(outcome(
        worst < 1e-3 && s_grad != 0.0,
        format!(
            "20 parameters, worst relative error {worst:.2e} at {worst_name}; dL/ds {s_grad:.3e} with error {s_err:.2e}"
        ),
    ))
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn oracle_superiority(fx: &mut Fixtures) -> Result<Outcome, String> {
    let (scan, params) = fx.reference()?;
    let scene = preset("sphere_plane", 0).map_err(err)?;
    let queries = offgrid_queries(scan.stage(), QUERY_COUNT, QUERY_SEED);
    let per = oracle_rmse(&params, &scan, &scene, &queries, scan.stage().half_weight_sharpness()).map_err(|e| e.message)?;
    let wins = per.iter().filter(|(n, l)| n < l).count();
    let (mn, ml) = (mean(per.iter().map(|p| p.0)), mean(per.iter().map(|p| p.1)));
    let pass = wins * 10 >= QUERY_COUNT * 7 && mn < ml;
    Ok(outcome(
        pass,
        format!("neural better on {wins}/{QUERY_COUNT} queries, mean RMSE neural {mn:.5} vs linear {ml:.5}"),
    ))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["lumisr"];
    argv.extend_from_slice(args);
    lumisr_cli::run(argv).map_err(|e| e.to_line())
}

fn leave_one_out_eval(fx: &mut Fixtures) -> Result<Outcome, String> {
    let weights = fx.reference_weights_path()?;
    let scan_dir = fx.scan_dir("sphere_plane");
    let out = fx.cache.join("eval-reference.csv");
    run_cli(&[
        "eval",
        "--weights",
        weights.to_str().unwrap(),
        "--scan",
        scan_dir.to_str().unwrap(),
        "--holdout",
        "all",
        "--methods",
        "neural,linear",
        "--out",
        out.to_str().unwrap(),
    ])?;
    let mut reader = csv::Reader::from_path(&out).map_err(err)?;
    let mut means = std::collections::BTreeMap::new();
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.map_err(err)?;
        rows += 1;
        if &rec[2] == "mean" {
            let vals: Vec<f64> = (3..6).map(|i| rec[i].parse().unwrap_or(f64::NAN)).collect();
            means.insert(rec[0].to_string(), vals);
        }
    }
    let (n, l) = (
        means.get("neural").ok_or("no neural mean row")?,
        means.get("linear").ok_or("no linear mean row")?,
    );
    let pass = rows == 2 * (162 + 1) && (0..3).all(|i| n[i] <= l[i]);
    Ok(outcome(
        pass,
        format!(
            "{rows} CSV rows; neural rmse {:.5} h1 {:.5} dssim {:.5}; linear rmse {:.5} h1 {:.5} dssim {:.5}",
            n[0], n[1], n[2], l[0], l[1], l[2]
        ),
    ))
}

/// First seeded 5 degree arc, above the ground-grazing band, whose eval
/// active set changes somewhere strictly inside it.
fn flicker_path(stage: &LightStage, k: usize) -> Result<(u64, Vec<Vec3>), String> {
    for seed in 0.. {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let a = offgrid_queries(stage, 1, 1000 + seed)[0];
        let b = rotate_toward(&a, &random_unit(&mut rng), 5.0);
        if b.z < a.z.min(0.3) {
            continue;
        }
        let dirs = great_circle(&a, &b, 51).map_err(|e| e.message)?;
        let sets: Vec<Vec<usize>> = dirs
            .iter()
            .map(|d| stage.nearest_lights(d, k).map(|v| v.into_iter().collect::<BTreeSet<_>>().into_iter().collect()))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let changes: Vec<usize> = (1..sets.len()).filter(|&i| sets[i] != sets[i - 1]).collect();
        if changes.len() == 1 && (10..40).contains(&changes[0]) {
            return Ok((seed, dirs));
        }
    }
    unreachable!()
}

fn sweep_profile(scan: &OlatScan, params: ModelParams<f32>, dirs: &[Vec3]) -> Result<(f64, f64, usize), String> {
    let ctx = RelightContext::new(scan.clone(), Some(params)).map_err(err)?;
    let frames: Vec<Image> = dirs
        .iter()
        .map(|d| ctx.render_dir(Method::Neural, d, ctx.default_sharpness()))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let p = temporal_profile(&frames).map_err(err)?;
    Ok((p.max_step, p.median_step, p.max_index))
}

fn flicker_ablation(fx: &mut Fixtures) -> Result<Outcome, String> {
    let (scan, params) = fx.reference()?;
    let mut config = default_config(&scan);
    config.ablation = Some(Ablation::AvgPool);
    let avg = fx.trained("avg_pool", &scan, &config)?;
    let (seed, dirs) = flicker_path(scan.stage(), config.k)?;
    let (amax, amed, aidx) = sweep_profile(&scan, avg, &dirs)?;
    let (fmax, fmed, fidx) = sweep_profile(&scan, params, &dirs)?;
    let pass = amax > 3.0 * amed && fmax <= 3.0 * fmed;
    Ok(outcome(
        pass,
        format!(
            "path seed {seed}; avg_pool max/median {:.2} (step {aidx}); alias-free max/median {:.2} (step {fidx})",
            amax / amed,
            fmax / fmed
        ),
    ))
}

fn edge_fit(images: &[(f64, Image)]) -> (f64, usize) {
    let (xs, ys): (Vec<f64>, Vec<f64>) = images
        .iter()
        .filter_map(|(theta, img)| edge_position(img).ok().map(|e| (theta.tan(), e)))
        .unzip();
    if xs.len() < 3 {
        return (0.0, xs.len());
    }
    (linear_fit(&xs, &ys).2, xs.len())
}

fn shadow_linearity(fx: &mut Fixtures) -> Result<Outcome, String> {
    let scan = fx.scan("occluder_edge")?;
    let scene = preset("occluder_edge", 0).map_err(err)?;
    let thetas: Vec<f64> = (-20..=20).map(|d| (d as f64).to_radians()).collect();
    let oracle: Vec<(f64, Image)> = thetas
        .iter()
        .map(|&t| Ok((t, render_scene(&scene, &occluder::light(t), scan.width(), scan.height()).map_err(err)?)))
        .collect::<Result<_, String>>()?;
    let (oracle_r2, oracle_n) = edge_fit(&oracle);
    let params = fx.trained("occluder", &scan, &default_config(&scan))?;
    let ctx = RelightContext::new(scan.clone(), Some(params)).map_err(err)?;
    let model: Vec<(f64, Image)> = thetas
        .iter()
        .map(|&t| {
            let d = occluder::light(t);
            debug_assert!((xz_tilt(&d) - t).abs() < 1e-12);
            Ok((t, ctx.render_dir(Method::Neural, &d, ctx.default_sharpness()).map_err(err)?))
        })
        .collect::<Result<_, String>>()?;
    let (model_r2, model_n) = edge_fit(&model);
    let pass = oracle_r2 > 0.999 && model_r2 > 0.95 && oracle_n == thetas.len() && model_n == thetas.len();
    Ok(outcome(
        pass,
        format!(
            "oracle R2 {oracle_r2:.6} ({oracle_n}/{} edges), model R2 {model_r2:.4} ({model_n}/{} edges)",
            thetas.len(),
            thetas.len()
        ),
    ))
}

fn frequency_trend(fx: &mut Fixtures) -> Result<Outcome, String> {
    let (scan, params) = fx.reference()?;
    let ctx = RelightContext::new(scan, Some(params)).map_err(err)?;
    let rows = freq_study(&ctx, &[0, 5, 25, 40], 5, lumisr_core::env::DEFAULT_ENV_HEIGHT).map_err(|e| e.message)?;
    let at = |d: usize| rows.iter().find(|r| r.degree == d && r.seed == "mean").map(|r| r.dssim).unwrap_or(f64::NAN);
    let (d0, d5, d25, d40) = (at(0), at(5), at(25), at(40));
    let pass = d0.max(d5) < d25.min(d40);
    Ok(outcome(
        pass,
        format!("mean DSSIM(neural, linear): L0 {d0:.5}, L5 {d5:.5}, L25 {d25:.5}, L40 {d40:.5}"),
    ))
}

fn subsampling_trend(fx: &mut Fixtures) -> Result<Outcome, String> {
    let (full, reference) = fx.reference()?;
    let scene = preset("sphere_plane", 0).map_err(err)?;
    let queries = offgrid_queries(full.stage(), QUERY_COUNT, QUERY_SEED);
    let mut results = Vec::new();
    for n in [162usize, 92, 42] {
        let sub = subsample_scan(&full, n, 0).map_err(|e| e.message)?;
        let params = if n == full.stage().n() {
            reference.clone()
        } else {
            let mut config = default_config(&sub);
            let (m, k) = schedule(n);
            config.m = m;
            config.k = k;
            fx.trained(&format!("subsample{n}"), &sub, &config)?
        };
        let per = oracle_rmse(&params, &sub, &scene, &queries, sub.stage().half_weight_sharpness()).map_err(|e| e.message)?;
        results.push((n, mean(per.iter().map(|p| p.0)), mean(per.iter().map(|p| p.1))));
    }
    let (first, last) = (results[0], results[results.len() - 1]);
    let neural_drop = last.1 - first.1;
    let linear_drop = last.2 - first.2;
    let table: Vec<String> = results
        .iter()
        .map(|(n, a, b)| format!("n={n} neural {a:.5} linear {b:.5}"))
        .collect();
    Ok(outcome(
        neural_drop < linear_drop,
        format!(
            "{}; degradation neural {neural_drop:.5} vs linear {linear_drop:.5}",
            table.join(", ")
        ),
    ))
}

fn photometric_stereo(_: &mut Fixtures) -> Result<Outcome, String> {
    let scene = preset("sphere_plane", 0).map_err(err)?;
    let lambertian = scene.primitives.iter().all(|p| !p.material.is_specular && p.material.specular_strength == 0.0);
    let (w, h) = (REFERENCE_RES, REFERENCE_RES);
    let scan = generate_olat(&scene, &LightStage::build(REFERENCE_SUBDIVISION, &[]).map_err(err)?, w, h).map_err(err)?;
    let truth = surface_normals(&scene, w, h).map_err(err)?;
    let options = PsOptions {
        shadows: ShadowHandling::ExcludeShadowed,
    };
    let model = photometric_stereo_fit(&scan, options).map_err(err)?;
    let plane = scene.primitives[0].material.albedo;
    let sphere = scene.primitives[1].material.albedo;
    let (mut angle, mut count, mut se, mut sn) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            let Some(want) = truth[y * w + x] else { continue };
            angle += model.normals[y * w + x].angle(&want).to_degrees();
            count += 1;
            let albedo = if (want - Vec3::z()).norm() < 1e-12 { plane } else { sphere };
            for c in 0..3 {
                se += (model.albedo.get(x, y, c) as f64 - albedo[c]).powi(2);
                sn += 1;
            }
        }
    }
    let mean_angle = angle / count.max(1) as f64;
    let albedo_rmse = (se / sn.max(1) as f64).sqrt();
    let plain = photometric_stereo_fit(&scan, PsOptions::default()).map_err(err)?;
    let plain_angle = mean(
        (0..w * h).filter_map(|i| truth[i].map(|t| plain.normals[i].angle(&t).to_degrees())),
    );
    Ok(outcome(
        lambertian && mean_angle < 2.0 && albedo_rmse < 0.02,
        format!(
            "mean normal error {mean_angle:.4} deg, albedo RMSE {albedo_rmse:.5} over {count} pixels \
             (shadow-excluding fit; all-observation fit {plain_angle:.2} deg)"
        ),
    ))
}

fn open_plane(albedo: [f64; 3]) -> Scene {
    Scene {
        name: "plane".into(),
        primitives: vec![Primitive {
            shape: Shape::Plane {
                point: Vec3::zeros(),
                normal: Vec3::z(),
            },
            material: Material::matte(albedo),
        }],
        camera: Camera {
            position: Vec3::new(0.0, 0.0, 3.0),
            look_at: Vec3::zeros(),
            up: Vec3::y(),
            vertical_fov: 30.0,
        },
        background: [0.0; 3],
    }
}

fn env_machinery(_: &mut Fixtures) -> Result<Outcome, String> {
    let mut parts = Vec::new();
    let mut pass = true;

    let mut worst_area: f64 = 0.0;
    for h in [32, 64, 128] {
        let env = EnvMap::constant(h, [1.0; 3]);
        let total: f64 = (0..h).map(|v| env.pixel_solid_angle(v) * env.width() as f64).sum();
        worst_area = worst_area.max((total / (4.0 * std::f64::consts::PI) - 1.0).abs());
    }
    pass &= worst_area < 1e-3;
    parts.push(format!("solid angle rel err {worst_area:.2e}"));

    let sphere_plane = preset("sphere_plane", 0).map_err(err)?;
    let renderer = |d: &Vec3| render_scene(&sphere_plane, d, 16, 16);
    let a = bandlimited_env_sized(4, 1, 16);
    let b = bandlimited_env_sized(9, 2, 16);
    let sum = EnvMap::new(32, 16, a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).map_err(err)?;
    let (ra, rb, rs) = (
        env_relight(renderer, &a).map_err(err)?,
        env_relight(renderer, &b).map_err(err)?,
        env_relight(renderer, &sum).map_err(err)?,
    );
    let mut worst_sup: f64 = 0.0;
    for i in 0..rs.data().len() {
        let expect = ra.data()[i] as f64 + rb.data()[i] as f64;
        if expect > 1e-4 {
            worst_sup = worst_sup.max((rs.data()[i] as f64 - expect).abs() / expect);
        }
    }
    pass &= worst_sup < 1e-5;
    parts.push(format!("superposition rel err {worst_sup:.2e}"));

    let albedo = [0.6, 0.4, 0.2];
    let plane = open_plane(albedo);
    let radiance = 0.5;
    let lit = env_relight(|d: &Vec3| render_scene(&plane, d, 8, 8), &EnvMap::constant(64, [radiance as f32; 3])).map_err(err)?;
    let mut worst_irr: f64 = 0.0;
    for px in lit.data().chunks(3) {
        for c in 0..3 {
            let expected = std::f64::consts::PI * albedo[c] * radiance;
            worst_irr = worst_irr.max((px[c] as f64 - expected).abs() / expected);
        }
    }
    pass &= worst_irr < 0.02;
    parts.push(format!("constant-env irradiance rel err {worst_irr:.4}"));

    let mut sh_ok = true;
    let mut found = Vec::new();
    for (i, l) in [0usize, 1, 2, 3, 4, 6, 8, 10, 12, 15].iter().cycle().take(20).enumerate() {
        let env = bandlimited_env(*l, 100 + i as u64);
        let spec = sh_project(&env, 50).map_err(err)?;
        let d = sh_energy_degree(&spec, 0.9).map_err(err)?;
        sh_ok &= d <= *l;
        found.push(format!("{d}<={l}"));
    }
    pass &= sh_ok;
    parts.push(format!("SH energy degree on 20 maps {}", if sh_ok { "ok" } else { "violated" }));
    if !sh_ok {
        parts.push(found.join(" "));
    }
    Ok(outcome(pass, parts.join(", ")))
}

fn determinism(fx: &mut Fixtures) -> Result<Outcome, String> {
    let tmp = tempfile::tempdir().map_err(err)?;
    let p = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();
    run_cli(&["gen", "--preset", "sphere_plane", "--subdivision", "1", "--res", "32", "--out", &p("scan")])?;
    let train = |out: &str| {
        run_cli(&["train", "--scan", &p("scan"), "--steps", "60", "--progressive", "--seed", "5", "--out", out])
    };
    train(&p("a.olsr"))?;
    train(&p("b.olsr"))?;
    let read = |name: &str| fs::read(tmp.path().join(name)).map_err(err);
    let (a, b) = (read("a.olsr")?, read("b.olsr")?);
    let sidecar_before = read("a.olsr.run.json")?;
    run_cli(&["replay", &p("a.olsr.run.json")])?;
    let replayed = read("a.olsr")?;
    let sidecar_after = read("a.olsr.run.json")?;
    let weights_ok = a == b && a == replayed && sidecar_before == sidecar_after;

    let (scan, _) = fx.reference()?;
    let weights = fx.reference_weights_path()?;
    let scan_dir = fx.scan_dir("sphere_plane");
    let params = load_params(&weights).map_err(err)?;
    let state = lumisr_service::AppState::new(RelightContext::new(scan, Some(params)).map_err(err)?);
    let app = lumisr_service::router(state, None);
    let rt = tokio::runtime::Runtime::new().map_err(err)?;
    let cases: [(&str, &str, Option<(f64, usize)>); 4] = [
        ("neural", "0.31,-0.42,0.85", None),
        ("linear", "-0.2,0.5,0.8", None),
        ("neural", "0.1,0.3,0.9", Some((6.0, 12))),
        ("ps", "0.5,0.5,0.7", None),
    ];
    let mut parity = 0;
    for (i, (method, light, soft)) in cases.iter().enumerate() {
        let out = p(&format!("cli{i}.png"));
        let mut args = vec![
            if soft.is_some() { "softshadow" } else { "render" },
            "--weights",
            weights.to_str().unwrap(),
            "--scan",
            scan_dir.to_str().unwrap(),
            "--light",
            light,
            "--method",
            method,
            "--out",
            &out,
        ];
        let (radius, samples) = soft.map(|(r, s)| (r.to_string(), s.to_string())).unwrap_or_default();
        if soft.is_some() {
            args.extend(["--radius", &radius, "--samples", &samples]);
        }
        run_cli(&args)?;
        let cli_png = fs::read(&out).map_err(err)?;
        let l: Vec<f64> = light.split(',').map(|v| v.parse().unwrap()).collect();
        let mut body = serde_json::json!({ "light": l, "method": method });
        if let Some((r, s)) = soft {
            body["softness"] = serde_json::json!({ "radius_deg": r, "samples": s });
        }
        let http_png = rt.block_on(post_render(app.clone(), body.to_string()))?;
        parity += usize::from(http_png == cli_png);
    }
    let pass = weights_ok && parity == cases.len();
    Ok(outcome(
        pass,
        format!(
            "two trains and a sidecar replay byte-identical: {weights_ok} ({} bytes); CLI vs /render identical {parity}/{}",
            a.len(),
            cases.len()
        ),
    ))
}

async fn post_render(app: axum::Router, body: String) -> Result<Vec<u8>, String> {
    use http_body_util::BodyExt;
    use tower::ServiceExt;
    let req = axum::http::Request::post("/render")
        .header("content-type", "application/json")
        .body(axum::body::Body::from(body))
        .map_err(err)?;
    let resp = app.oneshot(req).await.map_err(err)?;
    if !resp.status().is_success() {
        return Err(format!("/render returned {}", resp.status()));
    }
    Ok(resp.into_body().collect().await.map_err(err)?.to_bytes().to_vec())
}
