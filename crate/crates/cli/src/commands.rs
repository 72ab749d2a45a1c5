use std::net::SocketAddr;
use std::path::Path;

use lumisr_core::io::{load_env, load_scan, save_scan, write_pfm, MANIFEST};
use lumisr_core::metrics::temporal_profile;
use lumisr_core::render::{generate_olat, occluder, preset};
use lumisr_core::{Image, LightStage, Vec3};
use lumisr_neural::train::train_with_progress;
use lumisr_neural::weights::{load_params, save_params};
use lumisr_neural::{Ablation, ModelConfig, ModelParams, TrainOptions};
use lumisr_service::context::SOFTNESS_SEED;
use lumisr_service::{AppState, Method, RelightContext, RenderRequest, Resolved, Softness};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::*;
use crate::experiments::{
    default_config, edge_position, freq_study, great_circle, leave_one_out, offgrid_queries, oracle_rmse, parse_degrees,
    scan_scene, schedule, subsample_scan, xz_tilt,
};
use crate::output::{io_error, read_sidecar_argv, sidecar, write_sidecar, OutputGuard};
use crate::CliError;

/// Deviation from unit norm above which a CLI light direction draws a warning.
pub const NORM_WARN_TOLERANCE: f64 = 1e-3;

pub fn dispatch(command: Command, argv: Vec<String>) -> Result<(), CliError> {
    match command {
        Command::Gen(a) => gen(a, &argv),
        Command::Train(a) => train(a, &argv),
        Command::Render(a) => render(a, &argv),
        Command::Softshadow(a) => softshadow(a, &argv),
        Command::Sweep(a) => sweep(a, &argv),
        Command::Eval(a) => eval(a, &argv),
        Command::Subsample(a) => subsample(a, &argv),
        Command::Envrelight(a) => envrelight(a, &argv),
        Command::Freq(a) => freq(a, &argv),
        Command::Serve(a) => serve(a),
        Command::Replay(a) => replay(a),
    }
}

fn print_seeds(seeds: &Value) {
    println!("seeds {seeds}");
}

/// Parses `x,y,z`, warning when the vector is not unit length.
pub fn parse_light(s: &str) -> Result<[f64; 3], CliError> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::usage(format!("bad light `{s}` (expected x,y,z)")))?;
    let [x, y, z] = parts[..] else {
        return Err(CliError::usage(format!("bad light `{s}` (expected x,y,z)")));
    };
    let v = lumisr_service::context::normalize_light([x, y, z])?;
    let norm = (x * x + y * y + z * z).sqrt();
    if (norm - 1.0).abs() > NORM_WARN_TOLERANCE {
        eprintln!("warning: light ({x}, {y}, {z}) has norm {norm:.6}; normalized");
    }
    Ok([v.x, v.y, v.z])
}

fn load_params_opt(path: Option<&Path>) -> Result<Option<ModelParams<f32>>, CliError> {
    path.map(load_params).transpose().map_err(Into::into)
}

fn load_context(scene: &SceneArgs) -> Result<RelightContext, CliError> {
    let scan = load_scan(&scene.scan)?;
    let params = load_params_opt(scene.weights.as_deref())?;
    Ok(RelightContext::new(scan, params)?)
}

fn parse_method(s: &str) -> Result<Method, CliError> {
    Ok(s.parse::<Method>()?)
}

enum ImageKind {
    Png,
    Pfm,
}

fn image_kind(out: &Path) -> Result<ImageKind, CliError> {
    match out.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => Ok(ImageKind::Png),
        Some("pfm") => Ok(ImageKind::Pfm),
        _ => Err(CliError::usage(format!("{}: output must end in .png or .pfm", out.display()))),
    }
}

fn write_image(guard: &mut OutputGuard, out: &Path, img: &Image, exposure: f64) -> Result<(), CliError> {
    match image_kind(out)? {
        ImageKind::Png => guard.write(out, &lumisr_core::io::encode_png_bytes(img, exposure as f32)?),
        ImageKind::Pfm => {
            guard.file(out);
            Ok(write_pfm(out, img)?)
        }
    }
}

fn gen(a: GenArgs, argv: &[String]) -> Result<(), CliError> {
    let seeds = json!({ "scene": a.seed });
    print_seeds(&seeds);
    let scene = preset(&a.preset, a.seed)?;
    let stage = LightStage::build(a.subdivision, &a.drop)?;
    if a.res == 0 {
        return Err(CliError::usage("--res must be positive"));
    }
    if a.out.is_dir() && !a.out.join(MANIFEST).exists() && a.out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
        return Err(CliError::usage(format!(
            "{} is a non-empty directory without a scan manifest",
            a.out.display()
        )));
    }
    let mut guard = OutputGuard::new();
    guard.dir(&a.out)?;
    guard.file(&a.out.join(MANIFEST));
    let mut scan = generate_olat(&scene, &stage, a.res, a.res)?;
    scan.meta.seed = a.seed;
    save_scan(&a.out, &scan)?;
    let config = json!({
        "preset": a.preset, "subdivision": a.subdivision, "res": a.res, "drop": a.drop, "n_lights": stage.n(),
    });
    write_sidecar(&mut guard, &a.out, &sidecar("gen", argv, config, seeds))?;
    guard.commit();
    println!("wrote {} lights at {}x{} to {}", stage.n(), a.res, a.res, a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

fn read_config(path: &Path) -> Result<ModelConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::new("input", format!("{}: {e}", path.display())))
}

fn train(a: TrainArgs, argv: &[String]) -> Result<(), CliError> {
    let scans = a.scan.iter().map(|p| load_scan(p)).collect::<Result<Vec<_>, _>>()?;
    let mut config = match &a.config {
        Some(p) => read_config(p)?,
        None => default_config(&scans[0]),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(ab) = &a.ablation {
        config.ablation = Some(ab.parse::<Ablation>()?);
    }
    config.validate()?;
    let seeds = json!({ "train": config.seed });
    print_seeds(&seeds);
    let options = TrainOptions {
        steps: a.steps,
        lr: a.lr,
        progressive: a.progressive,
    };
    let report_every = (a.steps / 20).max(1);
    let mut window = Vec::with_capacity(report_every);
    let out = train_with_progress(&scans, &config, options, |step, loss| {
        window.push(loss);
        if step % report_every == 0 || step == a.steps {
            eprintln!("step {step}/{} loss {:.6}", a.steps, lumisr_neural::train::mean(&window));
            window.clear();
        }
    })?;
    let mut guard = OutputGuard::new();
    guard.file(&a.out);
    save_params(&a.out, &out.params)?;
    let mut loss_path = a.out.clone().into_os_string();
    loss_path.push(".loss.csv");
    let rows: Vec<LossRow> = out.losses.iter().enumerate().map(|(i, &loss)| LossRow { step: i + 1, loss }).collect();
    guard.write_csv(Path::new(&loss_path), &rows)?;
    let resolved = json!({
        "model": config,
        "steps": a.steps,
        "lr": a.lr,
        "progressive": a.progressive,
        "scans": a.scan,
        "final_sharpness": out.params.sharpness(),
    });
    write_sidecar(&mut guard, &a.out, &sidecar("train", argv, resolved, seeds))?;
    guard.commit();
    println!("wrote {}", a.out.display());
    Ok(())
}

fn request_sidecar(ctx: &RelightContext, scene: &SceneArgs, r: &Resolved) -> Value {
    json!({
        "scan": scene.scan,
        "weights": scene.weights,
        "scan_name": ctx.scan().meta.name,
        "request": r,
    })
}

fn render_resolved(ctx: &RelightContext, scene: &SceneArgs, r: &Resolved, out: &Path, cmd: &str, argv: &[String]) -> Result<(), CliError> {
    let seeds = json!({ "softness": SOFTNESS_SEED });
    print_seeds(&seeds);
    let kind = image_kind(out)?;
    let mut guard = OutputGuard::new();
    match kind {
        // same bytes as the service's /render
        ImageKind::Png => guard.write(out, &ctx.render_png(r)?)?,
        ImageKind::Pfm => write_image(&mut guard, out, &ctx.render(r)?, r.exposure)?,
    }
    write_sidecar(&mut guard, out, &sidecar(cmd, argv, request_sidecar(ctx, scene, r), seeds))?;
    guard.commit();
    println!("resolved {}", r.key());
    println!("wrote {}", out.display());
    Ok(())
}

fn render(a: RenderArgs, argv: &[String]) -> Result<(), CliError> {
    let light = parse_light(&a.light)?;
    image_kind(&a.out)?;
    let ctx = load_context(&a.scene)?;
    let r = ctx.resolve(&RenderRequest {
        light,
        method: a.method.clone(),
        softness: None,
        exposure: Some(a.exposure),
        format: None,
        sharpness: a.sharpness,
    })?;
    render_resolved(&ctx, &a.scene, &r, &a.out, "render", argv)
}

fn softshadow(a: SoftArgs, argv: &[String]) -> Result<(), CliError> {
    let light = parse_light(&a.light)?;
    image_kind(&a.out)?;
    let ctx = load_context(&a.scene)?;
    let r = ctx.resolve(&RenderRequest {
        light,
        method: a.method.clone(),
        softness: Some(Softness {
            radius_deg: a.radius,
            samples: a.samples,
        }),
        exposure: Some(a.exposure),
        format: None,
        sharpness: a.sharpness,
    })?;
    render_resolved(&ctx, &a.scene, &r, &a.out, "softshadow", argv)
}

/// Parses `great_circle:x/y/z,x/y/z,frames`.
pub fn parse_path(s: &str) -> Result<(Vec3, Vec3, usize), CliError> {
    let bad = || CliError::usage(format!("bad path `{s}` (expected great_circle:x/y/z,x/y/z,frames)"));
    let body = s.strip_prefix("great_circle:").ok_or_else(bad)?;
    let parts: Vec<&str> = body.split(',').collect();
    let [from, to, frames] = parts[..] else {
        return Err(bad());
    };
    let dir = |t: &str| -> Result<Vec3, CliError> {
        let l = parse_light(&t.replace('/', ","))?;
        Ok(Vec3::new(l[0], l[1], l[2]))
    };
    let frames: usize = frames.trim().parse().map_err(|_| bad())?;
    Ok((dir(from)?, dir(to)?, frames))
}

#[derive(Serialize)]
struct StepRow {
    step: usize,
    rmse: f64,
}

#[derive(Serialize)]
struct EdgeRow {
    frame: usize,
    theta_deg: f64,
    tan_theta: f64,
    edge_col: Option<f64>,
    oracle_col: f64,
}

fn sweep(a: SweepArgs, argv: &[String]) -> Result<(), CliError> {
    let (from, to, frames) = parse_path(&a.path)?;
    let dirs = great_circle(&from, &to, frames)?;
    let ctx = load_context(&a.scene)?;
    let method = parse_method(&a.method)?;
    let sharpness = a.sharpness.unwrap_or(ctx.default_sharpness());
    if method == Method::Neural && ctx.params().is_none() {
        return Err(CliError::usage("method neural needs --weights"));
    }
    let seeds = json!({});
    print_seeds(&seeds);
    let images: Vec<Image> = dirs
        .par_iter()
        .map(|d| ctx.render_dir(method, d, sharpness))
        .collect::<Result<_, _>>()?;
    let mut guard = OutputGuard::new();
    guard.dir(&a.out)?;
    for (i, img) in images.iter().enumerate() {
        write_image(&mut guard, &a.out.join(format!("frame_{i:04}.pfm")), img, 1.0)?;
        write_image(&mut guard, &a.out.join(format!("frame_{i:04}.png")), img, 1.0)?;
    }
    let profile = temporal_profile(&images)?;
    let steps: Vec<StepRow> = profile.steps.iter().enumerate().map(|(step, &rmse)| StepRow { step, rmse }).collect();
    guard.write_csv(&a.out.join("temporal_profile.csv"), &steps)?;
    if ctx.scan().meta.name == "occluder_edge" {
        let w = ctx.scan().width();
        let rows: Vec<EdgeRow> = dirs
            .iter()
            .zip(&images)
            .enumerate()
            .map(|(frame, (d, img))| {
                let theta = xz_tilt(d);
                EdgeRow {
                    frame,
                    theta_deg: theta.to_degrees(),
                    tan_theta: theta.tan(),
                    edge_col: edge_position(img).ok(),
                    oracle_col: occluder::edge_column(theta, w),
                }
            })
            .collect();
        guard.write_csv(&a.out.join("shadow_edge.csv"), &rows)?;
    }
    let config = json!({
        "scan": a.scene.scan, "weights": a.scene.weights, "method": method, "sharpness": sharpness,
        "from": [from.x, from.y, from.z], "to": [to.x, to.y, to.z], "frames": frames,
    });
    write_sidecar(&mut guard, &a.out, &sidecar("sweep", argv, config, seeds))?;
    guard.commit();
    println!(
        "{} frames; max step {:.6} at {} median {:.6}",
        images.len(),
        profile.max_step,
        profile.max_index,
        profile.median_step
    );
    Ok(())
}

fn parse_holdouts(s: &str, n: usize) -> Result<Vec<usize>, CliError> {
    if s == "all" {
        return Ok((0..n).collect());
    }
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| CliError::usage(format!("bad holdout list `{s}`"))))
        .collect()
}

fn eval(a: EvalArgs, argv: &[String]) -> Result<(), CliError> {
    let ctx = load_context(&a.scene)?;
    let methods = a.methods.iter().map(|m| parse_method(m.trim())).collect::<Result<Vec<_>, _>>()?;
    let holdouts = parse_holdouts(&a.holdout, ctx.scan().stage().n())?;
    let sharpness = a.sharpness.unwrap_or(ctx.default_sharpness());
    let seeds = json!({});
    print_seeds(&seeds);
    let rows = leave_one_out(&ctx, &methods, &holdouts, sharpness)?;
    let mut guard = OutputGuard::new();
    guard.write_csv(&a.out, &rows)?;
    let config = json!({
        "scan": a.scene.scan, "weights": a.scene.weights, "methods": methods, "holdouts": holdouts,
        "linear_sharpness": sharpness, "linear_k": ctx.blend_k(),
    });
    write_sidecar(&mut guard, &a.out, &sidecar("eval", argv, config, seeds))?;
    guard.commit();
    for r in rows.iter().filter(|r| r.query_id == "mean") {
        println!("{:<12} rmse {:.6} h1 {:.6} dssim {:.6}", r.method, r.rmse, r.h1, r.dssim);
    }
    Ok(())
}

#[derive(Serialize)]
struct SubsampleRow {
    n: usize,
    m: usize,
    k: usize,
    neural_rmse: f64,
    linear_rmse: f64,
}

fn subsample(a: SubsampleArgs, argv: &[String]) -> Result<(), CliError> {
    let scan = load_scan(&a.scan)?;
    let scene = scan_scene(&scan)?;
    let base = a.config.as_deref().map(read_config).transpose()?;
    let queries = offgrid_queries(scan.stage(), a.queries, a.seed);
    let seeds = json!({ "drop": a.seed, "train": a.seed, "queries": a.seed });
    print_seeds(&seeds);
    let mut rows = Vec::new();
    let mut configs = Vec::new();
    for &n in &a.n {
        let sub = subsample_scan(&scan, n, a.seed)?;
        let (m, k) = schedule(n);
        let mut config = base.clone().unwrap_or_else(|| default_config(&sub));
        config.m = m;
        config.k = k;
        config.seed = a.seed;
        config.validate()?;
        eprintln!("n {n}: training m {m} k {k} for {} steps", a.steps);
        let trained = lumisr_neural::train(
            std::slice::from_ref(&sub),
            &config,
            TrainOptions {
                steps: a.steps,
                ..TrainOptions::default()
            },
        )?;
        let per_query = oracle_rmse(&trained.params, &sub, &scene, &queries, sub.stage().half_weight_sharpness())?;
        let mean = |f: fn(&(f64, f64)) -> f64| per_query.iter().map(f).sum::<f64>() / per_query.len().max(1) as f64;
        let row = SubsampleRow {
            n,
            m,
            k,
            neural_rmse: mean(|p| p.0),
            linear_rmse: mean(|p| p.1),
        };
        println!("n {n} neural {:.6} linear {:.6}", row.neural_rmse, row.linear_rmse);
        rows.push(row);
        configs.push(config);
    }
    let mut guard = OutputGuard::new();
    guard.write_csv(&a.out, &rows)?;
    let config = json!({ "scan": a.scan, "n": a.n, "steps": a.steps, "queries": a.queries, "models": configs });
    write_sidecar(&mut guard, &a.out, &sidecar("subsample", argv, config, seeds))?;
    guard.commit();
    Ok(())
}

fn envrelight(a: EnvArgs, argv: &[String]) -> Result<(), CliError> {
    image_kind(&a.out)?;
    let ctx = load_context(&a.scene)?;
    let method = parse_method(&a.method)?;
    if !(a.exposure.is_finite() && a.exposure >= 0.0) {
        return Err(CliError::usage(format!("exposure {} must be >= 0", a.exposure)));
    }
    let env = load_env(&a.env)?;
    let seeds = json!({});
    print_seeds(&seeds);
    let img = ctx.render_env(method, &env)?;
    let mut guard = OutputGuard::new();
    write_image(&mut guard, &a.out, &img, a.exposure)?;
    let config = json!({
        "scan": a.scene.scan, "weights": a.scene.weights, "env": a.env, "method": method,
        "exposure": a.exposure, "sharpness": ctx.default_sharpness(),
    });
    write_sidecar(&mut guard, &a.out, &sidecar("envrelight", argv, config, seeds))?;
    guard.commit();
    println!("wrote {}", a.out.display());
    Ok(())
}

fn freq(a: FreqArgs, argv: &[String]) -> Result<(), CliError> {
    let degrees = parse_degrees(&a.degrees)?;
    if a.seeds == 0 || a.env_height < 2 {
        return Err(CliError::usage("need --seeds >= 1 and --env-height >= 2"));
    }
    let ctx = load_context(&a.scene)?;
    let seeds = json!({ "env": (0..a.seeds).collect::<Vec<_>>() });
    print_seeds(&seeds);
    let rows = freq_study(&ctx, &degrees, a.seeds, a.env_height)?;
    let mut guard = OutputGuard::new();
    guard.write_csv(&a.out, &rows)?;
    let config = json!({
        "scan": a.scene.scan, "weights": a.scene.weights, "degrees": degrees, "env_height": a.env_height,
    });
    write_sidecar(&mut guard, &a.out, &sidecar("freq", argv, config, seeds))?;
    guard.commit();
    for r in rows.iter().filter(|r| r.seed == "mean") {
        println!("degree {:>3} dssim {:.6}", r.degree, r.dssim);
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let ctx = load_context(&a.scene)?;
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|_| CliError::usage(format!("bad address {}:{}", a.host, a.port)))?;
    if let Some(dir) = &a.ui_dir {
        if !dir.is_dir() {
            return Err(CliError::usage(format!("--ui-dir {} is not a directory", dir.display())));
        }
    }
    let state = AppState::new(ctx);
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::new("io", format!("runtime: {e}")))?;
    rt.block_on(lumisr_service::serve(addr, state, a.ui_dir.clone()))
        .map_err(|e| CliError::new("io", format!("serve {addr}: {e}")))
}

fn replay(a: ReplayArgs) -> Result<(), CliError> {
    let argv = read_sidecar_argv(&a.sidecar)?;
    if argv.first().map(String::as_str) == Some("replay") {
        return Err(CliError::new("input", "a sidecar cannot record a replay"));
    }
    let mut full = vec!["lumisr".to_string()];
    full.extend(argv);
    crate::run(full)
}
