use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "lumisr", version, about = "Relight light-stage scans at arbitrary light directions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic OLAT scan.
    Gen(GenArgs),
    /// Train a model on one or more scans.
    Train(TrainArgs),
    /// Render one image for a light direction.
    Render(RenderArgs),
    /// Render frames along a great-circle light path.
    Sweep(SweepArgs),
    /// Leave-one-light-out evaluation.
    Eval(EvalArgs),
    /// Retrain on subsampled stages and compare against the oracle.
    Subsample(SubsampleArgs),
    /// Relight with an environment map.
    Envrelight(EnvArgs),
    /// Render with an area light.
    Softshadow(SoftArgs),
    /// Neural vs linear difference under bandlimited environments.
    Freq(FreqArgs),
    /// Start the HTTP relight service.
    Serve(ServeArgs),
    /// Re-run the invocation recorded in a `.run.json` sidecar.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub preset: String,
    #[arg(long, default_value_t = 2)]
    pub subdivision: u32,
    #[arg(long, default_value_t = 64)]
    pub res: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Scene seed (material jitter).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Light indices to remove, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub drop: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub scan: Vec<PathBuf>,
    /// Model config JSON; defaults to the desk config of the first scan.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 20_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub progressive: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub scan: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Direction `x,y,z`.
    #[arg(long, allow_hyphen_values = true)]
    pub light: String,
    #[arg(long, default_value = "neural")]
    pub method: String,
    #[arg(long, default_value_t = 1.0)]
    pub exposure: f64,
    /// Blend sharpness for `linear`.
    #[arg(long)]
    pub sharpness: Option<f64>,
    /// `.pfm` or `.png`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SoftArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long, allow_hyphen_values = true)]
    pub light: String,
    /// Cap radius in degrees.
    #[arg(long)]
    pub radius: f64,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    #[arg(long, default_value = "neural")]
    pub method: String,
    #[arg(long, default_value_t = 1.0)]
    pub exposure: f64,
    #[arg(long)]
    pub sharpness: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// `great_circle:x/y/z,x/y/z,frames`.
    #[arg(long, allow_hyphen_values = true)]
    pub path: String,
    #[arg(long, default_value = "neural")]
    pub method: String,
    #[arg(long)]
    pub sharpness: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// `all` or comma-separated light indices.
    #[arg(long, default_value = "all")]
    pub holdout: String,
    #[arg(long, value_delimiter = ',', default_value = "neural,linear,barycentric,ps")]
    pub methods: Vec<String>,
    #[arg(long)]
    pub sharpness: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SubsampleArgs {
    #[arg(long)]
    pub scan: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub n: Vec<usize>,
    #[arg(long, default_value_t = 20_000)]
    pub steps: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed of the dropped-light choice, the training run and the queries.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub queries: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EnvArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long)]
    pub env: PathBuf,
    #[arg(long, default_value = "neural")]
    pub method: String,
    #[arg(long, default_value_t = 1.0)]
    pub exposure: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FreqArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// `0..40` or a comma list.
    #[arg(long, default_value = "0..40")]
    pub degrees: String,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = lumisr_core::env::DEFAULT_ENV_HEIGHT)]
    pub env_height: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Static UI bundle served at `/`.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub sidecar: PathBuf,
}
