use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use refexp_cli::backend::{BackendSpec, ToyLmKind};
use refexp_cli::convert::{convert_file, DatasetFormat};
use refexp_cli::evaluate::{run_evaluate, EvaluateOptions, EvaluationRecord};
use refexp_cli::generate::{run_generate, GenerateOptions, GenerationRecord};
use refexp_cli::scenes::{output, read_jsonl, read_scenes, write_jsonl};
use refexp_cli::sweep::{best_cell, read_sweep_csv, run_sweep, write_sweep_csv, SweepGrid, SweepOptions};
use refexp_cli::{default_workers, sweep};
use refexp_core::{Hyperparameters, ImagingConfig, NormMode, RepresentationMode, SimMode, StopTokens};

/// Discriminative referring-expression generation.
#[derive(Parser)]
#[command(name = "refexp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one expression per scene.
    Generate(GenerateCmd),
    /// Score expressions with the listener and caption metrics.
    Evaluate(EvaluateCmd),
    /// Grid-search the crop/blur mix and the distractor weight.
    Sweep(SweepCmd),
    /// Convert a dataset annotation file into scene files.
    Convert(ConvertCmd),
}

#[derive(Args)]
struct BackendArgs {
    /// `toy`, `tcp://host:port`, `host:port` or `exec:<command>`.
    #[arg(long, env = "DISCLIP_BACKEND", default_value = "toy")]
    backend: String,
    /// Toy vocabulary as JSON `{"attributes": [...], "fillers": [...]}`.
    #[arg(long, env = "DISCLIP_TOY_WORLD")]
    toy_world: Option<PathBuf>,
    /// Toy next-token table: `uniform` or `seeded:<n>`.
    #[arg(long, env = "DISCLIP_TOY_LM", default_value = "uniform")]
    toy_lm: ToyLmKind,
    #[arg(long, env = "DISCLIP_WORKERS", default_value_t = default_workers())]
    workers: usize,
}

impl BackendArgs {
    fn spec(&self) -> Result<BackendSpec> {
        BackendSpec::parse(&self.backend, self.toy_world.as_deref(), self.toy_lm)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Raw,
    Softmax,
}

#[derive(Clone, Copy, ValueEnum)]
enum SimArg {
    Cosine,
    Clipscore,
}

impl From<SimArg> for SimMode {
    fn from(s: SimArg) -> Self {
        match s {
            SimArg::Cosine => SimMode::Cosine,
            SimArg::Clipscore => SimMode::Clipscore,
        }
    }
}

#[derive(Args)]
struct ImagingArgs {
    #[arg(long, env = "DISCLIP_ENCODER_RESOLUTION", default_value_t = 224)]
    encoder_resolution: u32,
    #[arg(long, env = "DISCLIP_BLUR_SIGMA", default_value_t = 10.0)]
    blur_sigma: f64,
    /// crop-blur, blur, mirror or crop.
    #[arg(long, env = "DISCLIP_REPRESENTATION", default_value = "crop-blur")]
    representation: RepresentationMode,
}

impl ImagingArgs {
    fn config(&self) -> Result<ImagingConfig> {
        let cfg = ImagingConfig {
            encoder_resolution: self.encoder_resolution,
            blur_sigma: self.blur_sigma,
            representation: self.representation,
            ..ImagingConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct HyperArgs {
    /// Weight of the target term against the distractor term.
    #[arg(long, env = "DISCLIP_LAMBDA", default_value_t = 0.75)]
    lambda: f64,
    /// Weight of the blurred view against the crop.
    #[arg(long, env = "DISCLIP_DELTA", default_value_t = 0.5)]
    delta: f64,
    /// Weight of the visual score against the language score.
    #[arg(long, env = "DISCLIP_BETA", default_value_t = 2.0)]
    beta: f64,
    /// Degeneration penalty weight.
    #[arg(long, env = "DISCLIP_ALPHA", default_value_t = 0.6)]
    alpha: f64,
    #[arg(long, env = "DISCLIP_K", default_value_t = 45)]
    k: usize,
    #[arg(long, env = "DISCLIP_MAX_TOKENS", default_value_t = 16)]
    max_tokens: usize,
    /// Explicit stop token ids; defaults to end-of-text and the period.
    #[arg(long, env = "DISCLIP_STOP_TOKENS", value_delimiter = ',')]
    stop_tokens: Option<Vec<u32>>,
    #[arg(long, env = "DISCLIP_NORM_MODE", value_enum, default_value = "softmax")]
    norm_mode: NormArg,
    #[arg(long, env = "DISCLIP_SIM_MODE", value_enum, default_value = "cosine")]
    sim_mode: SimArg,
    /// Score candidates on the generated text only, without the prompt.
    #[arg(long, env = "DISCLIP_STRIP_PROMPT_FOR_CLIP")]
    strip_prompt_for_clip: bool,
    #[arg(long, env = "DISCLIP_PROMPT", default_value = "A photo of")]
    prompt: String,
}

impl HyperArgs {
    fn hyper(&self) -> Result<Hyperparameters> {
        let stop = match &self.stop_tokens {
            Some(ids) => StopTokens::Explicit(ids.iter().copied().collect()),
            None => StopTokens::LmDefault,
        };
        Ok(Hyperparameters::builder()
            .lambda(self.lambda)
            .delta(self.delta)
            .beta(self.beta)
            .alpha(self.alpha)
            .k(self.k)
            .max_tokens(self.max_tokens)
            .stop_tokens(stop)
            .norm_mode(match self.norm_mode {
                NormArg::Raw => NormMode::Raw,
                NormArg::Softmax => NormMode::Softmax,
            })
            .sim_mode(self.sim_mode.into())
            .strip_prompt_for_clip(self.strip_prompt_for_clip)
            .build()?)
    }
}

#[derive(Args)]
struct GenerateCmd {
    /// Scene file, JSON-lines file or directory of scene files.
    #[arg(long, env = "DISCLIP_SCENES")]
    scenes: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    imaging: ImagingArgs,
    /// Include token ids and every candidate's scores in the output.
    #[arg(long, env = "DISCLIP_TRACE")]
    trace: bool,
    /// Take δ and λ from the best row of a sweep CSV.
    #[arg(long, env = "DISCLIP_HPT_FROM")]
    hpt_from: Option<PathBuf>,
    /// Output JSON-lines file; stdout when omitted.
    #[arg(long, env = "DISCLIP_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateCmd {
    /// JSON-lines output of `generate`.
    #[arg(long, env = "DISCLIP_EXPRESSIONS")]
    expressions: PathBuf,
    #[arg(long, env = "DISCLIP_SCENES")]
    scenes: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    imaging: ImagingArgs,
    /// Crop/blur mix used by the listener.
    #[arg(long, env = "DISCLIP_LISTENER_DELTA", default_value_t = 0.5)]
    listener_delta: f64,
    #[arg(long, env = "DISCLIP_SIM_MODE", value_enum, default_value = "cosine")]
    sim_mode: SimArg,
    #[arg(long, env = "DISCLIP_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepCmd {
    #[arg(long, env = "DISCLIP_SCENES")]
    scenes: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    imaging: ImagingArgs,
    #[arg(long, env = "DISCLIP_DELTAS", value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    deltas: Vec<f64>,
    #[arg(long, env = "DISCLIP_LAMBDAS", value_delimiter = ',', default_value = "0.25,0.5,0.75,1")]
    lambdas: Vec<f64>,
    /// Number of scenes sampled for every cell.
    #[arg(long, env = "DISCLIP_SAMPLES", default_value_t = sweep::DEFAULT_SAMPLE_COUNT)]
    samples: usize,
    /// Seed of the scene sample.
    #[arg(long, env = "DISCLIP_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "DISCLIP_LISTENER_DELTA", default_value_t = 0.5)]
    listener_delta: f64,
    /// Output CSV; stdout when omitted.
    #[arg(long, env = "DISCLIP_OUT")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    #[value(name = "refcoco_like")]
    RefcocoLike,
    #[value(name = "flickr_like")]
    FlickrLike,
}

#[derive(Args)]
struct ConvertCmd {
    #[arg(long, env = "DISCLIP_INPUT")]
    input: PathBuf,
    #[arg(long, env = "DISCLIP_FORMAT", value_enum)]
    format: FormatArg,
    /// Prefix for image paths in the written scene files.
    #[arg(long, env = "DISCLIP_IMAGE_ROOT")]
    image_root: Option<PathBuf>,
    #[arg(long, env = "DISCLIP_OUT")]
    out: Option<PathBuf>,
}

/// Ok(true) when every item succeeded.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate(cmd) => {
            let mut hyper = cmd.hyper.hyper()?;
            if let Some(path) = &cmd.hpt_from {
                let rows = read_sweep_csv(path)?;
                let best = best_cell(&rows).with_context(|| format!("{} has no successful cell", path.display()))?;
                log::info!("using delta={} lambda={} from {}", best.delta, best.lambda, path.display());
                hyper = hyper.to_builder().delta(best.delta).lambda(best.lambda).build()?;
            }
            let opts = GenerateOptions {
                hyper,
                imaging: cmd.imaging.config()?,
                prompt: cmd.hyper.prompt.clone(),
                trace: cmd.trace,
                workers: cmd.backend.workers,
            };
            let spec = cmd.backend.spec()?;
            let entries = read_scenes(&cmd.scenes)?;
            let records = run_generate(&entries, &spec, &opts)?;
            write_jsonl(output(cmd.out.as_deref())?, &records)?;
            Ok(!records.iter().any(GenerationRecord::is_error))
        }
        Command::Evaluate(cmd) => {
            let opts = EvaluateOptions {
                imaging: cmd.imaging.config()?,
                listener_delta: cmd.listener_delta,
                sim_mode: cmd.sim_mode.into(),
                workers: cmd.backend.workers,
            };
            if !(0.0..=1.0).contains(&opts.listener_delta) {
                bail!("listener delta {} outside [0, 1]", opts.listener_delta);
            }
            let spec = cmd.backend.spec()?;
            let expressions: Vec<GenerationRecord> = read_jsonl(&cmd.expressions)?;
            let entries = read_scenes(&cmd.scenes)?;
            let records = run_evaluate(&expressions, &entries, &spec, &opts)?;
            write_jsonl(output(cmd.out.as_deref())?, &records)?;
            Ok(!records.iter().any(|r| matches!(r, EvaluationRecord::Error { .. })))
        }
        Command::Sweep(cmd) => {
            let grid = SweepGrid {
                delta_values: cmd.deltas,
                lambda_values: cmd.lambdas,
                sample_count: cmd.samples,
            };
            grid.validate()?;
            if !(0.0..=1.0).contains(&cmd.listener_delta) {
                bail!("listener delta {} outside [0, 1]", cmd.listener_delta);
            }
            let opts = SweepOptions {
                grid,
                base: GenerateOptions {
                    hyper: cmd.hyper.hyper()?,
                    imaging: cmd.imaging.config()?,
                    prompt: cmd.hyper.prompt.clone(),
                    trace: false,
                    workers: cmd.backend.workers,
                },
                listener_delta: cmd.listener_delta,
                sim_mode: cmd.hyper.sim_mode.into(),
                seed: cmd.seed,
            };
            let spec = cmd.backend.spec()?;
            let entries = read_scenes(&cmd.scenes)?;
            let rows = run_sweep(&entries, &spec, &opts)?;
            write_sweep_csv(output(cmd.out.as_deref())?, &rows)?;
            if let Some(best) = best_cell(&rows) {
                eprintln!(
                    "best cell: delta={} lambda={} accuracy={:.4}",
                    best.delta,
                    best.lambda,
                    best.accuracy.unwrap_or_default()
                );
            }
            Ok(rows.iter().all(|r| r.accuracy.is_some()))
        }
        Command::Convert(cmd) => {
            let format = match cmd.format {
                FormatArg::RefcocoLike => DatasetFormat::RefcocoLike,
                FormatArg::FlickrLike => DatasetFormat::FlickrLike,
            };
            let (scenes, summary) = convert_file(&cmd.input, format, &cmd.image_root.unwrap_or_default())?;
            write_jsonl(output(cmd.out.as_deref())?, &scenes)?;
            eprintln!("{}", serde_json::to_string(&summary)?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
