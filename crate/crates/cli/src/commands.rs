use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::{json, Value};
use swapkit_core::bboxgen::localize;
use swapkit_core::eval::{
    run_benchmark, BenchLayout, BenchOptions, IdentityRunner, ImageTextScorer, MethodRunner,
    PerceptualMetric, PipelineRunner, StubPerceptual, StubScorer,
};
use swapkit_core::pipeline::{run_baseline, Baseline};
use swapkit_core::{insert, remove, swap, DenoiserBackend, PixelImage, SwapError, SwapResult};

use crate::config::CliConfig;
use crate::{CliError, ConfigArgs, EditArgs, EXIT_CONFIG, EXIT_LOCALIZE, EXIT_PIPELINE};

type Backend = Box<dyn DenoiserBackend + Send>;

fn config_error(e: &SwapError) -> CliError {
    CliError::from_swap(EXIT_CONFIG, e)
}

fn pipeline_error(e: &SwapError) -> CliError {
    CliError::from_swap(EXIT_PIPELINE, e)
}

/// Loads the config, builds the backend and checks the swap settings against it.
fn prepare(args: &ConfigArgs) -> Result<(CliConfig, Backend), CliError> {
    let cfg = CliConfig::load(args.config.as_deref(), &args.overrides)?;
    let backend = cfg.backend.build().map_err(|e| config_error(&e))?;
    cfg.swap
        .validate(backend.schedule().t_max())
        .map_err(|e| config_error(&e))?;
    Ok((cfg, backend))
}

fn load_source(path: &Path, backend: &dyn DenoiserBackend) -> Result<PixelImage, CliError> {
    let (_, _, channels) = backend.image_dims();
    PixelImage::load(path, channels).map_err(|e| config_error(&e))
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    fs::write(path, text).map_err(|e| pipeline_error(&SwapError::Io {
        path: path.display().to_string(),
        source: e,
    }))
}

#[derive(Debug, Clone, Copy)]
pub enum Edit {
    Swap,
    Insert,
    Remove,
}

pub fn edit(kind: Edit, args: &EditArgs) -> Result<(), CliError> {
    let (cfg, mut backend) = prepare(&args.cfg)?;
    let source = load_source(&args.source, backend.as_ref())?;
    let result: SwapResult = match kind {
        Edit::Swap => swap(&source, &cfg.swap, &cfg.concept(), backend.as_mut()),
        Edit::Insert => insert(&source, &cfg.swap, &cfg.concept(), backend.as_mut()),
        Edit::Remove => remove(&source, &cfg.swap, backend.as_mut()),
    }
    .map_err(|e| pipeline_error(&e))?;
    result.image.save_png(&args.output).map_err(|e| pipeline_error(&e))?;
    let sidecar = args
        .sidecar
        .clone()
        .unwrap_or_else(|| args.output.with_extension("json"));
    let mut meta = json!({
        "bbox_used": result.bbox_used,
        "forward_passes": result.forward_passes,
        "wall_clock": result.wall_clock,
        "config": Value::Object(cfg.to_map()),
    });
    if let Some(log) = &result.per_step_log {
        meta["per_step_log"] = serde_json::to_value(log).expect("log serializes");
    }
    write_json(&sidecar, &meta)?;
    println!(
        "wrote {} (bbox {}, {} forward passes, {:.2}s)",
        args.output.display(),
        result.bbox_used,
        result.forward_passes,
        result.wall_clock
    );
    Ok(())
}

#[derive(Args)]
pub struct BboxArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub source: PathBuf,
    /// Where to write the bbox JSON.
    #[arg(long)]
    pub output: PathBuf,
    /// Saliency heat image; defaults to the output path with a `.png` extension.
    #[arg(long)]
    pub saliency: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
}

pub fn bbox(args: &BboxArgs) -> Result<(), CliError> {
    let mut cfg_args = args.cfg.clone();
    if let Some(a) = args.alpha {
        cfg_args.overrides.push(format!("alpha={a:?}"));
    }
    if let Some(b) = args.beta {
        cfg_args.overrides.push(format!("beta={b:?}"));
    }
    let (cfg, mut backend) = prepare(&cfg_args)?;
    let source = load_source(&args.source, backend.as_ref())?;
    let latent = backend.encode_image(&source).map_err(|e| config_error(&e))?;
    let loc = localize(
        backend.as_mut(),
        &latent,
        &cfg.swap.source_prompt,
        &cfg.swap.source_concept,
        &cfg.swap.localize_params(),
    )
    .map_err(|e| match e {
        SwapError::EmptyMask | SwapError::DegenerateAttention => CliError::from_swap(EXIT_LOCALIZE, &e),
        other => pipeline_error(&other),
    })?;
    write_json(&args.output, &serde_json::to_value(loc.bbox).expect("bbox serializes"))?;
    let (h, w) = loc.saliency.grid();
    let heat = PixelImage::new(
        loc.saliency
            .values
            .clone()
            .into_shape_with_order((h, w, 1))
            .expect("saliency is h×w"),
    );
    let heat_path = args
        .saliency
        .clone()
        .unwrap_or_else(|| args.output.with_extension("png"));
    heat.save_png(&heat_path).map_err(|e| pipeline_error(&e))?;
    println!("{}", loc.bbox);
    Ok(())
}

#[derive(Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Benchmark root with concepts/, swaps/, gt_bboxes/ and prompts.tsv.
    #[arg(long)]
    pub layout: PathBuf,
    /// Directory for report.json and report.txt.
    #[arg(long)]
    pub out: PathBuf,
    /// `swap` runs the pipeline; `identity` returns sources unchanged.
    #[arg(long, default_value = "swap")]
    pub runner: String,
    /// Worker count; overrides the `jobs` setting.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Use the deterministic stub scorers for CLIP and LPIPS.
    #[arg(long)]
    pub stub_scorers: bool,
}

pub fn bench(args: &BenchArgs) -> Result<(), CliError> {
    let (cfg, backend) = prepare(&args.cfg)?;
    let (_, _, channels) = backend.image_dims();
    let runner: Box<dyn MethodRunner> = match args.runner.as_str() {
        "swap" => Box::new(PipelineRunner {
            backend: cfg.backend.clone(),
            swap: cfg.swap.clone(),
        }),
        "identity" => Box::new(IdentityRunner),
        other => {
            return Err(CliError::config(
                "ConfigError",
                format!("unknown runner {other:?} (expected swap or identity)"),
            ))
        }
    };
    let layout = BenchLayout::load(&args.layout).map_err(|e| config_error(&e))?;
    let scorer = StubScorer::new((4, 4), channels);
    let perceptual = StubPerceptual::default();
    let (scorer, perceptual): (Option<&dyn ImageTextScorer>, Option<&dyn PerceptualMetric>) =
        if args.stub_scorers {
            (Some(&scorer), Some(&perceptual))
        } else {
            (None, None)
        };
    let opts = BenchOptions {
        jobs: args.jobs.unwrap_or(cfg.jobs),
        channels,
        seed: cfg.swap.seed,
        ..BenchOptions::default()
    };
    let report = run_benchmark(&layout, runner.as_ref(), scorer, perceptual, &opts, Some(&args.out))
        .map_err(|e| pipeline_error(&e))?;
    print!("{}", report.to_table());
    Ok(())
}

#[derive(Args)]
pub struct AccelArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// `sds` or `dds`.
    #[arg(long)]
    pub method: String,
    /// Step-skipping periods to compare.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 3, 5])]
    pub lambdas: Vec<usize>,
    /// Iterations per run; overrides `total_steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Image to optimize from; a mid-gray image when absent.
    #[arg(long)]
    pub source: Option<PathBuf>,
}

/// Reference timings on a full diffusion backend, seconds at λ = 1, 3, 5.
const REFERENCE_TIMES: [(Baseline, [f64; 3]); 2] = [
    (Baseline::Sds, [40.37, 14.12, 8.62]),
    (Baseline::Dds, [66.89, 22.65, 13.90]),
];

pub fn accel_demo(args: &AccelArgs) -> Result<(), CliError> {
    let method: Baseline = args.method.parse().map_err(|e| config_error(&e))?;
    if args.lambdas.is_empty() || args.lambdas.contains(&0) {
        return Err(CliError::config("ConfigError", "lambdas must be >= 1"));
    }
    let mut cfg_args = args.cfg.clone();
    if let Some(t) = args.steps {
        cfg_args.overrides.push(format!("total_steps={t}"));
    }
    let (cfg, mut backend) = prepare(&cfg_args)?;
    let source = match &args.source {
        Some(p) => load_source(p, backend.as_ref())?,
        None => {
            let (h, w, c) = backend.image_dims();
            PixelImage::filled(h, w, c, 0.5)
        }
    };
    let latent = backend.encode_image(&source).map_err(|e| config_error(&e))?;

    let name = format!("{method:?}").to_uppercase();
    println!(
        "{:<6} {:>4} {:>10} {:>15} {:>11} {:>8}",
        "method", "λ", "gradients", "forward passes", "seconds", "speedup"
    );
    let mut base_time = None;
    for &lambda in &args.lambdas {
        let run_cfg = swapkit_core::SwapConfig {
            lambda,
            ..cfg.swap.clone()
        };
        let run = run_baseline(method, &latent, &run_cfg, backend.as_mut()).map_err(|e| pipeline_error(&e))?;
        let base = *base_time.get_or_insert(run.wall_clock);
        let speedup = if run.wall_clock > 0.0 { base / run.wall_clock } else { f64::NAN };
        println!(
            "{:<6} {:>4} {:>10} {:>15} {:>11.3} {:>7.2}x",
            name, lambda, run.gradient_evaluations, run.forward_passes, run.wall_clock, speedup
        );
    }
    let (_, times) = REFERENCE_TIMES
        .iter()
        .find(|(m, _)| *m == method)
        .expect("every baseline has reference times");
    println!(
        "reference on a full diffusion backend ({name}): λ=1 {:.2}s, λ=3 {:.2}s, λ=5 {:.2}s",
        times[0], times[1], times[2]
    );
    Ok(())
}
