//! Benchmark layout, method runners and report aggregation.
//!
//! Layout on disk:
//!
//! ```text
//! root/
//!   concepts/<name>/*.png        target concept images
//!   concepts/<name>/token.txt    optional phrase naming the concept (default: <name>)
//!   swaps/<stem>.png             source images
//!   gt_bboxes/<stem>.json        ground-truth bbox in pixel coordinates
//!   prompts.tsv                  swap_image, source_prompt, source_concept
//! ```
//!
//! Every concept is paired with every swap image.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{clip_scores, masked_background_metrics, PixelRange};
use super::scorer::{ImageTextScorer, PerceptualMetric};
use crate::backend::BackendConfig;
use crate::bboxgen::BBox;
use crate::error::{Result, SwapError};
use crate::pipeline::{swap, ConceptSpec, SwapConfig};
use crate::pixels::PixelImage;

/// Report columns in display order.
pub const REPORT_COLUMNS: [&str; 7] = [
    "CLIP-I",
    "PSNR",
    "LPIPS×10³",
    "MSE×10⁴",
    "SSIM×10²",
    "CLIP-T",
    "Time(s)",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSet {
    pub name: String,
    /// Phrase substituted for the source concept in the target prompt.
    pub phrase: String,
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapEntry {
    pub stem: String,
    pub image: PathBuf,
    pub gt_bbox: BBox,
    pub source_prompt: String,
    pub source_concept: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchLayout {
    pub concepts: Vec<ConceptSet>,
    pub swaps: Vec<SwapEntry>,
}

fn layout_err(msg: impl Into<String>) -> SwapError {
    SwapError::Layout(msg.into())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| SwapError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| SwapError::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn is_png(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

#[derive(Debug, Deserialize)]
struct PromptRow {
    swap_image: String,
    source_prompt: String,
    source_concept: String,
}

impl BenchLayout {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        for sub in ["concepts", "swaps", "gt_bboxes"] {
            if !root.join(sub).is_dir() {
                return Err(layout_err(format!("missing directory {}", root.join(sub).display())));
            }
        }

        let mut concepts = Vec::new();
        for dir in sorted_entries(&root.join("concepts"))? {
            if !dir.is_dir() {
                continue;
            }
            let name = dir
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| layout_err(format!("bad concept dir {}", dir.display())))?
                .to_string();
            let token_file = dir.join("token.txt");
            let phrase = if token_file.exists() {
                fs::read_to_string(&token_file)
                    .map_err(|e| SwapError::io(&token_file, e))?
                    .trim()
                    .to_string()
            } else {
                name.clone()
            };
            let images: Vec<PathBuf> = sorted_entries(&dir)?.into_iter().filter(|p| is_png(p)).collect();
            concepts.push(ConceptSet { name, phrase, images });
        }

        let prompts_path = root.join("prompts.tsv");
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .from_path(&prompts_path)
            .map_err(|e| layout_err(format!("{}: {e}", prompts_path.display())))?;
        let mut prompts = BTreeMap::new();
        for row in reader.deserialize::<PromptRow>() {
            let row = row.map_err(|e| layout_err(format!("{}: {e}", prompts_path.display())))?;
            prompts.insert(row.swap_image.clone(), row);
        }

        let mut swaps = Vec::new();
        for image in sorted_entries(&root.join("swaps"))?.into_iter().filter(|p| is_png(p)) {
            let file = image.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let stem = image.file_stem().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let bbox_path = root.join("gt_bboxes").join(format!("{stem}.json"));
            if !bbox_path.exists() {
                return Err(layout_err(format!(
                    "no ground-truth bbox for {file} (expected {})",
                    bbox_path.display()
                )));
            }
            let text = fs::read_to_string(&bbox_path).map_err(|e| SwapError::io(&bbox_path, e))?;
            let gt_bbox: BBox = serde_json::from_str(&text)
                .map_err(|e| layout_err(format!("{}: {e}", bbox_path.display())))?;
            let row = prompts
                .get(&file)
                .or_else(|| prompts.get(&stem))
                .ok_or_else(|| layout_err(format!("no prompts.tsv row for {file}")))?;
            swaps.push(SwapEntry {
                stem,
                image,
                gt_bbox,
                source_prompt: row.source_prompt.clone(),
                source_concept: row.source_concept.clone(),
            });
        }
        let layout = Self { concepts, swaps };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.concepts.is_empty() {
            return Err(layout_err("no concepts"));
        }
        if self.swaps.is_empty() {
            return Err(layout_err("no swap images"));
        }
        for c in &self.concepts {
            if c.images.is_empty() {
                return Err(layout_err(format!("concept {} has no images", c.name)));
            }
            if c.phrase.trim().is_empty() {
                return Err(layout_err(format!("concept {} has an empty phrase", c.name)));
            }
        }
        for s in &self.swaps {
            if s.source_concept.trim().is_empty() || !s.source_prompt.contains(&s.source_concept) {
                return Err(layout_err(format!(
                    "{}: source concept {:?} not found in prompt {:?}",
                    s.stem, s.source_concept, s.source_prompt
                )));
            }
        }
        Ok(())
    }

    pub fn pair_count(&self) -> usize {
        self.concepts.len() * self.swaps.len()
    }
}

/// Everything a method needs for one (concept, swap image) pair.
#[derive(Debug, Clone)]
pub struct SwapJob {
    pub concept: String,
    pub swap_image: String,
    pub source: PixelImage,
    pub source_prompt: String,
    pub source_concept: String,
    pub target_prompt: String,
    pub target_concept: String,
    pub seed: u64,
}

pub trait MethodRunner: Sync {
    fn name(&self) -> &str;
    fn run(&self, job: &SwapJob) -> Result<PixelImage>;
}

/// Returns the source unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRunner;

impl MethodRunner for IdentityRunner {
    fn name(&self) -> &str {
        "identity"
    }

    fn run(&self, job: &SwapJob) -> Result<PixelImage> {
        Ok(job.source.clone())
    }
}

/// Runs the swap pipeline on a fresh backend per job.
#[derive(Debug, Clone)]
pub struct PipelineRunner {
    pub backend: BackendConfig,
    pub swap: SwapConfig,
}

impl MethodRunner for PipelineRunner {
    fn name(&self) -> &str {
        "swap"
    }

    fn run(&self, job: &SwapJob) -> Result<PixelImage> {
        let mut backend = self.backend.build()?;
        let cfg = SwapConfig {
            source_prompt: job.source_prompt.clone(),
            target_prompt: job.target_prompt.clone(),
            source_concept: job.source_concept.clone(),
            target_concept: job.target_concept.clone(),
            seed: job.seed,
            ..self.swap.clone()
        };
        let concept = ConceptSpec::new(&job.target_concept, &job.concept);
        Ok(swap(&job.source, &cfg, &concept, backend.as_mut())?.image)
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    /// Worker threads; `0` uses the rayon default.
    pub jobs: usize,
    pub channels: usize,
    pub range: PixelRange,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            jobs: 0,
            channels: 3,
            range: PixelRange::Unit,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub concept: String,
    pub swap_image: String,
    pub clip_i: Option<f64>,
    #[serde(with = "super::inf_sentinel")]
    pub psnr: f64,
    pub lpips: Option<f64>,
    pub mse: f64,
    pub ssim: f64,
    pub clip_t: Option<f64>,
    pub time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFailure {
    pub concept: String,
    pub swap_image: String,
    pub error: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub clip_i: Option<f64>,
    #[serde(with = "super::inf_sentinel")]
    pub psnr: f64,
    pub lpips: Option<f64>,
    pub mse: f64,
    pub ssim: f64,
    pub clip_t: Option<f64>,
    pub time_s: f64,
    pub failed: usize,
    pub failures: Vec<PairFailure>,
    pub per_image: Vec<ImageRow>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 { f64::NAN } else { sum / n as f64 }
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| mean(v.into_iter()))
}

impl MetricsReport {
    fn aggregate(method: &str, per_image: Vec<ImageRow>, failures: Vec<PairFailure>) -> Self {
        Self {
            method: method.to_string(),
            clip_i: mean_opt(per_image.iter().map(|r| r.clip_i)),
            psnr: mean(per_image.iter().map(|r| r.psnr)),
            lpips: mean_opt(per_image.iter().map(|r| r.lpips)),
            mse: mean(per_image.iter().map(|r| r.mse)),
            ssim: mean(per_image.iter().map(|r| r.ssim)),
            clip_t: mean_opt(per_image.iter().map(|r| r.clip_t)),
            time_s: mean(per_image.iter().map(|r| r.time_s)),
            failed: failures.len(),
            failures,
            per_image,
        }
    }

    /// Copy with every wall-clock field zeroed.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        out.time_s = 0.0;
        for r in &mut out.per_image {
            r.time_s = 0.0;
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned summary table, one row for the method.
    pub fn to_table(&self) -> String {
        fn opt(v: Option<f64>, scale: f64) -> String {
            v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", v * scale))
        }
        let psnr = if self.psnr == f64::INFINITY {
            "inf".to_string()
        } else {
            format!("{:.2}", self.psnr)
        };
        let cells = [
            opt(self.clip_i, 1.0),
            psnr,
            opt(self.lpips, 1e3),
            format!("{:.2}", self.mse * 1e4),
            format!("{:.2}", self.ssim * 1e2),
            opt(self.clip_t, 1.0),
            format!("{:.2}", self.time_s),
        ];
        let name_w = self.method.len().max("Method".len());
        let widths: Vec<usize> = REPORT_COLUMNS
            .iter()
            .zip(&cells)
            .map(|(h, c)| h.chars().count().max(c.len()))
            .collect();
        let mut out = String::new();
        let _ = write!(out, "{:<name_w$}", "Method");
        for (h, w) in REPORT_COLUMNS.iter().zip(&widths) {
            let pad = w - h.chars().count();
            let _ = write!(out, "  {}{h}", " ".repeat(pad));
        }
        out.push('\n');
        let _ = write!(out, "{:<name_w$}", self.method);
        for (c, w) in cells.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
        if self.failed > 0 {
            let _ = writeln!(out, "({} pairs failed and were excluded)", self.failed);
        }
        out
    }
}

fn run_pair(
    layout: &BenchLayout,
    concept_images: &[PixelImage],
    ci: usize,
    entry: &SwapEntry,
    runner: &dyn MethodRunner,
    scorer: Option<&dyn ImageTextScorer>,
    perceptual: Option<&dyn PerceptualMetric>,
    opts: &BenchOptions,
    seed: u64,
) -> Result<ImageRow> {
    let concept = &layout.concepts[ci];
    let source = PixelImage::load(&entry.image, opts.channels)?;
    let job = SwapJob {
        concept: concept.name.clone(),
        swap_image: entry.stem.clone(),
        target_prompt: entry.source_prompt.replacen(&entry.source_concept, &concept.phrase, 1),
        target_concept: concept.phrase.clone(),
        source_prompt: entry.source_prompt.clone(),
        source_concept: entry.source_concept.clone(),
        source,
        seed,
    };
    let start = Instant::now();
    let generated = runner.run(&job)?;
    let time_s = start.elapsed().as_secs_f64();
    let bg = masked_background_metrics(&job.source, &generated, &entry.gt_bbox, opts.range, perceptual)?;
    let (clip_i, clip_t) = match scorer {
        Some(s) => {
            let (i, t) = clip_scores(&generated, concept_images, &job.target_prompt, &entry.gt_bbox, Some(s))?;
            (Some(i), Some(t))
        }
        None => (None, None),
    };
    Ok(ImageRow {
        concept: concept.name.clone(),
        swap_image: entry.stem.clone(),
        clip_i,
        psnr: bg.psnr,
        lpips: bg.lpips,
        mse: bg.mse,
        ssim: bg.ssim,
        clip_t,
        time_s,
    })
}

/// Runs `runner` on every (concept, swap image) pair and aggregates metrics.
/// Failed pairs are logged and excluded. The report is also written to
/// `out_dir` when given.
pub fn run_benchmark(
    layout: &BenchLayout,
    runner: &dyn MethodRunner,
    scorer: Option<&dyn ImageTextScorer>,
    perceptual: Option<&dyn PerceptualMetric>,
    opts: &BenchOptions,
    out_dir: Option<&Path>,
) -> Result<MetricsReport> {
    layout.validate()?;
    if scorer.is_none() {
        log::warn!("no image-text scorer configured; CLIP scores reported as unavailable");
    }
    let concept_images: Vec<Vec<PixelImage>> = layout
        .concepts
        .iter()
        .map(|c| c.images.iter().map(|p| PixelImage::load(p, opts.channels)).collect())
        .collect::<Result<_>>()?;
    let pairs: Vec<(usize, usize)> = (0..layout.concepts.len())
        .flat_map(|c| (0..layout.swaps.len()).map(move |s| (c, s)))
        .collect();

    let work = || {
        pairs
            .par_iter()
            .enumerate()
            .map(|(k, &(ci, si))| {
                let entry = &layout.swaps[si];
                let seed = opts.seed.wrapping_add(k as u64);
                run_pair(layout, &concept_images[ci], ci, entry, runner, scorer, perceptual, opts, seed)
                    .map_err(|e| (ci, si, e))
            })
            .collect::<Vec<_>>()
    };
    let results = if opts.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| SwapError::param(format!("cannot start {} workers: {e}", opts.jobs)))?
            .install(work)
    } else {
        work()
    };

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(row) => rows.push(row),
            Err((ci, si, e)) => {
                log::error!(
                    "pair ({}, {}) failed: {e}",
                    layout.concepts[ci].name,
                    layout.swaps[si].stem
                );
                failures.push(PairFailure {
                    concept: layout.concepts[ci].name.clone(),
                    swap_image: layout.swaps[si].stem.clone(),
                    error: e.name().to_string(),
                    message: e.to_string(),
                });
            }
        }
    }
    let report = MetricsReport::aggregate(runner.name(), rows, failures);
    if let Some(dir) = out_dir {
        write_report(&report, dir)?;
    }
    Ok(report)
}

/// Writes `report.json` and `report.txt` into `dir`.
pub fn write_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SwapError::io(dir, e))?;
    let json = dir.join("report.json");
    fs::write(&json, report.to_json()?).map_err(|e| SwapError::io(&json, e))?;
    let txt = dir.join("report.txt");
    fs::write(&txt, report.to_table()).map_err(|e| SwapError::io(&txt, e))?;
    Ok(())
}
