//! Command implementations behind the `ecgkit` binary.
//!
//! Every command is reproducible under a fixed `--seed` and exits 0 on
//! success, 2 on contract/domain errors, 3 when an orchestration run ends in
//! a partial failure.

pub mod render;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ecgkit::augment::{rand_augment_with_rng, AugmentPolicy};
use ecgkit::error::{Error, Result};
use ecgkit::eval::{
    classification_metrics, compare_raters, pr_curve, pr_to_csv, pr_to_svg, roc_curve, roc_to_csv,
    roc_to_svg, Metrics, Outcome, ScoredExample,
};
use ecgkit::nn::{self, LossKind, Model, TrainConfig};
use ecgkit::orchestrate::{fan_out, plan_capacity, FailureModel, OrchestrateConfig};
use ecgkit::preprocess::{
    estimate_heart_rate, fill_empty, normalize01, remove_baseline_wander, remove_frequency,
    resample, FilterSpec,
};
use ecgkit::signalio::{extract_chunks, load_trace, save_trace, TraceFormat};
use ecgkit::timefreq::{cwt, load_grid, save_grid, to_grid_300, WaveletSpec};
use ecgkit::EcgTrace;

/// Pipeline constants shared by `preprocess`, `scalogram`, `infer` and
/// `orchestrate`; override any of them with `--config <json>`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default = "default_window")]
    pub window_s: f64,
    #[serde(default = "default_overlap")]
    pub overlap_s: f64,
    #[serde(default = "default_resample")]
    pub resample_hz: f64,
    #[serde(default = "FilterSpec::default_notch")]
    pub notch: FilterSpec,
    #[serde(default = "FilterSpec::default_baseline")]
    pub baseline: FilterSpec,
    /// Conditioning steps in application order; any of "baseline",
    /// "normalize", "notch".
    #[serde(default = "default_steps")]
    pub steps: Vec<String>,
}

fn default_window() -> f64 {
    8.0
}
fn default_overlap() -> f64 {
    1.0
}
fn default_resample() -> f64 {
    250.0
}
fn default_steps() -> Vec<String> {
    vec!["baseline".into(), "normalize".into(), "notch".into()]
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            window_s: default_window(),
            overlap_s: default_overlap(),
            resample_hz: default_resample(),
            notch: FilterSpec::default_notch(),
            baseline: FilterSpec::default_baseline(),
            steps: default_steps(),
        }
    }
}

impl PipelineConfig {
    fn load(path: Option<&PathBuf>) -> Result<PipelineConfig> {
        match path {
            None => Ok(PipelineConfig::default()),
            Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
                .map_err(|e| Error::Format(format!("{}: {e}", p.display()))),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "ecgkit", version, about = "ECG chunking, conditioning, scalograms, CNN classification and orchestration simulation")]
pub struct Cli {
    /// Seed for every stochastic step.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// JSON pipeline config overriding the built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct InputArg {
    /// Input waveform file (csv, jsonl or rawf32 with a JSON sidecar).
    #[arg(long)]
    pub input: PathBuf,
    /// Input format; inferred from the extension when omitted.
    #[arg(long)]
    pub format: Option<String>,
}

impl InputArg {
    fn load(&self) -> Result<EcgTrace> {
        let format = match &self.format {
            Some(f) => f.parse()?,
            None => TraceFormat::from_path(&self.input),
        };
        load_trace(&self.input, format)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Chunk a record and run the conditioning steps on every chunk.
    Preprocess {
        #[command(flatten)]
        input: InputArg,
        #[arg(long)]
        out_dir: PathBuf,
        /// Skip the powerline notch filter.
        #[arg(long)]
        skip_notch: bool,
        /// Skip baseline-wander removal.
        #[arg(long)]
        skip_baseline: bool,
        /// Skip 0-1 normalization.
        #[arg(long)]
        skip_normalize: bool,
    },
    /// Only extract fixed-length windows, no filtering.
    Chunk {
        #[command(flatten)]
        input: InputArg,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Apply the stochastic augmentation policy to one chunk.
    Augment {
        #[command(flatten)]
        input: InputArg,
        #[arg(long)]
        output: PathBuf,
        /// Policy JSON file; defaults to n=5 m=5 with the full pool.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        m: u8,
    },
    /// Turn chunks into normalized 300x300 scalogram grids.
    Scalogram {
        /// Chunk files (any supported waveform format).
        #[arg(long, required = true, num_args = 1..)]
        chunks: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Augment each chunk before the transform (the training path).
        #[arg(long, conflicts_with = "no_augment")]
        augment: bool,
        /// Resample only (the validation path). This is the default.
        #[arg(long)]
        no_augment: bool,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        m: u8,
    },
    /// Render one 8 s chunk as a millimeter-paper SVG snippet.
    Render {
        #[command(flatten)]
        input: InputArg,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a classifier on a labeled manifest at desk scale.
    TrainDemo {
        #[arg(long)]
        manifest: PathBuf,
        /// Architecture: M, R or tiny.
        #[arg(long, default_value = "tiny")]
        model: String,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 10)]
        batch_size: usize,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        /// Loss: cross_entropy or poly_loss.
        #[arg(long, default_value = "poly_loss")]
        loss: String,
        #[arg(long, default_value_t = 2.5)]
        epsilon: f64,
        /// Step log output (JSONL), one line per optimizer step.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score chunks or grids with a trained model.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score a gold set: ROC/AUC, Youden point, PR curve, comparison table.
    Eval {
        /// CSV with header id,score,truth.
        #[arg(long, conflicts_with = "metrics")]
        scores: Option<PathBuf>,
        /// Published metrics JSON (model + raters) to render as a table.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Simulate the fan-out/fan-in inference orchestration over one record.
    Orchestrate {
        #[command(flatten)]
        input: InputArg,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long, default_value_t = 0.0)]
        failure_rate: f64,
        #[arg(long, default_value_t = 3)]
        retry_limit: usize,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Evaluate the endpoint capacity formula.
    PlanCapacity {
        #[arg(long)]
        node_pools: u64,
        #[arg(long)]
        node_resources: f64,
        #[arg(long)]
        instance_utilisation: f64,
    },
}

// ---------------------------------------------------------------------------
// Command bodies
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct ChunkMeta {
    file: String,
    heart_rate_bpm: Option<f64>,
}

#[derive(Debug, Serialize)]
struct PreprocessMeta {
    source: String,
    sample_rate_hz: f64,
    window_s: f64,
    overlap_s: f64,
    steps_applied: Vec<String>,
    chunks: Vec<ChunkMeta>,
}

fn cmd_preprocess(
    input: &InputArg,
    out_dir: &Path,
    cfg: &PipelineConfig,
    skip_notch: bool,
    skip_baseline: bool,
    skip_normalize: bool,
) -> Result<()> {
    let trace = fill_empty(&input.load()?);
    let set = extract_chunks(&trace, cfg.window_s, cfg.overlap_s)?;
    fs::create_dir_all(out_dir)?;

    let conditioning: Vec<&str> = cfg
        .steps
        .iter()
        .map(|s| s.as_str())
        .filter(|&s| match s {
            "baseline" => !skip_baseline,
            "normalize" => !skip_normalize,
            "notch" => !skip_notch,
            other => {
                eprintln!("warning: unknown conditioning step {other:?} ignored");
                false
            }
        })
        .collect();
    let mut steps = vec!["chunk".to_string(), "fill_empty".to_string()];
    for s in &conditioning {
        steps.push(
            match *s {
                "baseline" => "remove_baseline_wander",
                "normalize" => "normalize01",
                "notch" => "remove_frequency",
                _ => unreachable!(),
            }
            .to_string(),
        );
    }
    steps.push("estimate_heart_rate".into());

    let mut chunks_meta = Vec::new();
    for (i, chunk) in set.chunks.iter().enumerate() {
        let mut conditioned = chunk.clone();
        for step in &conditioning {
            conditioned = match *step {
                "baseline" => remove_baseline_wander(&conditioned, &cfg.baseline)?,
                "normalize" => normalize01(&conditioned),
                "notch" => remove_frequency(&conditioned, &cfg.notch)?,
                _ => unreachable!(),
            };
        }
        let bpm = estimate_heart_rate(&conditioned).ok();
        let file = format!("{}.f32", set.chunk_id(i));
        save_trace(&conditioned, &out_dir.join(&file), TraceFormat::RawF32)?;
        chunks_meta.push(ChunkMeta {
            file,
            heart_rate_bpm: bpm,
        });
    }
    let meta = PreprocessMeta {
        source: input.input.display().to_string(),
        sample_rate_hz: trace.sample_rate_hz,
        window_s: cfg.window_s,
        overlap_s: cfg.overlap_s,
        steps_applied: steps,
        chunks: chunks_meta,
    };
    fs::write(
        out_dir.join("metadata.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    println!("wrote {} chunks to {}", set.len(), out_dir.display());
    Ok(())
}

fn cmd_chunk(input: &InputArg, out_dir: &Path, cfg: &PipelineConfig) -> Result<()> {
    let trace = fill_empty(&input.load()?);
    let set = extract_chunks(&trace, cfg.window_s, cfg.overlap_s)?;
    fs::create_dir_all(out_dir)?;
    for (i, chunk) in set.chunks.iter().enumerate() {
        save_trace(
            chunk,
            &out_dir.join(format!("{}.f32", set.chunk_id(i))),
            TraceFormat::RawF32,
        )?;
    }
    println!("wrote {} chunks to {}", set.len(), out_dir.display());
    Ok(())
}

fn load_policy(path: Option<&PathBuf>, n: usize, m: u8, seed: u64) -> Result<AugmentPolicy> {
    match path {
        Some(p) => {
            let policy: AugmentPolicy = serde_json::from_str(&fs::read_to_string(p)?)
                .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
            Ok(policy)
        }
        None => AugmentPolicy::new(n, m, seed),
    }
}

fn cmd_augment(
    input: &InputArg,
    output: &Path,
    policy: Option<&PathBuf>,
    n: usize,
    m: u8,
    seed: u64,
) -> Result<()> {
    let trace = fill_empty(&input.load()?);
    let policy = load_policy(policy, n, m, seed)?;
    let out = ecgkit::augment::rand_augment(&trace, &policy)?;
    save_trace(&out, output, TraceFormat::RawF32)?;
    println!("augmented {} -> {}", input.input.display(), output.display());
    Ok(())
}

fn chunk_to_grid(
    trace: &EcgTrace,
    cfg: &PipelineConfig,
    policy: Option<(&AugmentPolicy, u64)>,
) -> Result<ecgkit::timefreq::ScalogramGrid> {
    let trace = fill_empty(trace);
    let trace = if (trace.sample_rate_hz - cfg.resample_hz).abs() > 1e-9 {
        resample(&trace, cfg.resample_hz)?
    } else {
        trace
    };
    let trace = match policy {
        Some((policy, stream)) => {
            let mut rng = policy.rng_for_chunk(stream);
            rand_augment_with_rng(&trace, policy, &mut rng)?
        }
        None => trace,
    };
    let grid = cwt(&trace, &WaveletSpec::default_grid())?;
    to_grid_300(&grid)
}

fn cmd_scalogram(
    chunks: &[PathBuf],
    out_dir: &Path,
    augment: bool,
    n: usize,
    m: u8,
    seed: u64,
    cfg: &PipelineConfig,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let policy = if augment {
        Some(AugmentPolicy::new(n, m, seed)?)
    } else {
        None
    };
    for (i, path) in chunks.iter().enumerate() {
        let trace = load_trace(path, TraceFormat::from_path(path))?;
        let grid = chunk_to_grid(&trace, cfg, policy.as_ref().map(|p| (p, i as u64)))?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("chunk");
        save_grid(&grid, &out_dir.join(format!("{stem}.sgram")))?;
    }
    println!("wrote {} grids to {}", chunks.len(), out_dir.display());
    Ok(())
}

fn cmd_render(input: &InputArg, output: &Path) -> Result<()> {
    let trace = input.load()?;
    let svg = render::render_snippet(&trace)?;
    if let Some(parent) = output.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(output, svg)?;
    println!("rendered {} -> {}", input.input.display(), output.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_demo(
    manifest: &Path,
    model_name: &str,
    output: &Path,
    steps: Option<usize>,
    batch_size: usize,
    epochs: usize,
    loss: &str,
    epsilon: f64,
    log_path: Option<&PathBuf>,
    seed: u64,
) -> Result<()> {
    let graph = nn::build_model(model_name)?;
    let loss = match loss {
        "cross_entropy" | "ce" => LossKind::CrossEntropy,
        "poly_loss" | "poly" => LossKind::PolyLoss,
        other => return Err(Error::Domain(format!("unknown loss: {other}"))),
    };
    let config = TrainConfig {
        batch_size,
        epochs,
        max_steps: steps,
        loss,
        epsilon,
        seed,
        ..Default::default()
    };
    let (mut model, logs) = nn::train_demo(manifest, graph, &config)?;
    nn::save_model(&mut model, output)?;
    if let Some(p) = log_path {
        let mut text = String::new();
        for log in &logs {
            text.push_str(&serde_json::to_string(log)?);
            text.push('\n');
        }
        fs::write(p, text)?;
    }
    let last = logs.last().map(|l| l.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} for {} steps (final loss {last:.4}) -> {}",
        model_name,
        logs.len(),
        output.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct InferLine {
    file: String,
    normal: f64,
    abnormal: f64,
}

fn score_input(model: &mut Model, path: &Path, cfg: &PipelineConfig) -> Result<(f64, f64)> {
    let grid = if path.extension().and_then(|e| e.to_str()) == Some("sgram") {
        load_grid(path)?
    } else {
        let trace = load_trace(path, TraceFormat::from_path(path))?;
        chunk_to_grid(&trace, cfg, None)?
    };
    let x = nn::Tensor::from_vec(&[1, 1, grid.rows, grid.cols], grid.values.clone())?;
    let proba = model.predict_proba(&x)?;
    Ok((proba[0][0], proba[0][1]))
}

fn cmd_infer(weights: &Path, inputs: &[PathBuf], output: &Path, cfg: &PipelineConfig) -> Result<()> {
    let mut model = nn::load_model(weights)?;
    let mut lines = String::new();
    for path in inputs {
        let (normal, abnormal) = score_input(&mut model, path, cfg)?;
        lines.push_str(&serde_json::to_string(&InferLine {
            file: path.display().to_string(),
            normal,
            abnormal,
        })?);
        lines.push('\n');
    }
    fs::write(output, lines)?;
    println!("scored {} inputs -> {}", inputs.len(), output.display());
    Ok(())
}

fn parse_scores_csv(path: &Path) -> Result<Vec<ScoredExample>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("id,")) {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Format(format!("scores line {}: want id,score,truth", i + 1)));
        }
        let truth = match parts[2].trim() {
            "normal" => Outcome::Normal,
            "abnormal" => Outcome::Abnormal,
            other => return Err(Error::Format(format!("unknown truth label: {other}"))),
        };
        out.push(ScoredExample {
            id: parts[0].trim().to_string(),
            score: parts[1]
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad score: {}", parts[1])))?,
            truth,
        });
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct RaterEntry {
    name: String,
    metrics: Metrics,
}

#[derive(Debug, Deserialize)]
struct MetricsFile {
    model: Metrics,
    #[serde(default)]
    raters: Vec<RaterEntry>,
}

fn cmd_eval(scores: Option<&PathBuf>, metrics: Option<&PathBuf>, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    match (scores, metrics) {
        (Some(path), _) => {
            let examples = parse_scores_csv(path)?;
            let report = roc_curve(&examples)?;
            fs::write(out_dir.join("roc.json"), serde_json::to_string_pretty(&report)?)?;
            fs::write(out_dir.join("roc.csv"), roc_to_csv(&report))?;
            fs::write(out_dir.join("roc.svg"), roc_to_svg(&report))?;
            let pr = pr_curve(&examples)?;
            fs::write(out_dir.join("pr.csv"), pr_to_csv(&pr))?;
            fs::write(out_dir.join("pr.svg"), pr_to_svg(&pr))?;
            let at = classification_metrics(&examples, report.youden_threshold);
            let table = compare_raters(&at, &[]);
            fs::write(out_dir.join("table.txt"), &table)?;
            println!(
                "AUC {:.4}, Youden threshold {:.4} -> {}",
                report.auc,
                report.youden_threshold,
                out_dir.display()
            );
        }
        (None, Some(path)) => {
            let file: MetricsFile = serde_json::from_str(&fs::read_to_string(path)?)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            let raters: Vec<(String, Metrics)> =
                file.raters.into_iter().map(|r| (r.name, r.metrics)).collect();
            let table = compare_raters(&file.model, &raters);
            fs::write(out_dir.join("table.txt"), &table)?;
            print!("{table}");
        }
        (None, None) => {
            return Err(Error::Domain("eval needs --scores or --metrics".into()));
        }
    }
    Ok(())
}

fn cmd_orchestrate(
    input: &InputArg,
    weights: &Path,
    workers: usize,
    failure_rate: f64,
    retry_limit: usize,
    threshold: f64,
    output: &Path,
    seed: u64,
    cfg: &PipelineConfig,
) -> Result<()> {
    let trace = fill_empty(&input.load()?);
    let model = Mutex::new(nn::load_model(weights)?);
    let pipeline = cfg.clone();
    let classifier = move |chunk: &EcgTrace| -> f64 {
        let mut model = model.lock().expect("classifier lock");
        match chunk_to_grid(chunk, &pipeline, None).and_then(|grid| {
            let x = nn::Tensor::from_vec(&[1, 1, grid.rows, grid.cols], grid.values.clone())?;
            model.predict_proba(&x)
        }) {
            Ok(proba) => proba[0][1],
            Err(e) => {
                eprintln!("warning: chunk scoring failed: {e}");
                0.5
            }
        }
    };
    let config = OrchestrateConfig {
        window_s: cfg.window_s,
        overlap_s: cfg.overlap_s,
        workers,
        retry_limit,
        threshold,
        failure: FailureModel {
            rate: failure_rate,
            seed,
        },
        ..Default::default()
    };
    let result = fan_out(&trace, &classifier, &config);
    match result {
        Ok(report) => {
            fs::write(output, serde_json::to_string_pretty(&report)?)?;
            println!(
                "verdict {:?} (aggregate {:.4}) over {} chunks -> {}",
                report.verdict,
                report.aggregate_probability,
                report.per_chunk.len(),
                output.display()
            );
            Ok(())
        }
        Err(Error::PartialFailure { failed, report }) => {
            fs::write(output, serde_json::to_string_pretty(&report)?)?;
            eprintln!(
                "partial failure: chunks {failed:?} exhausted retries; partial report -> {}",
                output.display()
            );
            Err(Error::PartialFailure { failed, report })
        }
        Err(e) => Err(e),
    }
}

fn cmd_plan_capacity(pools: u64, resources: f64, utilisation: f64) -> Result<()> {
    let plan = plan_capacity(pools, resources, utilisation)?;
    println!("{}", serde_json::to_string_pretty(&plan)?);
    Ok(())
}

/// Run one parsed command line. The caller maps errors to exit codes.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = PipelineConfig::load(cli.config.as_ref())?;
    match &cli.command {
        Command::Preprocess {
            input,
            out_dir,
            skip_notch,
            skip_baseline,
            skip_normalize,
        } => cmd_preprocess(input, out_dir, &cfg, *skip_notch, *skip_baseline, *skip_normalize),
        Command::Chunk { input, out_dir } => cmd_chunk(input, out_dir, &cfg),
        Command::Augment {
            input,
            output,
            policy,
            n,
            m,
        } => cmd_augment(input, output, policy.as_ref(), *n, *m, cli.seed),
        Command::Scalogram {
            chunks,
            out_dir,
            augment,
            no_augment: _,
            n,
            m,
        } => cmd_scalogram(chunks, out_dir, *augment, *n, *m, cli.seed, &cfg),
        Command::Render { input, output } => cmd_render(input, output),
        Command::TrainDemo {
            manifest,
            model,
            output,
            steps,
            batch_size,
            epochs,
            loss,
            epsilon,
            log,
        } => cmd_train_demo(
            manifest,
            model,
            output,
            *steps,
            *batch_size,
            *epochs,
            loss,
            *epsilon,
            log.as_ref(),
            cli.seed,
        ),
        Command::Infer {
            weights,
            inputs,
            output,
        } => cmd_infer(weights, inputs, output, &cfg),
        Command::Eval {
            scores,
            metrics,
            out_dir,
        } => cmd_eval(scores.as_ref(), metrics.as_ref(), out_dir),
        Command::Orchestrate {
            input,
            weights,
            workers,
            failure_rate,
            retry_limit,
            threshold,
            output,
        } => cmd_orchestrate(
            input,
            weights,
            *workers,
            *failure_rate,
            *retry_limit,
            *threshold,
            output,
            cli.seed,
            &cfg,
        ),
        Command::PlanCapacity {
            node_pools,
            node_resources,
            instance_utilisation,
        } => cmd_plan_capacity(*node_pools, *node_resources, *instance_utilisation),
    }
}

/// Exit code contract: 0 success, 2 contract/domain errors, 3 partial failure.
pub fn exit_code_for(error: &Error) -> u8 {
    match error {
        Error::PartialFailure { .. } => 3,
        _ => 2,
    }
}
