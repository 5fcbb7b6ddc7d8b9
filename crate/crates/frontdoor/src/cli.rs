//! The `lsid` command line.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lsid_core::artifacts::{ArtifactStore, MANIFEST_FILE};
use lsid_core::backends::external::RealBackendConfig;
use lsid_core::backends::{BackendError, BackendKind, BackendSet};
use lsid_core::evalsuite::{
    ablation_csv, ablation_sweep, ablation_table, load_fixture_dir, parse_grid, planted_fixture_set,
    render_table, run_mini_quant, AblationFixture, IntervalMethod, LatencyReport, LatencySamples,
};
use lsid_core::maskops::{BinaryMask, ElementShape, RgbImage};
use lsid_core::pipeline::{run_pipeline, threshold_sweep, PipelineError, RunConfig, RunOutcome, RunRequest, Stage};
use serde::Deserialize;
use thiserror::Error;

pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const SIGNAL: i32 = 2;
    pub const BACKEND: i32 = 3;
    pub const RUNTIME: i32 = 4;
    pub const VERIFY: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Backend(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Verify(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            Self::Usage(_) => exit::USAGE,
            Self::Backend(_) => exit::BACKEND,
            Self::Runtime(_) => exit::RUNTIME,
            Self::Verify(_) => exit::VERIFY,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Input(_) | PipelineError::Config(_) => Self::Usage(e.to_string()),
            PipelineError::Backend { .. } => Self::Backend(e.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "lsid", version, about = "Phrase-steered image editing: detect, segment, inpaint, describe")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run all four stages on one image.
    Run(RunArgs),
    /// Count retained detections across a range of detection thresholds.
    Sweep(SweepArgs),
    /// Evaluation reports.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Check persisted runs against their manifests.
    Verify(VerifyArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeArg {
    Disk,
    Square,
}

impl From<ShapeArg> for ElementShape {
    fn from(s: ShapeArg) -> Self {
        match s {
            ShapeArg::Disk => ElementShape::Disk,
            ShapeArg::Square => ElementShape::Square,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendArg {
    Mock,
    Real,
}

impl From<BackendArg> for BackendKind {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Mock => BackendKind::Mock,
            BackendArg::Real => BackendKind::Real,
        }
    }
}

/// One flag per run configuration field. Unset flags fall back to the
/// config file, then to the defaults.
#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TuningFlags {
    /// Detection box score threshold.
    #[arg(long)]
    pub box_threshold: Option<f64>,
    /// Phrase-grounding threshold.
    #[arg(long)]
    pub text_threshold: Option<f64>,
    /// Inpainting guidance scale.
    #[arg(long)]
    pub guidance: Option<f64>,
    /// Inpainting sampler steps.
    #[arg(long)]
    pub steps: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Side of the square working frame.
    #[arg(long)]
    pub working_size: Option<u32>,
    /// IoU above which overlapping boxes are suppressed.
    #[arg(long)]
    pub nms_iou: Option<f64>,
    /// Open then close each box mask.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub refine: Option<bool>,
    #[arg(long)]
    pub morph_radius: Option<u32>,
    #[arg(long, value_enum)]
    pub morph_shape: Option<ShapeArg>,
    /// Mask dilation radius before inpainting.
    #[arg(long)]
    pub dilation: Option<u32>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    /// Run on CPU even when an accelerator is available.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub force_cpu: Option<bool>,
}

impl TuningFlags {
    /// Field-wise `self` over `fallback`.
    pub fn or(&self, fallback: &TuningFlags) -> TuningFlags {
        TuningFlags {
            box_threshold: self.box_threshold.or(fallback.box_threshold),
            text_threshold: self.text_threshold.or(fallback.text_threshold),
            guidance: self.guidance.or(fallback.guidance),
            steps: self.steps.or(fallback.steps),
            seed: self.seed.or(fallback.seed),
            working_size: self.working_size.or(fallback.working_size),
            nms_iou: self.nms_iou.or(fallback.nms_iou),
            refine: self.refine.or(fallback.refine),
            morph_radius: self.morph_radius.or(fallback.morph_radius),
            morph_shape: self.morph_shape.or(fallback.morph_shape),
            dilation: self.dilation.or(fallback.dilation),
            backend: self.backend.or(fallback.backend),
            force_cpu: self.force_cpu.or(fallback.force_cpu),
        }
    }

    pub fn apply(&self, mut c: RunConfig) -> RunConfig {
        if let Some(v) = self.box_threshold {
            c.tau_det = v;
        }
        if let Some(v) = self.text_threshold {
            c.tau_txt = v;
        }
        if let Some(v) = self.guidance {
            c.guidance_g = v;
        }
        if let Some(v) = self.steps {
            c.n_steps = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.working_size {
            c.working_size = v;
        }
        if let Some(v) = self.nms_iou {
            c.nms_iou = v;
        }
        if let Some(v) = self.refine {
            c.refine_masks = v;
        }
        if let Some(v) = self.morph_radius {
            c.morph_radius = v;
        }
        if let Some(v) = self.morph_shape {
            c.morph_shape = v.into();
        }
        if let Some(v) = self.dilation {
            c.inpaint_dilation = v;
        }
        if let Some(v) = self.backend {
            c.backend_set = v.into();
        }
        if let Some(v) = self.force_cpu {
            c.force_cpu = v;
        }
        c
    }

    pub fn config(&self) -> Result<RunConfig, CliError> {
        let c = self.apply(RunConfig::default());
        c.validate().map_err(CliError::from)?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct InputFlags {
    /// Input PNG image.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Phrase naming the region to edit.
    #[arg(long)]
    pub phrase: Option<String>,
    /// Edit prompt for the inpainter.
    #[arg(long)]
    pub prompt: Option<String>,
    /// Artifact store directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// TOML file whose keys mirror the flags; flags win.
    #[arg(long = "config")]
    pub config_file: Option<PathBuf>,
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    pub image: Option<PathBuf>,
    pub phrase: Option<String>,
    pub prompt: Option<String>,
    pub out: Option<PathBuf>,
    pub tuning: TuningFlags,
}

impl ConfigFile {
    /// Paths in the file resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let bad = |e: &dyn std::fmt::Display| CliError::Usage(format!("invalid config file: {e}"));
        let mut table: toml::Table = text.parse().map_err(|e| bad(&e))?;
        let mut take_str = |key: &str| -> Result<Option<String>, CliError> {
            match table.remove(key) {
                None => Ok(None),
                Some(toml::Value::String(s)) => Ok(Some(s)),
                Some(_) => Err(CliError::Usage(format!("invalid config file: {key} must be a string"))),
            }
        };
        let image = take_str("image")?.map(|p| base.join(p));
        let out = take_str("out")?.map(|p| base.join(p));
        let phrase = take_str("phrase")?;
        let prompt = take_str("prompt")?;
        let tuning = TuningFlags::deserialize(toml::Value::Table(table)).map_err(|e| bad(&e))?;
        Ok(Self {
            image,
            phrase,
            prompt,
            out,
            tuning,
        })
    }
}

/// Inputs after merging flags over the config file.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub image: Option<PathBuf>,
    pub phrase: Option<String>,
    pub prompt: Option<String>,
    pub out: Option<PathBuf>,
    pub tuning: TuningFlags,
}

impl Resolved {
    pub fn new(input: &InputFlags, tuning: &TuningFlags) -> Result<Self, CliError> {
        let file = match &input.config_file {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        Ok(Self {
            image: input.image.clone().or(file.image),
            phrase: input.phrase.clone().or(file.phrase),
            prompt: input.prompt.clone().or(file.prompt),
            out: input.out.clone().or(file.out),
            tuning: tuning.or(&file.tuning),
        })
    }

    fn need<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T, CliError> {
        v.as_ref().ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub input: InputFlags,
    #[command(flatten)]
    pub tuning: TuningFlags,
    /// Print the run result as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub input: InputFlags,
    #[command(flatten)]
    pub tuning: TuningFlags,
    #[arg(long, default_value_t = 0.25)]
    pub from: f64,
    #[arg(long, default_value_t = 0.60)]
    pub to: f64,
    #[arg(long, default_value_t = 0.05)]
    pub step: f64,
    /// Explicit thresholds; overrides the range.
    #[arg(long, value_delimiter = ',')]
    pub taus: Vec<f64>,
    /// Also write the rows as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Detection and segmentation success rate over a fixture set.
    Quant(QuantArgs),
    /// Per-stage latency breakdown.
    Latency(LatencyArgs),
    /// One run per cell of a parameter grid.
    Ablation(AblationArgs),
}

#[derive(Debug, Args)]
pub struct QuantArgs {
    /// Directory of trial subdirectories (image.png, reference.png, prompt.txt).
    #[arg(long, conflicts_with = "planted")]
    pub fixtures: Option<PathBuf>,
    /// Use the built-in planted fixture set.
    #[arg(long)]
    pub planted: bool,
    #[arg(long, default_value = "normal")]
    pub interval: IntervalMethod,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub tuning: TuningFlags,
}

#[derive(Debug, Args)]
pub struct LatencyArgs {
    /// Read stage timings from every run in this store.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Extra sample as stage=seconds; repeatable.
    #[arg(long = "sample")]
    pub samples: Vec<String>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[command(flatten)]
    pub input: InputFlags,
    #[command(flatten)]
    pub tuning: TuningFlags,
    /// Reference mask PNG for mask IoU.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Grid axis as name=v1,v2,...; repeatable.
    #[arg(long = "grid", required = true)]
    pub grid: Vec<String>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Runs to check; all runs in the store when empty.
    pub run_ids: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "mock")]
    pub backend: BackendArg,
    /// Idle minutes before a session is closed.
    #[arg(long, default_value_t = 30)]
    pub idle_minutes: u64,
}

pub type BackendFactory = std::sync::Arc<dyn Fn() -> BackendSet + Send + Sync>;

/// A fresh backend set per run. The real set reads its runner commands from
/// the environment once, here.
pub fn backend_factory(kind: BackendKind) -> Result<BackendFactory, BackendError> {
    Ok(match kind {
        BackendKind::Mock => std::sync::Arc::new(BackendSet::mock),
        BackendKind::Real => {
            let real = RealBackendConfig::from_env()?;
            std::sync::Arc::new(move || real.build())
        }
    })
}

fn factory(kind: BackendKind) -> Result<BackendFactory, CliError> {
    backend_factory(kind).map_err(|e| CliError::Backend(e.to_string()))
}

fn read_image(path: &Path) -> Result<RgbImage, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    RgbImage::from_png(&bytes).map_err(|e| CliError::Usage(format!("cannot decode {}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn open_store(path: &Path) -> Result<ArtifactStore, CliError> {
    ArtifactStore::open(path).map_err(runtime)
}

/// Run ids of every directory in the store that holds a manifest.
pub fn list_runs(store: &ArtifactStore) -> Result<Vec<String>, CliError> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(store.root()).map_err(runtime)? {
        let entry = entry.map_err(runtime)?;
        if entry.path().join(MANIFEST_FILE).is_file() {
            if let Some(name) = entry.file_name().to_str() {
                ids.push(name.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

fn cmd_run(args: &RunArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, CliError> {
    let r = Resolved::new(&args.input, &args.tuning)?;
    let image = read_image(Resolved::need(&r.image, "image")?)?;
    let phrase = Resolved::need(&r.phrase, "phrase")?;
    let prompt = Resolved::need(&r.prompt, "prompt")?;
    let root = Resolved::need(&r.out, "out")?;
    let config = r.tuning.config()?;
    let backends = factory(config.backend_set)?();
    let store = open_store(root)?;
    let result = run_pipeline(&store, backends, RunRequest::new(image, phrase.as_str(), prompt.as_str(), config))?;

    if args.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&result).map_err(runtime)?).map_err(runtime)?;
    } else {
        let run_dir = root.join(&result.run_id);
        writeln!(out, "run {}", result.run_id).map_err(runtime)?;
        for (stage, status) in &result.stages {
            writeln!(out, "  {:<9} {}", stage.name(), status).map_err(runtime)?;
        }
        let manifest = store.load_run_manifest(&result.run_id).map_err(runtime)?;
        writeln!(out, "artifacts").map_err(runtime)?;
        for e in &manifest.artifacts {
            writeln!(out, "  {}", run_dir.join(&e.path).display()).map_err(runtime)?;
        }
        writeln!(out, "manifest {}", run_dir.join(MANIFEST_FILE).display()).map_err(runtime)?;
        writeln!(out, "fingerprint {}", result.content_fingerprint).map_err(runtime)?;
    }
    Ok(match &result.outcome {
        RunOutcome::Completed => exit::OK,
        RunOutcome::Signal { stage, signal } => {
            let _ = writeln!(err, "lsid: {signal} (stage {stage})");
            exit::SIGNAL
        }
        RunOutcome::StageFailed { stage, message } => {
            let _ = writeln!(err, "lsid: stage {stage} failed: {message}");
            exit::BACKEND
        }
    })
}

/// Thresholds from `from` to `to` inclusive, rounded to kill float drift.
pub fn tau_range(from: f64, to: f64, step: f64) -> Result<Vec<f64>, CliError> {
    if !(step > 0.0) || !(to >= from) {
        return Err(CliError::Usage("need step > 0 and to >= from".into()));
    }
    let n = ((to - from) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| ((from + step * i as f64) * 1e9).round() / 1e9).collect())
}

fn cmd_sweep(args: &SweepArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let r = Resolved::new(&args.input, &args.tuning)?;
    let image = read_image(Resolved::need(&r.image, "image")?)?;
    let phrase = Resolved::need(&r.phrase, "phrase")?;
    let config = r.tuning.config()?;
    let taus = if args.taus.is_empty() {
        tau_range(args.from, args.to, args.step)?
    } else {
        args.taus.clone()
    };
    let backends = factory(config.backend_set)?();
    let rows = threshold_sweep(&image, phrase, &taus, &config, backends.detector.as_ref())?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|row| {
            let scores: Vec<String> = row.detections.iter().map(|d| format!("{:.3}", d.score())).collect();
            vec![format!("{:.2}", row.tau), row.retained.to_string(), scores.join(" ")]
        })
        .collect();
    write!(out, "{}", render_table(&["tau_det", "retained", "scores"], &table)).map_err(runtime)?;
    if let Some(path) = &args.csv {
        let mut csv = String::from("tau_det,retained\n");
        for row in &rows {
            csv.push_str(&format!("{},{}\n", row.tau, row.retained));
        }
        write_file(path, &csv)?;
    }
    Ok(exit::OK)
}

fn cmd_quant(args: &QuantArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let fixtures = match (&args.fixtures, args.planted) {
        (Some(dir), false) => load_fixture_dir(dir).map_err(|e| CliError::Usage(e.to_string()))?,
        (None, true) => planted_fixture_set(),
        _ => return Err(CliError::Usage("give --fixtures DIR or --planted".into())),
    };
    let config = args.tuning.config()?;
    let make = factory(config.backend_set)?;
    let store = open_store(&args.out)?;
    let report = run_mini_quant(&fixtures, &config, &*make, &store, args.interval).map_err(runtime)?;
    write!(out, "{}", report.to_table()).map_err(runtime)?;
    if let Some(path) = &args.csv {
        write_file(path, &report.to_csv().map_err(runtime)?)?;
    }
    Ok(exit::OK)
}

/// Parse `stage=seconds`.
pub fn parse_sample(s: &str) -> Result<(Stage, f64), CliError> {
    let bad = || CliError::Usage(format!("expected stage=seconds, got '{s}'"));
    let (stage, secs) = s.split_once('=').ok_or_else(bad)?;
    let stage: Stage = stage.trim().parse().map_err(|_| bad())?;
    let secs: f64 = secs.trim().parse().map_err(|_| bad())?;
    if !secs.is_finite() || secs < 0.0 {
        return Err(bad());
    }
    Ok((stage, secs))
}

pub fn latency_from(args: &LatencyArgs) -> Result<LatencyReport, CliError> {
    let mut samples = LatencySamples::default();
    if let Some(root) = &args.out {
        let store = open_store(root)?;
        for id in list_runs(&store)? {
            let m = store.load_run_manifest(&id).map_err(runtime)?;
            for rec in &m.stages {
                if let Some(s) = rec.seconds {
                    samples.add(rec.stage, s);
                }
            }
        }
    }
    for s in &args.samples {
        let (stage, secs) = parse_sample(s)?;
        samples.add(stage, secs);
    }
    samples.report().map_err(|e| CliError::Usage(e.to_string()))
}

fn cmd_latency(args: &LatencyArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let report = latency_from(args)?;
    write!(out, "{}", report.to_table()).map_err(runtime)?;
    if let Some(path) = &args.csv {
        write_file(path, &report.to_csv().map_err(runtime)?)?;
    }
    Ok(exit::OK)
}

/// Parse `name=v1,v2,...`.
pub fn parse_axis(s: &str) -> Result<(String, Vec<f64>), CliError> {
    let bad = || CliError::Usage(format!("expected name=v1,v2,..., got '{s}'"));
    let (name, values) = s.split_once('=').ok_or_else(bad)?;
    let values = values
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((name.trim().to_string(), values))
}

fn cmd_ablation(args: &AblationArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let r = Resolved::new(&args.input, &args.tuning)?;
    let image = read_image(Resolved::need(&r.image, "image")?)?;
    let phrase = Resolved::need(&r.phrase, "phrase")?;
    let prompt = Resolved::need(&r.prompt, "prompt")?;
    let root = Resolved::need(&r.out, "out")?;
    let base = r.tuning.config()?;
    let axes = args.grid.iter().map(|s| parse_axis(s)).collect::<Result<Vec<_>, _>>()?;
    let grid = parse_grid(&axes).map_err(|e| CliError::Usage(e.to_string()))?;
    let reference = match &args.reference {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?;
            Some(BinaryMask::from_png(&bytes).map_err(|e| CliError::Usage(e.to_string()))?)
        }
        None => None,
    };
    let make = factory(base.backend_set)?;
    let fixture = AblationFixture {
        image,
        phrase: phrase.clone(),
        edit_prompt: prompt.clone(),
        reference,
    };
    let store = open_store(root)?;
    let rows = ablation_sweep(&grid, &fixture, &base, &*make, &store).map_err(runtime)?;
    write!(out, "{}", ablation_table(&rows)).map_err(runtime)?;
    if let Some(path) = &args.csv {
        write_file(path, &ablation_csv(&rows).map_err(runtime)?)?;
    }
    Ok(exit::OK)
}

fn cmd_verify(args: &VerifyArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    if !args.out.is_dir() {
        return Err(CliError::Verify(format!("no store at {}", args.out.display())));
    }
    let store = open_store(&args.out)?;
    let ids = if args.run_ids.is_empty() { list_runs(&store)? } else { args.run_ids.clone() };
    if ids.is_empty() {
        return Err(CliError::Verify("no runs to verify".into()));
    }
    let mut failed = 0;
    for id in &ids {
        match store.verify_run(id) {
            Ok(report) => {
                write!(out, "{report}").map_err(runtime)?;
                if !report.passed {
                    failed += 1;
                }
            }
            Err(e) => {
                writeln!(out, "run {id}\nFAIL: {e}").map_err(runtime)?;
                failed += 1;
            }
        }
    }
    Ok(if failed == 0 { exit::OK } else { exit::VERIFY })
}

fn cmd_serve(args: &ServeArgs, err: &mut dyn Write) -> Result<i32, CliError> {
    let kind: BackendKind = args.backend.into();
    let make = factory(kind)?;
    let store = open_store(&args.out)?;
    let state = crate::service::AppState::new(store, kind, make)
        .with_idle_limit(Duration::from_secs(args.idle_minutes * 60));
    let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.bind)
            .await
            .map_err(|e| runtime(format!("cannot bind {}: {e}", args.bind)))?;
        let addr = listener.local_addr().map_err(runtime)?;
        let _ = writeln!(err, "listening on http://{addr}");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        crate::service::serve(listener, state, shutdown).await.map_err(runtime)
    })?;
    Ok(exit::OK)
}

pub fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, CliError> {
    match &cli.command {
        Command::Run(a) => cmd_run(a, out, err),
        Command::Sweep(a) => cmd_sweep(a, out),
        Command::Eval(EvalCommand::Quant(a)) => cmd_quant(a, out),
        Command::Eval(EvalCommand::Latency(a)) => cmd_latency(a, out),
        Command::Eval(EvalCommand::Ablation(a)) => cmd_ablation(a, out),
        Command::Verify(a) => cmd_verify(a, out),
        Command::Serve(a) => cmd_serve(a, err),
    }
}

/// Parse and execute; returns the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match execute(&cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "lsid: {e}");
            e.code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_config_field_has_a_flag() {
        let t = TuningFlags {
            box_threshold: Some(0.4),
            text_threshold: Some(0.3),
            guidance: Some(5.0),
            steps: Some(20),
            seed: Some(9),
            working_size: Some(256),
            nms_iou: Some(0.6),
            refine: Some(false),
            morph_radius: Some(2),
            morph_shape: Some(ShapeArg::Disk),
            dilation: Some(1),
            backend: Some(BackendArg::Real),
            force_cpu: Some(true),
        };
        let c = t.apply(RunConfig::default());
        let d = RunConfig::default();
        // each field moved away from its default
        let before = serde_json::to_value(&d).unwrap();
        let after = serde_json::to_value(&c).unwrap();
        for (k, v) in before.as_object().unwrap() {
            assert_ne!(after[k], *v, "{k}");
        }
    }

    #[test]
    fn flags_win_over_file() {
        let file = ConfigFile::parse(
            "image = \"in.png\"\nphrase = \"red\"\nbox-threshold = 0.3\nsteps = 10\nmorph-shape = \"disk\"\n",
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(file.image, Some(PathBuf::from("/base/in.png")));
        let flags = TuningFlags {
            box_threshold: Some(0.45),
            ..TuningFlags::default()
        };
        let merged = flags.or(&file.tuning);
        assert_eq!(merged.box_threshold, Some(0.45));
        assert_eq!(merged.steps, Some(10));
        assert_eq!(merged.morph_shape, Some(ShapeArg::Disk));
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        let err = ConfigFile::parse("box_threshold = 0.3\n", Path::new("")).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
        assert!(ConfigFile::parse("phrase = 3\n", Path::new("")).is_err());
    }

    #[test]
    fn tau_range_hits_endpoints() {
        let t = tau_range(0.25, 0.60, 0.05).unwrap();
        assert_eq!(t.len(), 8);
        assert_eq!(t[1], 0.3);
        assert_eq!(*t.last().unwrap(), 0.6);
        assert!(tau_range(0.5, 0.4, 0.05).is_err());
        assert!(tau_range(0.1, 0.4, 0.0).is_err());
    }

    #[test]
    fn sample_and_axis_parsing() {
        assert_eq!(parse_sample("inpaint=15").unwrap(), (Stage::Inpaint, 15.0));
        assert!(parse_sample("inpaint").is_err());
        assert!(parse_sample("paint=1").is_err());
        assert!(parse_sample("detect=-1").is_err());
        assert_eq!(parse_axis("tau_det=0.25, 0.5").unwrap(), ("tau_det".into(), vec![0.25, 0.5]));
        assert!(parse_axis("tau_det=x").is_err());
    }

    #[test]
    fn bare_switches_mean_true() {
        let cli = Cli::try_parse_from(["lsid", "run", "--force-cpu", "--refine", "false"]).unwrap();
        let Command::Run(a) = cli.command else { panic!() };
        assert_eq!(a.tuning.force_cpu, Some(true));
        assert_eq!(a.tuning.refine, Some(false));
    }

    #[test]
    fn usage_errors_exit_one() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(main_with(["lsid", "run", "--steps", "many"], &mut o, &mut e), exit::USAGE);
        assert_eq!(main_with(["lsid", "run", "--phrase", "x"], &mut o, &mut e), exit::USAGE);
        assert_eq!(main_with(["lsid", "--help"], &mut o, &mut e), exit::OK);
    }
}
