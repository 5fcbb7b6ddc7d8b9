//! Evaluation harness: the detect+segment mini-quant protocol, binomial
//! confidence intervals, stage latency reports and ablation grids.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifacts::ArtifactStore;
use crate::backends::fixture::{FixtureColor, FixtureRect, FixtureScene};
use crate::backends::BackendSet;
use crate::geometry::FrameSize;
use crate::maskops::{mask_iou, BinaryMask, MaskError, RgbImage};
use crate::pipeline::{run_pipeline, PipelineError, Run, RunConfig, RunOutcome, RunRequest, Stage};

pub const SUCCESS_IOU: f64 = 0.80;
pub const Z_95: f64 = 1.96;
/// Slack, in pixels, when deciding whether a box covers the reference.
pub const COVER_MARGIN: f64 = 2.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least one trial (n = 0)")]
    NoTrials,
    #[error("k = {k} exceeds n = {n}")]
    CountOutOfRange { k: u64, n: u64 },
    #[error("stage {0} has no latency samples")]
    EmptyStage(String),
    #[error("latency sample {value} for stage {stage} is not a finite non-negative number")]
    BadSample { stage: String, value: f64 },
    #[error("unknown ablation dimension '{0}' (expected tau_det, tau_txt, guidance_g, n_steps or inpaint_dilation)")]
    UnknownDimension(String),
    #[error("ablation grid is empty")]
    EmptyGrid,
    #[error("dimension {dim} has no values")]
    EmptyDimension { dim: AblationDim },
    #[error("value {value} is not valid for {dim}")]
    BadValue { dim: AblationDim, value: f64 },
    #[error("fixture {trial}: {message}")]
    Fixture { trial: String, message: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: String,
    pub prompt_word: String,
    pub covering_box: bool,
    pub mask_iou: f64,
    pub reference_mask: String,
    /// Why the trial failed before producing a mask, if it did.
    pub note: Option<String>,
}

pub fn trial_success(rec: &TrialRecord, iou_threshold: f64) -> bool {
    rec.covering_box && rec.mask_iou >= iou_threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalMethod {
    Normal,
    Wilson,
}

impl FromStr for IntervalMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(Self::Normal),
            "wilson" => Ok(Self::Wilson),
            other => Err(format!("unknown interval method '{other}' (expected normal or wilson)")),
        }
    }
}

impl fmt::Display for IntervalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Normal => "normal",
            Self::Wilson => "wilson",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub method: IntervalMethod,
    pub z: f64,
}

impl fmt::Display for IntervalEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.4} [{:.4}, {:.4}] ({}, z={})",
            self.point, self.lower, self.upper, self.method, self.z
        )
    }
}

/// Binomial proportion interval for `k` successes in `n` trials.
pub fn success_ci(k: u64, n: u64, method: IntervalMethod, z: f64) -> Result<IntervalEstimate> {
    if n == 0 {
        return Err(EvalError::NoTrials);
    }
    if k > n {
        return Err(EvalError::CountOutOfRange { k, n });
    }
    let nf = n as f64;
    let p = k as f64 / nf;
    let (lower, upper) = match method {
        IntervalMethod::Normal => {
            let half = z * (p * (1.0 - p) / nf).sqrt();
            ((p - half).max(0.0), (p + half).min(1.0))
        }
        IntervalMethod::Wilson => {
            let z2 = z * z;
            let denom = 1.0 + z2 / nf;
            let center = (p + z2 / (2.0 * nf)) / denom;
            let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
            // the endpoints at k = 0 and k = n are exactly 0 and 1; pin them
            // so rounding cannot push them outside the unit interval
            let lower = if k == 0 { 0.0 } else { center - half };
            let upper = if k == n { 1.0 } else { center + half };
            (lower, upper)
        }
    };
    Ok(IntervalEstimate {
        point: p,
        lower,
        upper,
        method,
        z,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyRow {
    pub stage: String,
    pub samples: usize,
    pub mean: f64,
    pub std: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub rows: Vec<LatencyRow>,
    /// Sum of stage means.
    pub total: f64,
}

/// Per-stage mean, sample standard deviation and share of the total mean.
/// Rows follow the order of `samples`.
pub fn latency_report<S: AsRef<str>>(samples: &[(S, Vec<f64>)]) -> Result<LatencyReport> {
    let mut rows = Vec::with_capacity(samples.len());
    for (stage, values) in samples {
        let stage = stage.as_ref().to_string();
        if values.is_empty() {
            return Err(EvalError::EmptyStage(stage));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(EvalError::BadSample { stage, value: *v });
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        rows.push(LatencyRow {
            stage,
            samples: values.len(),
            mean,
            std,
            fraction: 0.0,
        });
    }
    let total: f64 = rows.iter().map(|r| r.mean).sum();
    for r in &mut rows {
        r.fraction = if total > 0.0 { r.mean / total } else { 0.0 };
    }
    Ok(LatencyReport { rows, total })
}

/// Collects per-stage wall times across runs.
#[derive(Debug, Clone, Default)]
pub struct LatencySamples {
    by_stage: BTreeMap<Stage, Vec<f64>>,
}

impl LatencySamples {
    pub fn add(&mut self, stage: Stage, seconds: f64) {
        self.by_stage.entry(stage).or_default().push(seconds);
    }

    pub fn extend(&mut self, timings: &BTreeMap<Stage, f64>) {
        for (stage, s) in timings {
            self.add(*stage, *s);
        }
    }

    pub fn report(&self) -> Result<LatencyReport> {
        let samples: Vec<(&str, Vec<f64>)> = self
            .by_stage
            .iter()
            .map(|(s, v)| (s.name(), v.clone()))
            .collect();
        latency_report(&samples)
    }
}

impl LatencyReport {
    pub fn to_table(&self) -> String {
        let mut rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.stage.clone(),
                    r.samples.to_string(),
                    format!("{:.4}", r.mean),
                    format!("{:.4}", r.std),
                    format!("{:.1}%", r.fraction * 100.0),
                ]
            })
            .collect();
        rows.push(vec![
            "total".into(),
            String::new(),
            format!("{:.4}", self.total),
            String::new(),
            "100.0%".into(),
        ]);
        render_table(&["stage", "n", "mean_s", "std_s", "share"], &rows)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["stage", "samples", "mean_s", "std_s", "fraction"])?;
        for r in &self.rows {
            w.write_record([
                r.stage.clone(),
                r.samples.to_string(),
                r.mean.to_string(),
                r.std.to_string(),
                r.fraction.to_string(),
            ])?;
        }
        finish_csv(w)
    }
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| EvalError::Io {
        path: PathBuf::from("<csv>"),
        source: e.into_error(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Left-aligned text table with a dashed rule under the header.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        padded.join("  ").trim_end().to_string()
    };
    let mut out = line(headers.to_vec());
    out.push('\n');
    out.push_str(&line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

/// One mini-quant trial input.
#[derive(Debug, Clone)]
pub struct QuantFixture {
    pub trial_id: String,
    pub image: RgbImage,
    pub prompt_word: String,
    pub reference: BinaryMask,
    /// Where the reference came from, for the record.
    pub reference_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiniQuantReport {
    pub records: Vec<TrialRecord>,
    pub successes: u64,
    pub n: u64,
    pub rate: f64,
    pub interval: IntervalEstimate,
}

/// True when every reference pixel lies inside some box grown by
/// [`COVER_MARGIN`].
fn covers(reference: &BinaryMask, boxes: &[crate::geometry::PixelBox]) -> bool {
    let Some(fg) = reference.bounding_window() else {
        return !boxes.is_empty();
    };
    boxes.iter().any(|b| {
        let Ok(grown) = b.expanded(COVER_MARGIN) else {
            return false;
        };
        let w = grown.pixel_window();
        w.x0 <= fg.x0 && w.y0 <= fg.y0 && fg.x1 <= w.x1 && fg.y1 <= w.y1
    })
}

fn run_trial(
    fixture: &QuantFixture,
    config: &RunConfig,
    backends: BackendSet,
    store: &ArtifactStore,
) -> Result<TrialRecord, PipelineError> {
    let mut run = Run::start(
        store.clone(),
        backends,
        RunRequest::new(fixture.image.clone(), fixture.prompt_word.clone(), fixture.prompt_word.clone(), config.clone()),
    )?;
    let mut record = TrialRecord {
        trial_id: fixture.trial_id.clone(),
        prompt_word: fixture.prompt_word.clone(),
        covering_box: false,
        mask_iou: 0.0,
        reference_mask: fixture.reference_path.clone(),
        note: None,
    };
    let outcome = run.run_detect().and_then(|_| run.run_segment());
    let boxes: Vec<_> = run.state().detections_original.iter().map(|d| d.bbox.clone()).collect();
    record.covering_box = covers(&fixture.reference, &boxes);
    match outcome {
        Ok(_) => {
            let mask = run.mask_original().expect("segment succeeded");
            record.mask_iou = mask_iou(&mask, &fixture.reference).map_err(PipelineError::from)?;
        }
        Err(err) => record.note = Some(err.to_string()),
    }
    run.finalize()?;
    Ok(record)
}

/// Detect and segment every fixture; score against its reference mask.
/// A fixture whose run errors counts as a failed trial.
pub fn run_mini_quant(
    fixtures: &[QuantFixture],
    config: &RunConfig,
    make_backends: &dyn Fn() -> BackendSet,
    store: &ArtifactStore,
    method: IntervalMethod,
) -> Result<MiniQuantReport> {
    if fixtures.is_empty() {
        return Err(EvalError::NoTrials);
    }
    config.validate()?;
    let mut records = Vec::with_capacity(fixtures.len());
    for f in fixtures {
        if f.reference.frame() != f.image.frame() {
            return Err(EvalError::Fixture {
                trial: f.trial_id.clone(),
                message: format!("reference is {}, image is {}", f.reference.frame(), f.image.frame()),
            });
        }
        let record = run_trial(f, config, make_backends(), store).unwrap_or_else(|err| TrialRecord {
            trial_id: f.trial_id.clone(),
            prompt_word: f.prompt_word.clone(),
            covering_box: false,
            mask_iou: 0.0,
            reference_mask: f.reference_path.clone(),
            note: Some(err.to_string()),
        });
        records.push(record);
    }
    let n = records.len() as u64;
    let successes = records.iter().filter(|r| trial_success(r, SUCCESS_IOU)).count() as u64;
    let interval = success_ci(successes, n, method, Z_95)?;
    Ok(MiniQuantReport {
        records,
        successes,
        n,
        rate: successes as f64 / n as f64,
        interval,
    })
}

impl MiniQuantReport {
    pub fn to_table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .records
            .iter()
            .map(|r| {
                vec![
                    r.trial_id.clone(),
                    r.prompt_word.clone(),
                    if r.covering_box { "yes" } else { "no" }.into(),
                    format!("{:.4}", r.mask_iou),
                    if trial_success(r, SUCCESS_IOU) { "pass" } else { "fail" }.into(),
                ]
            })
            .collect();
        let mut out = render_table(&["trial", "prompt", "covered", "iou", "result"], &rows);
        out.push_str(&format!(
            "\nsuccess {}/{} = {:.4}; 95% CI {}\n",
            self.successes, self.n, self.rate, self.interval
        ));
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["trial_id", "prompt_word", "covering_box", "mask_iou", "success", "reference_mask", "note"])?;
        for r in &self.records {
            w.write_record([
                r.trial_id.clone(),
                r.prompt_word.clone(),
                r.covering_box.to_string(),
                r.mask_iou.to_string(),
                trial_success(r, SUCCESS_IOU).to_string(),
                r.reference_mask.clone(),
                r.note.clone().unwrap_or_default(),
            ])?;
        }
        finish_csv(w)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Load trials from `dir/<trial>/{image.png, reference.png, prompt.txt}`,
/// in directory-name order.
pub fn load_fixture_dir(dir: &Path) -> Result<Vec<QuantFixture>> {
    let mut trials: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    trials.sort();
    let mut out = Vec::with_capacity(trials.len());
    for t in trials {
        let trial_id = t.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let fixture_err = |message: String| EvalError::Fixture {
            trial: trial_id.clone(),
            message,
        };
        let read = |name: &str| {
            let p = t.join(name);
            std::fs::read(&p).map_err(io_err(&p))
        };
        let image = RgbImage::from_png(&read("image.png")?).map_err(|e| fixture_err(format!("image.png: {e}")))?;
        let reference =
            BinaryMask::from_png(&read("reference.png")?).map_err(|e| fixture_err(format!("reference.png: {e}")))?;
        let prompt = String::from_utf8(read("prompt.txt")?).map_err(|e| fixture_err(format!("prompt.txt: {e}")))?;
        let prompt_word = prompt.trim().to_string();
        if prompt_word.is_empty() {
            return Err(fixture_err("prompt.txt is empty".into()));
        }
        out.push(QuantFixture {
            reference_path: format!("{trial_id}/reference.png"),
            trial_id,
            image,
            prompt_word,
            reference,
        });
    }
    Ok(out)
}

/// Write trials in the layout [`load_fixture_dir`] reads.
pub fn write_fixture_dir(dir: &Path, fixtures: &[QuantFixture]) -> Result<()> {
    for f in fixtures {
        let t = dir.join(&f.trial_id);
        std::fs::create_dir_all(&t).map_err(io_err(&t))?;
        let write = |name: &str, bytes: &[u8]| {
            let p = t.join(name);
            std::fs::write(&p, bytes).map_err(io_err(&p))
        };
        write("image.png", &f.image.to_png()?)?;
        write("reference.png", &f.reference.to_png()?)?;
        write("prompt.txt", format!("{}\n", f.prompt_word).as_bytes())?;
    }
    Ok(())
}

fn scene_fixture(trial_id: String, scene: FixtureScene, target: usize, prompt: &str) -> QuantFixture {
    QuantFixture {
        reference_path: format!("{trial_id}/reference.png"),
        trial_id,
        image: scene.render(),
        prompt_word: prompt.to_string(),
        reference: scene.truth_mask(target),
    }
}

/// Forty synthetic trials of which exactly 35 pass under default settings.
///
/// Passing trials hold one or two well separated rectangles, sometimes
/// partly occluded. The five failures are three small targets whose area
/// score falls under 0.5 next to a larger rectangle of the same color, and
/// two prompts naming a color absent from the scene.
pub fn planted_fixture_set() -> Vec<QuantFixture> {
    use FixtureColor::*;
    let frames = [(64, 64), (96, 64), (64, 80), (80, 80), (128, 96)];
    let mut out = Vec::with_capacity(40);
    for i in 0..35u32 {
        let (w, h) = frames[i as usize % frames.len()];
        let frame = FrameSize::new(w, h).expect("static frame");
        let color = FixtureColor::ALL[i as usize % 4];
        let other = FixtureColor::ALL[(i as usize + 1) % 4];
        let x0 = 4 + (i * 3) % 12;
        let y0 = 5 + (i * 5) % 10;
        let rw = 14 + (i * 7) % 20;
        let rh = 12 + (i * 11) % 18;
        let target = FixtureRect::new(color, x0, y0, (x0 + rw).min(w - 2), (y0 + rh).min(h - 2));
        let mut scene = FixtureScene::new(frame).with(target);
        match i % 3 {
            // a distractor of another color, well apart
            0 => scene = scene.with(FixtureRect::new(other, w - 14, h - 12, w - 3, h - 3)),
            // a small occluder over one corner of the target
            1 => scene = scene.with(FixtureRect::new(other, target.x1 - 4, target.y1 - 4, target.x1, target.y1)),
            _ => {}
        }
        out.push(scene_fixture(format!("pass-{i:02}"), scene, 0, color.word()));
    }
    // small same-color targets scored below the default threshold
    for (j, (color, side)) in [(Red, 6u32), (Green, 7), (Blue, 8)].into_iter().enumerate() {
        let frame = FrameSize::new(80, 64).expect("static frame");
        let scene = FixtureScene::new(frame)
            .with(FixtureRect::new(color, 4, 4, 30, 30))
            .with(FixtureRect::new(color, 50, 40, 50 + side, 40 + side));
        out.push(scene_fixture(format!("fail-small-{j}"), scene, 1, color.word()));
    }
    // prompts naming an absent color
    for (j, (present, asked)) in [(Red, Yellow), (Blue, Green)].into_iter().enumerate() {
        let frame = FrameSize::new(64, 64).expect("static frame");
        let scene = FixtureScene::new(frame).with(FixtureRect::new(present, 10, 10, 40, 36));
        out.push(scene_fixture(format!("fail-absent-{j}"), scene, 0, asked.word()));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationDim {
    TauDet,
    TauTxt,
    GuidanceG,
    NSteps,
    InpaintDilation,
}

impl AblationDim {
    pub fn name(self) -> &'static str {
        match self {
            Self::TauDet => "tau_det",
            Self::TauTxt => "tau_txt",
            Self::GuidanceG => "guidance_g",
            Self::NSteps => "n_steps",
            Self::InpaintDilation => "inpaint_dilation",
        }
    }

    fn apply(self, config: &mut RunConfig, value: f64) -> Result<()> {
        let bad = || EvalError::BadValue { dim: self, value };
        let whole = |v: f64| v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64;
        match self {
            Self::TauDet => config.tau_det = value,
            Self::TauTxt => config.tau_txt = value,
            Self::GuidanceG => config.guidance_g = value,
            Self::NSteps if whole(value) => config.n_steps = value as u32,
            Self::InpaintDilation if whole(value) => config.inpaint_dilation = value as u32,
            _ => return Err(bad()),
        }
        config.validate().map_err(|_| bad())
    }
}

impl FromStr for AblationDim {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            Self::TauDet,
            Self::TauTxt,
            Self::GuidanceG,
            Self::NSteps,
            Self::InpaintDilation,
        ]
        .into_iter()
        .find(|d| d.name() == s)
        .ok_or_else(|| EvalError::UnknownDimension(s.to_string()))
    }
}

impl fmt::Display for AblationDim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parse `name` / `values` pairs into a validated grid.
pub fn parse_grid<S: AsRef<str>>(grid: &[(S, Vec<f64>)]) -> Result<Vec<(AblationDim, Vec<f64>)>> {
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    grid.iter()
        .map(|(name, values)| {
            let dim: AblationDim = name.as_ref().parse()?;
            if values.is_empty() {
                return Err(EvalError::EmptyDimension { dim });
            }
            Ok((dim, values.clone()))
        })
        .collect()
}

/// The scene an ablation grid is run on.
#[derive(Debug, Clone)]
pub struct AblationFixture {
    pub image: RgbImage,
    pub phrase: String,
    pub edit_prompt: String,
    pub reference: Option<BinaryMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub cell: Vec<(AblationDim, f64)>,
    pub config: RunConfig,
    pub run_id: String,
    pub outcome: RunOutcome,
    pub retained: usize,
    pub mask_pixels: usize,
    pub mask_iou: Option<f64>,
    pub timings: BTreeMap<Stage, f64>,
}

fn cells(grid: &[(AblationDim, Vec<f64>)]) -> Vec<Vec<(AblationDim, f64)>> {
    let mut out: Vec<Vec<(AblationDim, f64)>> = vec![Vec::new()];
    for (dim, values) in grid {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push((*dim, *v));
                    c
                })
            })
            .collect();
    }
    out
}

/// One full pipeline run per cell of the Cartesian product, in row-major
/// order of `grid`.
pub fn ablation_sweep(
    grid: &[(AblationDim, Vec<f64>)],
    fixture: &AblationFixture,
    base: &RunConfig,
    make_backends: &dyn Fn() -> BackendSet,
    store: &ArtifactStore,
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    if let Some((dim, _)) = grid.iter().find(|(_, v)| v.is_empty()) {
        return Err(EvalError::EmptyDimension { dim: *dim });
    }
    let cells = cells(grid);
    // validate every cell before spending time on any
    let configs = cells
        .iter()
        .map(|cell| {
            let mut c = base.clone();
            for (dim, v) in cell {
                dim.apply(&mut c, *v)?;
            }
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(cells.len());
    for (cell, config) in cells.into_iter().zip(configs) {
        let result = run_pipeline(
            store,
            make_backends(),
            RunRequest::new(
                fixture.image.clone(),
                fixture.phrase.clone(),
                fixture.edit_prompt.clone(),
                config.clone(),
            ),
        )?;
        let manifest = store.load_run_manifest(&result.run_id).map_err(PipelineError::from)?;
        let mask = match manifest.latest(crate::artifacts::ArtifactKind::Mask) {
            Some(entry) => {
                let bytes = store.read(&result.run_id, &entry.path).map_err(PipelineError::from)?;
                Some(BinaryMask::from_png(&bytes)?)
            }
            None => None,
        };
        let mask_iou = match (&fixture.reference, &mask) {
            (Some(r), Some(m)) => Some(mask_iou(m, r)?),
            (Some(_), None) => Some(0.0),
            _ => None,
        };
        rows.push(AblationRow {
            cell,
            config,
            run_id: result.run_id,
            outcome: result.outcome,
            retained: manifest.retained_detections.unwrap_or(0),
            mask_pixels: mask.map(|m| m.count()).unwrap_or(0),
            mask_iou,
            timings: result.timings,
        });
    }
    Ok(rows)
}

fn outcome_label(o: &RunOutcome) -> String {
    match o {
        RunOutcome::Completed => "completed".into(),
        RunOutcome::Signal { signal, .. } => signal.to_string(),
        RunOutcome::StageFailed { stage, .. } => format!("{stage} failed"),
    }
}

fn ablation_cells(rows: &[AblationRow]) -> (Vec<String>, Vec<Vec<String>>) {
    let dims: Vec<String> = rows
        .first()
        .map(|r| r.cell.iter().map(|(d, _)| d.name().to_string()).collect())
        .unwrap_or_default();
    let mut headers = dims;
    headers.extend(
        ["outcome", "retained", "mask_px", "mask_iou", "detect_s", "segment_s", "inpaint_s", "describe_s"]
            .map(String::from),
    );
    let body = rows
        .iter()
        .map(|r| {
            let mut cells: Vec<String> = r.cell.iter().map(|(_, v)| v.to_string()).collect();
            cells.push(outcome_label(&r.outcome));
            cells.push(r.retained.to_string());
            cells.push(r.mask_pixels.to_string());
            cells.push(r.mask_iou.map(|v| format!("{v:.4}")).unwrap_or_default());
            for s in Stage::ALL {
                cells.push(r.timings.get(&s).map(|t| format!("{t:.4}")).unwrap_or_default());
            }
            cells
        })
        .collect();
    (headers, body)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let (headers, body) = ablation_cells(rows);
    let h: Vec<&str> = headers.iter().map(String::as_str).collect();
    render_table(&h, &body)
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let (headers, body) = ablation_cells(rows);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&headers)?;
    for row in body {
        w.write_record(&row)?;
    }
    finish_csv(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(covered: bool, iou: f64) -> TrialRecord {
        TrialRecord {
            trial_id: "t".into(),
            prompt_word: "red".into(),
            covering_box: covered,
            mask_iou: iou,
            reference_mask: "t/reference.png".into(),
            note: None,
        }
    }

    #[test]
    fn success_rule() {
        assert!(trial_success(&rec(true, 0.85), SUCCESS_IOU));
        assert!(!trial_success(&rec(true, 0.79), SUCCESS_IOU));
        assert!(!trial_success(&rec(false, 0.95), SUCCESS_IOU));
        assert!(trial_success(&rec(true, 0.80), SUCCESS_IOU));
    }

    #[test]
    fn normal_interval_values() {
        let ci = success_ci(35, 40, IntervalMethod::Normal, Z_95).unwrap();
        assert_eq!(ci.point, 0.875);
        assert!((ci.lower - 0.7725).abs() < 1e-4, "{ci}");
        assert!((ci.upper - 0.9775).abs() < 1e-4, "{ci}");
        let full = success_ci(40, 40, IntervalMethod::Normal, Z_95).unwrap();
        assert_eq!((full.lower, full.upper), (1.0, 1.0));
        assert!(matches!(success_ci(0, 0, IntervalMethod::Normal, Z_95), Err(EvalError::NoTrials)));
        assert!(success_ci(5, 4, IntervalMethod::Wilson, Z_95).is_err());
    }

    #[test]
    fn wilson_stays_inside_unit_interval() {
        for n in 1..=30u64 {
            for k in 0..=n {
                let ci = success_ci(k, n, IntervalMethod::Wilson, Z_95).unwrap();
                assert!(0.0 <= ci.lower && ci.lower <= ci.point + 1e-15 && ci.point <= ci.upper + 1e-15 && ci.upper <= 1.0 + 1e-15);
            }
        }
    }

    #[test]
    fn latency_rules() {
        let r = latency_report(&[("a", vec![2.0]), ("b", vec![1.0, 3.0])]).unwrap();
        assert_eq!(r.rows[0].std, 0.0);
        assert!((r.rows[1].std - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.total, 4.0);
        assert!(matches!(latency_report(&[("a", vec![])]), Err(EvalError::EmptyStage(_))));
        assert!(r.to_table().contains("total"));
        assert!(r.to_csv().unwrap().starts_with("stage,samples,mean_s,std_s,fraction\n"));
    }

    #[test]
    fn grid_cells_are_a_product() {
        let grid = parse_grid(&[("tau_det", vec![0.3, 0.5]), ("n_steps", vec![20.0, 50.0, 30.0])]).unwrap();
        let c = cells(&grid);
        assert_eq!(c.len(), 6);
        assert_eq!(c[0], vec![(AblationDim::TauDet, 0.3), (AblationDim::NSteps, 20.0)]);
        assert!(matches!(
            parse_grid(&[("nms_iou", vec![0.5])]),
            Err(EvalError::UnknownDimension(_))
        ));
        let mut cfg = RunConfig::default();
        assert!(AblationDim::NSteps.apply(&mut cfg, 2.5).is_err());
        assert!(AblationDim::TauDet.apply(&mut cfg, 1.5).is_err());
    }

    #[test]
    fn planted_set_shape() {
        let set = planted_fixture_set();
        assert_eq!(set.len(), 40);
        let mut ids: Vec<_> = set.iter().map(|f| f.trial_id.clone()).collect();
        ids.dedup();
        assert_eq!(ids.len(), 40);
        assert!(set.iter().all(|f| f.reference.frame() == f.image.frame() && !f.reference.is_empty()));
    }

    #[test]
    fn planted_set_yields_35_of_40() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        let report = run_mini_quant(
            &planted_fixture_set(),
            &RunConfig::default(),
            &BackendSet::mock,
            &store,
            IntervalMethod::Normal,
        )
        .unwrap();
        let failed: Vec<_> = report
            .records
            .iter()
            .filter(|r| !trial_success(r, SUCCESS_IOU))
            .map(|r| r.trial_id.as_str())
            .collect();
        assert_eq!(failed, ["fail-small-0", "fail-small-1", "fail-small-2", "fail-absent-0", "fail-absent-1"]);
        assert_eq!(report.rate, 0.875);
    }

    #[test]
    fn table_alignment() {
        let t = render_table(&["a", "bb"], &[vec!["xyz".into(), "1".into()]]);
        assert_eq!(t, "a    bb\n---  --\nxyz  1\n");
    }
}
