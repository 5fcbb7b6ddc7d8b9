//! The orchestrator: detect, segment, inpaint and describe as resumable,
//! gated stages that persist their artifacts as they go.
//!
//! A [`Run`] owns one [`RunState`], one [`BackendSet`] and a handle on the
//! artifact store. Stage methods may be called directly (interactive use)
//! or driven in order by [`run_pipeline`] (batch use); both go through the
//! same code.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifacts::{
    ArtifactError, ArtifactKind, ArtifactStore, FrameRecord, GateEvent, RunManifest, StageRecord, MANIFEST_FILE,
    MANIFEST_SCHEMA,
};
use crate::backends::{
    resolve_execution_policy, BackendError, BackendKind, BackendSet, Detector, Device, ExecutionPolicy,
    InpaintRequest,
};
use crate::geometry::{
    filter_by_score, make_scale_map, map_detection, nms, Detection, DetectionsDocument, FrameSize, GeometryError,
    ScaleMap,
};
use crate::maskops::{
    annotate_detections, before_after, compose_or, dilate_for_inpaint, refine, render_overlay, resize_image_nearest,
    resize_nearest, AnnotationStyle, BinaryMask, ElementShape, MaskError, RgbImage, StructuringElement,
    DEFAULT_OVERLAY_ALPHA, OVERLAY_RED,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Detect,
    Segment,
    Inpaint,
    Describe,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Self::Detect, Self::Segment, Self::Inpaint, Self::Describe];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Detect => "detect",
            Self::Segment => "segment",
            Self::Inpaint => "inpaint",
            Self::Describe => "describe",
        }
    }

    pub fn predecessor(self) -> Option<Stage> {
        self.index().checked_sub(1).map(|i| Self::ALL[i])
    }

    pub fn later(self) -> &'static [Stage] {
        &Self::ALL[self.index() + 1..]
    }

    pub fn artifact_kinds(self) -> &'static [ArtifactKind] {
        match self {
            Self::Detect => &[ArtifactKind::Detections, ArtifactKind::Annotated],
            Self::Segment => &[ArtifactKind::Mask, ArtifactKind::Overlay],
            Self::Inpaint => &[ArtifactKind::Edited, ArtifactKind::Composite],
            Self::Describe => &[ArtifactKind::Description],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Pending,
    Succeeded,
    Failed,
    Skipped,
}

impl fmt::Display for StageStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pending => "pending",
            Self::Succeeded => "succeeded",
            Self::Failed => "failed",
            Self::Skipped => "skipped",
        })
    }
}

/// A human review decision on a stage's latest output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateDecision {
    Accepted,
    Rejected,
}

/// Typed, non-exceptional pipeline outcomes that stop a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Signal {
    NoDetections,
    EmptyMask,
}

impl Signal {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::NoDetections => "no-detections",
            Self::EmptyMask => "empty-mask",
        }
    }
}

impl fmt::Display for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage {stage} requires {requires} to have succeeded (and not been rejected)")]
    Ordering { stage: Stage, requires: Stage },
    #[error("stage {stage} cannot change while {blocking} is live; reject {blocking} first")]
    DownstreamLive { stage: Stage, blocking: Stage },
    #[error("stage {stage} has no output to {action}")]
    NothingToReview { stage: Stage, action: &'static str },
    #[error("run {0} is finalized")]
    Finalized(String),
    #[error("{stage}: {signal}")]
    Signal { stage: Stage, signal: Signal },
    #[error("{stage} failed: {source}")]
    Backend {
        stage: Stage,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Every tunable of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub tau_det: f64,
    pub tau_txt: f64,
    pub guidance_g: f64,
    pub n_steps: u32,
    pub seed: u64,
    pub working_size: u32,
    pub nms_iou: f64,
    pub refine_masks: bool,
    pub morph_radius: u32,
    pub morph_shape: ElementShape,
    pub inpaint_dilation: u32,
    pub backend_set: BackendKind,
    pub force_cpu: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tau_det: 0.50,
            tau_txt: 0.35,
            guidance_g: 7.5,
            n_steps: 50,
            seed: 0,
            working_size: 512,
            nms_iou: 0.50,
            refine_masks: true,
            morph_radius: 1,
            morph_shape: ElementShape::Square,
            inpaint_dilation: 3,
            backend_set: BackendKind::Mock,
            force_cpu: false,
        }
    }
}

fn unit_interval(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(PipelineError::Config(format!("{name} must be in [0, 1], got {v}")))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        unit_interval("tau_det", self.tau_det)?;
        unit_interval("tau_txt", self.tau_txt)?;
        unit_interval("nms_iou", self.nms_iou)?;
        if !(self.guidance_g.is_finite() && self.guidance_g > 0.0) {
            return Err(PipelineError::Config(format!(
                "guidance_g must be positive, got {}",
                self.guidance_g
            )));
        }
        if self.n_steps < 1 {
            return Err(PipelineError::Config("n_steps must be at least 1".into()));
        }
        if self.working_size < 16 {
            return Err(PipelineError::Config(format!(
                "working_size must be at least 16, got {}",
                self.working_size
            )));
        }
        Ok(())
    }

    pub fn refinement_element(&self) -> StructuringElement {
        StructuringElement {
            shape: self.morph_shape,
            radius: self.morph_radius,
        }
    }

    /// Apply a patch and validate the result, leaving `self` untouched on error.
    pub fn patched(&self, patch: &ConfigPatch) -> Result<RunConfig> {
        let mut c = self.clone();
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = patch.$f.clone() { c.$f = v; } )* };
        }
        take!(
            tau_det,
            tau_txt,
            guidance_g,
            n_steps,
            seed,
            working_size,
            nms_iou,
            refine_masks,
            morph_radius,
            morph_shape,
            inpaint_dilation,
            backend_set,
            force_cpu
        );
        c.validate()?;
        Ok(c)
    }
}

/// A partial configuration update. Absent fields keep their value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigPatch {
    pub tau_det: Option<f64>,
    pub tau_txt: Option<f64>,
    pub guidance_g: Option<f64>,
    pub n_steps: Option<u32>,
    pub seed: Option<u64>,
    pub working_size: Option<u32>,
    pub nms_iou: Option<f64>,
    pub refine_masks: Option<bool>,
    pub morph_radius: Option<u32>,
    pub morph_shape: Option<ElementShape>,
    pub inpaint_dilation: Option<u32>,
    pub backend_set: Option<BackendKind>,
    pub force_cpu: Option<bool>,
}

impl ConfigPatch {
    /// Stage whose output depends on each set field. `None` marks fields
    /// fixed at run start.
    fn touched(&self) -> Vec<(&'static str, Option<Stage>)> {
        let mut out = Vec::new();
        let mut mark = |set: bool, name: &'static str, stage: Option<Stage>| {
            if set {
                out.push((name, stage));
            }
        };
        mark(self.tau_det.is_some(), "tau_det", Some(Stage::Detect));
        mark(self.tau_txt.is_some(), "tau_txt", Some(Stage::Detect));
        mark(self.nms_iou.is_some(), "nms_iou", Some(Stage::Detect));
        mark(self.refine_masks.is_some(), "refine_masks", Some(Stage::Segment));
        mark(self.morph_radius.is_some(), "morph_radius", Some(Stage::Segment));
        mark(self.morph_shape.is_some(), "morph_shape", Some(Stage::Segment));
        mark(self.guidance_g.is_some(), "guidance_g", Some(Stage::Inpaint));
        mark(self.n_steps.is_some(), "n_steps", Some(Stage::Inpaint));
        mark(self.seed.is_some(), "seed", Some(Stage::Inpaint));
        mark(self.inpaint_dilation.is_some(), "inpaint_dilation", Some(Stage::Inpaint));
        mark(self.working_size.is_some(), "working_size", None);
        mark(self.backend_set.is_some(), "backend_set", None);
        mark(self.force_cpu.is_some(), "force_cpu", None);
        out
    }
}

/// Everything a run knows. Single owner; stages execute sequentially.
#[derive(Debug, Clone)]
pub struct RunState {
    pub run_id: String,
    pub phrase: String,
    pub edit_prompt: String,
    pub config: RunConfig,
    pub policy: ExecutionPolicy,
    pub original: RgbImage,
    pub working: RgbImage,
    pub to_original: ScaleMap,
    pub to_working: ScaleMap,
    /// Retained detections in the working frame.
    pub detections: Vec<Detection>,
    /// The same detections mapped to the original frame.
    pub detections_original: Vec<Detection>,
    pub no_detections: bool,
    /// Per-box selected masks, working frame.
    pub box_masks: Vec<BinaryMask>,
    /// Composite mask, working frame.
    pub composite: Option<BinaryMask>,
    pub edited: Option<RgbImage>,
    pub description: Option<String>,
    attempts: [u32; 4],
    pub manifest: RunManifest,
}

impl RunState {
    pub fn status(&self, stage: Stage) -> StageStatus {
        self.manifest.stage(stage).status
    }

    pub fn gate(&self, stage: Stage) -> Option<GateDecision> {
        self.manifest.stage(stage).gate
    }

    /// Has run (successfully or not) and its output has not been rejected.
    pub fn is_live(&self, stage: Stage) -> bool {
        matches!(self.status(stage), StageStatus::Succeeded | StageStatus::Failed)
            && self.gate(stage) != Some(GateDecision::Rejected)
    }

    pub fn stage_statuses(&self) -> Vec<(Stage, StageStatus)> {
        Stage::ALL.iter().map(|s| (*s, self.status(*s))).collect()
    }

    /// Check whether `stage` may execute now.
    pub fn check_runnable(&self, stage: Stage) -> Result<()> {
        if self.manifest.is_finalized() {
            return Err(PipelineError::Finalized(self.run_id.clone()));
        }
        if let Some(prev) = stage.predecessor() {
            if self.status(prev) != StageStatus::Succeeded || self.gate(prev) == Some(GateDecision::Rejected) {
                return Err(PipelineError::Ordering { stage, requires: prev });
            }
        }
        if let Some(blocking) = stage.later().iter().copied().find(|s| self.is_live(*s)) {
            return Err(PipelineError::DownstreamLive { stage, blocking });
        }
        if stage == Stage::Segment && self.no_detections {
            return Err(PipelineError::Signal {
                stage,
                signal: Signal::NoDetections,
            });
        }
        Ok(())
    }

    /// Stages that [`check_runnable`](Self::check_runnable) would accept.
    pub fn runnable_stages(&self) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|s| self.check_runnable(*s).is_ok())
            .collect()
    }

    fn record_mut(&mut self, stage: Stage) -> &mut StageRecord {
        &mut self.manifest.stages[stage.index()]
    }

    /// Drop in-memory products of `stage` and everything after it.
    fn clear_from(&mut self, stage: Stage) {
        for s in Stage::ALL.into_iter().filter(|s| *s >= stage) {
            match s {
                Stage::Detect => {
                    self.detections.clear();
                    self.detections_original.clear();
                    self.no_detections = false;
                }
                Stage::Segment => {
                    self.box_masks.clear();
                    self.composite = None;
                }
                Stage::Inpaint => self.edited = None,
                Stage::Describe => self.description = None,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunOutcome {
    Completed,
    Signal { stage: Stage, signal: Signal },
    StageFailed { stage: Stage, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub run_id: String,
    pub outcome: RunOutcome,
    pub stages: Vec<(Stage, StageStatus)>,
    /// Run-relative paths.
    pub edited: Option<String>,
    pub description: Option<String>,
    pub manifest: String,
    pub content_fingerprint: String,
    pub timings: BTreeMap<Stage, f64>,
}

/// Inputs to a new run.
#[derive(Debug, Clone)]
pub struct RunRequest {
    pub image: RgbImage,
    pub phrase: String,
    pub edit_prompt: String,
    pub config: RunConfig,
    /// Generated when absent.
    pub run_id: Option<String>,
}

impl RunRequest {
    pub fn new(image: RgbImage, phrase: impl Into<String>, edit_prompt: impl Into<String>, config: RunConfig) -> Self {
        Self {
            image,
            phrase: phrase.into(),
            edit_prompt: edit_prompt.into(),
            config,
            run_id: None,
        }
    }
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn new_run_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}

fn environment_snapshot() -> BTreeMap<String, String> {
    BTreeMap::from([("lsid-core".to_string(), env!("CARGO_PKG_VERSION").to_string())])
}

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Share of edit-prompt tokens that also occur in the description,
/// case-insensitively. `None` for a prompt without tokens.
pub fn token_overlap(description: &str, edit_prompt: &str) -> Option<f64> {
    let prompt = tokens(edit_prompt);
    if prompt.is_empty() {
        return None;
    }
    let desc: std::collections::HashSet<String> = tokens(description).into_iter().collect();
    let hits = prompt.iter().filter(|t| desc.contains(*t)).count();
    Some(hits as f64 / prompt.len() as f64)
}

/// Working copy and scale maps for an image.
pub fn working_copy(image: &RgbImage, working_size: u32) -> Result<(RgbImage, ScaleMap)> {
    let frame = FrameSize::square(working_size)?;
    let working = resize_image_nearest(image, frame);
    Ok((working, make_scale_map(frame, image.frame())))
}

/// Detect on the working image, filter, suppress. Returns working-frame
/// detections.
fn detect_retained(detector: &dyn Detector, working: &RgbImage, phrase: &str, config: &RunConfig) -> Result<Vec<Detection>> {
    let raw = detector
        .detect(working, phrase, config.tau_det, config.tau_txt)
        .map_err(|source| PipelineError::Backend {
            stage: Stage::Detect,
            source,
        })?;
    check_detections(&raw, working.frame())?;
    Ok(nms(&filter_by_score(&raw, config.tau_det), config.nms_iou)?)
}

fn check_detections(dets: &[Detection], frame: FrameSize) -> Result<()> {
    if let Some(d) = dets.iter().find(|d| d.frame() != frame) {
        return Err(PipelineError::Backend {
            stage: Stage::Detect,
            source: BackendError::Contract(format!("detection in frame {} for a {} image", d.frame(), frame)),
        });
    }
    Ok(())
}

/// One run in progress.
pub struct Run {
    store: ArtifactStore,
    backends: BackendSet,
    state: RunState,
}

impl fmt::Debug for Run {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Run")
            .field("run_id", &self.state.run_id)
            .field("stages", &self.state.stage_statuses())
            .finish()
    }
}

impl Run {
    /// Validate inputs, build the working copy and scale maps, create the
    /// run directory and write the initial manifest.
    pub fn start(store: ArtifactStore, backends: BackendSet, request: RunRequest) -> Result<Run> {
        let RunRequest {
            image,
            phrase,
            edit_prompt,
            config,
            run_id,
        } = request;
        if phrase.trim().is_empty() {
            return Err(PipelineError::Input("grounding phrase is empty".into()));
        }
        if edit_prompt.trim().is_empty() {
            return Err(PipelineError::Input("edit prompt is empty".into()));
        }
        config.validate()?;
        let (working, to_original) = working_copy(&image, config.working_size)?;
        let to_working = to_original.inverse();
        let (policy, notice) = resolve_execution_policy(backends.accelerator_available, config.force_cpu);

        let run_id = run_id.unwrap_or_else(new_run_id);
        store.create_run(&run_id)?;
        let mut manifest = RunManifest {
            schema: MANIFEST_SCHEMA.to_string(),
            run_id: run_id.clone(),
            created_at: now_rfc3339(),
            finalized_at: None,
            phrase: phrase.clone(),
            edit_prompt: edit_prompt.clone(),
            seed: config.seed,
            config: config.clone(),
            backends: backends.identities(),
            execution: policy,
            notices: notice.into_iter().collect(),
            frames: FrameRecord {
                original: image.frame(),
                working: working.frame(),
            },
            stages: Stage::ALL.iter().map(|s| StageRecord::pending(*s)).collect(),
            artifacts: Vec::new(),
            retained_detections: None,
            signal: None,
            semantic_overlap: None,
            gates: Vec::new(),
            environment: environment_snapshot(),
            content_fingerprint: String::new(),
        };
        manifest.refresh_fingerprint();
        store.write_manifest(&manifest)?;
        log::info!("run {run_id}: started ({} -> {})", image.frame(), working.frame());

        Ok(Run {
            store,
            backends,
            state: RunState {
                run_id,
                phrase,
                edit_prompt,
                config,
                policy,
                original: image,
                working,
                to_original,
                to_working,
                detections: Vec::new(),
                detections_original: Vec::new(),
                no_detections: false,
                box_masks: Vec::new(),
                composite: None,
                edited: None,
                description: None,
                attempts: [0; 4],
                manifest,
            },
        })
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn run_id(&self) -> &str {
        &self.state.run_id
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.state.manifest
    }

    pub fn store(&self) -> &ArtifactStore {
        &self.store
    }

    pub fn backends(&self) -> &BackendSet {
        &self.backends
    }

    fn save_manifest(&mut self) -> Result<()> {
        self.state.manifest.refresh_fingerprint();
        self.store.write_manifest(&self.state.manifest)?;
        Ok(())
    }

    /// Gate checks, revision bump and downstream reset shared by every stage.
    fn begin(&mut self, stage: Stage) -> Result<u32> {
        self.state.check_runnable(stage)?;
        let revision = self.state.attempts[stage.index()];
        self.state.attempts[stage.index()] += 1;
        self.state.clear_from(stage);
        for s in Stage::ALL.into_iter().filter(|s| *s >= stage) {
            let keep_revision = self.state.manifest.stage(s).revision;
            *self.state.record_mut(s) = StageRecord {
                revision: keep_revision,
                ..StageRecord::pending(s)
            };
        }
        self.state.record_mut(stage).revision = revision;
        if stage <= Stage::Segment {
            self.state.manifest.signal = None;
        }
        if stage == Stage::Detect {
            self.state.manifest.retained_detections = None;
        }
        self.state.manifest.semantic_overlap = None;
        Ok(revision)
    }

    fn persist(&mut self, kind: ArtifactKind, revision: u32, bytes: &[u8]) -> Result<()> {
        let entry = self.store.persist_revision(&self.state.run_id, kind, revision, bytes)?;
        self.state.manifest.artifacts.push(entry);
        Ok(())
    }

    /// Record the stage outcome in the manifest and hand the result back.
    fn finish<T>(&mut self, stage: Stage, started: Instant, result: Result<T>) -> Result<T> {
        let seconds = started.elapsed().as_secs_f64();
        let record = self.state.record_mut(stage);
        record.seconds = Some(seconds);
        match &result {
            Ok(_) => {
                record.status = StageStatus::Succeeded;
                record.message = None;
            }
            Err(err) => {
                record.status = StageStatus::Failed;
                record.message = Some(err.to_string());
                if let PipelineError::Signal { signal, .. } = err {
                    self.state.manifest.signal = Some(signal.as_str().to_string());
                }
                log::warn!("run {}: {stage} failed: {err}", self.state.run_id);
            }
        }
        self.save_manifest()?;
        result
    }

    /// Stage 1. An empty retained set still succeeds but sets the
    /// no-detections flag, which blocks segmentation.
    pub fn run_detect(&mut self) -> Result<usize> {
        let revision = self.begin(Stage::Detect)?;
        let started = Instant::now();
        let result = self.detect_inner(revision);
        self.finish(Stage::Detect, started, result)
    }

    fn detect_inner(&mut self, revision: u32) -> Result<usize> {
        let st = &self.state;
        let retained = detect_retained(self.backends.detector.as_ref(), &st.working, &st.phrase, &st.config)?;
        let original: Vec<Detection> = retained
            .iter()
            .map(|d| map_detection(d, &st.to_original))
            .collect::<Result<_, _>>()?;
        let doc = DetectionsDocument::from_detections(&st.phrase, st.original.frame(), &original);
        let annotated = annotate_detections(&st.original, &original, AnnotationStyle::default())?;
        let annotated_png = annotated.to_png()?;
        self.persist(ArtifactKind::Detections, revision, &doc.to_json_bytes())?;
        self.persist(ArtifactKind::Annotated, revision, &annotated_png)?;

        let count = retained.len();
        self.state.no_detections = count == 0;
        self.state.detections = retained;
        self.state.detections_original = original;
        self.state.manifest.retained_detections = Some(count);
        if count == 0 {
            self.state.manifest.signal = Some(Signal::NoDetections.as_str().to_string());
        }
        log::info!("run {}: detect retained {count}", self.state.run_id);
        Ok(count)
    }

    /// Stage 2. Returns the composite mask's pixel count (working frame).
    pub fn run_segment(&mut self) -> Result<usize> {
        let revision = self.begin(Stage::Segment)?;
        let started = Instant::now();
        let result = self.segment_inner(revision);
        self.finish(Stage::Segment, started, result)
    }

    fn segment_inner(&mut self, revision: u32) -> Result<usize> {
        let st = &self.state;
        let backend = |source| PipelineError::Backend {
            stage: Stage::Segment,
            source,
        };
        let mut selected = Vec::with_capacity(st.detections.len());
        for det in &st.detections {
            let candidates = self.backends.segmenter.segment(&st.working, &det.bbox).map_err(backend)?;
            if let Some(c) = candidates.iter().find(|c| c.mask.frame() != st.working.frame()) {
                return Err(backend(BackendError::Contract(format!(
                    "mask in frame {} for a {} image",
                    c.mask.frame(),
                    st.working.frame()
                ))));
            }
            let best = crate::backends::select_best_mask(&candidates, &det.bbox)
                .map_err(|e| backend(BackendError::Contract(e.to_string())))?;
            selected.push(best);
        }
        let mut composite = compose_or(&selected)?;
        if st.config.refine_masks {
            composite = refine(&composite, st.config.refinement_element());
        }
        if composite.is_empty() {
            return Err(PipelineError::Signal {
                stage: Stage::Segment,
                signal: Signal::EmptyMask,
            });
        }
        let mask_original = resize_nearest(&composite, st.original.frame());
        let overlay = render_overlay(&st.original, &mask_original, OVERLAY_RED, DEFAULT_OVERLAY_ALPHA)?;
        let mask_png = mask_original.to_png()?;
        let overlay_png = overlay.to_png()?;
        self.persist(ArtifactKind::Mask, revision, &mask_png)?;
        self.persist(ArtifactKind::Overlay, revision, &overlay_png)?;
        let count = composite.count();
        self.state.box_masks = selected;
        self.state.composite = Some(composite);
        Ok(count)
    }

    /// Composite mask in the original frame, if segmentation succeeded.
    pub fn mask_original(&self) -> Option<BinaryMask> {
        self.state
            .composite
            .as_ref()
            .map(|m| resize_nearest(m, self.state.original.frame()))
    }

    /// Stage 3. An accelerator failure is retried once on the CPU.
    pub fn run_inpaint(&mut self) -> Result<()> {
        let revision = self.begin(Stage::Inpaint)?;
        let started = Instant::now();
        let result = self.inpaint_inner(revision);
        self.finish(Stage::Inpaint, started, result)
    }

    fn inpaint_inner(&mut self, revision: u32) -> Result<()> {
        let st = &self.state;
        let composite = st.composite.as_ref().expect("segment succeeded implies a composite");
        let dilated = dilate_for_inpaint(composite, st.config.inpaint_dilation);
        let native = self.backends.inpainter.native_frame(st.original.frame());
        let image = if native == st.original.frame() {
            st.original.clone()
        } else {
            resize_image_nearest(&st.original, native)
        };
        let mask = resize_nearest(&dilated, native);
        let mut request = InpaintRequest {
            image: &image,
            mask: &mask,
            prompt: &st.edit_prompt,
            guidance: st.config.guidance_g,
            n_steps: st.config.n_steps,
            seed: st.config.seed,
            policy: st.policy,
        };
        let mut notice = None;
        let output = match self.backends.inpainter.inpaint(&request) {
            Ok(img) => img,
            Err(first) if request.policy.device == Device::Accelerator => {
                notice = Some(format!("inpaint failed on accelerator ({first}); retried on CPU in full precision"));
                request.policy = ExecutionPolicy::CPU;
                self.backends
                    .inpainter
                    .inpaint(&request)
                    .map_err(|source| PipelineError::Backend {
                        stage: Stage::Inpaint,
                        source,
                    })?
            }
            Err(source) => {
                return Err(PipelineError::Backend {
                    stage: Stage::Inpaint,
                    source,
                })
            }
        };
        if output.frame() != native {
            return Err(PipelineError::Backend {
                stage: Stage::Inpaint,
                source: BackendError::Contract(format!("edited image is {}, expected {native}", output.frame())),
            });
        }
        let edited = if native == st.original.frame() {
            output
        } else {
            resize_image_nearest(&output, st.original.frame())
        };
        let composite_img = before_after(&st.original, &edited)?;
        let edited_png = edited.to_png()?;
        let composite_png = composite_img.to_png()?;
        let used_policy = request.policy;
        if let Some(n) = notice {
            log::warn!("run {}: {n}", self.state.run_id);
            self.state.manifest.notices.push(n);
            self.state.manifest.execution = used_policy;
            self.state.policy = used_policy;
        }
        self.persist(ArtifactKind::Edited, revision, &edited_png)?;
        self.persist(ArtifactKind::Composite, revision, &composite_png)?;
        self.state.edited = Some(edited);
        Ok(())
    }

    /// Stage 4. Advisory only: the overlap score is recorded, never enforced.
    pub fn run_describe(&mut self) -> Result<String> {
        let revision = self.begin(Stage::Describe)?;
        let started = Instant::now();
        let result = self.describe_inner(revision);
        self.finish(Stage::Describe, started, result)
    }

    fn describe_inner(&mut self, revision: u32) -> Result<String> {
        let edited = self.state.edited.as_ref().expect("inpaint succeeded implies an edited image");
        let backend = |source| PipelineError::Backend {
            stage: Stage::Describe,
            source,
        };
        let text = self.backends.describer.describe(edited).map_err(backend)?;
        if text.trim().is_empty() {
            return Err(backend(BackendError::Contract("empty description".into())));
        }
        let mut payload = text.clone();
        if !payload.ends_with('\n') {
            payload.push('\n');
        }
        self.persist(ArtifactKind::Description, revision, payload.as_bytes())?;
        self.state.manifest.semantic_overlap = token_overlap(&text, &self.state.edit_prompt);
        self.state.description = Some(text.clone());
        Ok(text)
    }

    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Detect => self.run_detect().map(drop),
            Stage::Segment => self.run_segment().map(drop),
            Stage::Inpaint => self.run_inpaint(),
            Stage::Describe => self.run_describe().map(drop),
        }
    }

    /// Record a human gate decision on the stage's latest output.
    pub fn review(&mut self, stage: Stage, decision: GateDecision) -> Result<()> {
        if self.state.manifest.is_finalized() {
            return Err(PipelineError::Finalized(self.state.run_id.clone()));
        }
        let status = self.state.status(stage);
        let allowed = match decision {
            GateDecision::Accepted => status == StageStatus::Succeeded,
            GateDecision::Rejected => matches!(status, StageStatus::Succeeded | StageStatus::Failed),
        };
        if !allowed {
            return Err(PipelineError::NothingToReview {
                stage,
                action: match decision {
                    GateDecision::Accepted => "accept",
                    GateDecision::Rejected => "reject",
                },
            });
        }
        if decision == GateDecision::Rejected {
            if let Some(blocking) = stage.later().iter().copied().find(|s| self.state.is_live(*s)) {
                return Err(PipelineError::DownstreamLive { stage, blocking });
            }
        }
        let revision = self.state.manifest.stage(stage).revision;
        self.state.record_mut(stage).gate = Some(decision);
        self.state.manifest.gates.push(GateEvent {
            stage,
            revision,
            decision,
            at: now_rfc3339(),
        });
        self.save_manifest()
    }

    pub fn accept(&mut self, stage: Stage) -> Result<()> {
        self.review(stage, GateDecision::Accepted)
    }

    pub fn reject(&mut self, stage: Stage) -> Result<()> {
        self.review(stage, GateDecision::Rejected)
    }

    /// Apply a config patch. A field may change only while no stage after
    /// the one that consumes it is live; fields fixed at start never change.
    pub fn update_config(&mut self, patch: &ConfigPatch) -> Result<&RunConfig> {
        if self.state.manifest.is_finalized() {
            return Err(PipelineError::Finalized(self.state.run_id.clone()));
        }
        for (name, owner) in patch.touched() {
            match owner {
                None => {
                    return Err(PipelineError::Config(format!("{name} is fixed when the run starts")));
                }
                Some(stage) => {
                    if let Some(blocking) = stage.later().iter().copied().find(|s| self.state.is_live(*s)) {
                        return Err(PipelineError::DownstreamLive { stage, blocking });
                    }
                }
            }
        }
        let config = self.state.config.patched(patch)?;
        self.state.config = config.clone();
        self.state.manifest.seed = config.seed;
        self.state.manifest.config = config;
        self.save_manifest()?;
        Ok(&self.state.config)
    }

    /// Freeze the manifest. Later mutations are refused.
    pub fn finalize(&mut self) -> Result<&RunManifest> {
        if !self.state.manifest.is_finalized() {
            self.state.manifest.finalized_at = Some(now_rfc3339());
            self.save_manifest()?;
        }
        Ok(&self.state.manifest)
    }

    /// Mark every pending stage skipped (used when a batch run stops early).
    fn skip_pending(&mut self) -> Result<()> {
        for s in Stage::ALL {
            if self.state.status(s) == StageStatus::Pending {
                self.state.record_mut(s).status = StageStatus::Skipped;
            }
        }
        self.save_manifest()
    }

    /// Drive all pending stages in order, stopping at the first failure or
    /// signal, then finalize.
    pub fn run_to_completion(&mut self) -> Result<RunResult> {
        let mut outcome = RunOutcome::Completed;
        for stage in Stage::ALL {
            if stage == Stage::Segment && self.state.no_detections {
                outcome = RunOutcome::Signal {
                    stage: Stage::Detect,
                    signal: Signal::NoDetections,
                };
                break;
            }
            match self.run_stage(stage) {
                Ok(()) => {}
                Err(PipelineError::Signal { stage, signal }) => {
                    outcome = RunOutcome::Signal { stage, signal };
                    break;
                }
                Err(err @ PipelineError::Backend { .. }) => {
                    outcome = RunOutcome::StageFailed {
                        stage,
                        message: err.to_string(),
                    };
                    break;
                }
                Err(other) => return Err(other),
            }
        }
        self.skip_pending()?;
        self.finalize()?;
        Ok(self.result(outcome))
    }

    fn result(&self, outcome: RunOutcome) -> RunResult {
        let m = &self.state.manifest;
        let path_of = |kind| m.latest(kind).map(|e| e.path.clone());
        RunResult {
            run_id: self.state.run_id.clone(),
            outcome,
            stages: self.state.stage_statuses(),
            edited: path_of(ArtifactKind::Edited),
            description: self.state.description.clone(),
            manifest: MANIFEST_FILE.to_string(),
            content_fingerprint: m.content_fingerprint.clone(),
            timings: m
                .stages
                .iter()
                .filter_map(|r| r.seconds.map(|s| (r.stage, s)))
                .collect(),
        }
    }
}

/// Batch entry point: start a run and execute all four stages.
pub fn run_pipeline(store: &ArtifactStore, backends: BackendSet, request: RunRequest) -> Result<RunResult> {
    let mut run = Run::start(store.clone(), backends, request)?;
    run.run_to_completion()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub tau: f64,
    pub retained: usize,
    /// Original-frame detections.
    pub detections: Vec<Detection>,
}

/// Retained detections for each threshold, highest first. A
/// threshold-independent detector is called once and its raw output
/// reused.
pub fn threshold_sweep(
    image: &RgbImage,
    phrase: &str,
    taus: &[f64],
    config: &RunConfig,
    detector: &dyn Detector,
) -> Result<Vec<SweepRow>> {
    if taus.is_empty() {
        return Err(PipelineError::Input("threshold sweep needs at least one tau".into()));
    }
    for t in taus {
        unit_interval("tau", *t)?;
    }
    config.validate()?;
    let mut ordered = taus.to_vec();
    ordered.sort_by(|a, b| b.total_cmp(a));
    let (working, to_original) = working_copy(image, config.working_size)?;

    let cached = if detector.threshold_independent() {
        let raw = detector
            .detect(&working, phrase, 0.0, config.tau_txt)
            .map_err(|source| PipelineError::Backend {
                stage: Stage::Detect,
                source,
            })?;
        check_detections(&raw, working.frame())?;
        Some(raw)
    } else {
        None
    };

    let mut rows = Vec::with_capacity(ordered.len());
    for tau in ordered {
        let cell = RunConfig {
            tau_det: tau,
            ..config.clone()
        };
        let retained = match &cached {
            Some(raw) => nms(&filter_by_score(raw, tau), cell.nms_iou)?,
            None => detect_retained(detector, &working, phrase, &cell)?,
        };
        let detections = retained
            .iter()
            .map(|d| map_detection(d, &to_original))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(SweepRow {
            tau,
            retained: detections.len(),
            detections,
        });
    }
    Ok(rows)
}
