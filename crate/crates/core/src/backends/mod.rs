//! Model stage contracts and their implementations.
//!
//! Every stage talks to its model through one of four traits. The
//! [`mock`] implementations are deterministic over the synthetic
//! [`fixture`] world; [`external`] adapters delegate to an out-of-process
//! model runner.

pub mod external;
pub mod fixture;
pub mod mock;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Detection, FrameSize, PixelBox};
use crate::maskops::{BinaryMask, RgbImage};

/// Stage timeout applied by adapters that can hang.
pub const DEFAULT_TIMEOUT_SECS: u64 = 120;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("timed out after {0} s")]
    Timeout(u64),
    #[error("out of memory: {0}")]
    OutOfMemory(String),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend violated its contract: {0}")]
    Contract(String),
    #[error("backend failed: {0}")]
    Failed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    Accelerator,
    Cpu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Half,
    Full,
}

/// Half precision is only ever paired with the accelerator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExecutionPolicy {
    pub device: Device,
    pub precision: Precision,
}

impl ExecutionPolicy {
    pub const ACCELERATOR: Self = Self {
        device: Device::Accelerator,
        precision: Precision::Half,
    };
    pub const CPU: Self = Self {
        device: Device::Cpu,
        precision: Precision::Full,
    };
}

impl fmt::Display for ExecutionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.device {
            Device::Accelerator => write!(f, "accelerator/fp16"),
            Device::Cpu => write!(f, "cpu/fp32"),
        }
    }
}

/// Pick device and precision. A notice is returned whenever the run does
/// not get the accelerator, so callers can surface it to the user.
pub fn resolve_execution_policy(
    accelerator_available: bool,
    forced_cpu: bool,
) -> (ExecutionPolicy, Option<String>) {
    match (accelerator_available, forced_cpu) {
        (true, false) => (ExecutionPolicy::ACCELERATOR, None),
        (true, true) => (
            ExecutionPolicy::CPU,
            Some("CPU execution forced; running in full precision".to_string()),
        ),
        (false, _) => (
            ExecutionPolicy::CPU,
            Some("no accelerator available; falling back to CPU in full precision".to_string()),
        ),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskCandidate {
    pub mask: BinaryMask,
    /// Segmenter-internal quality in `[0, 1]`, when the model reports one.
    pub quality: Option<f64>,
}

#[derive(Debug, Error, PartialEq)]
#[error("no mask candidates to select from")]
pub struct NoCandidates;

/// Highest quality wins. If any candidate lacks a quality score, fall back
/// to the largest foreground count inside `bbox`. Ties go to the earliest.
pub fn select_best_mask(candidates: &[MaskCandidate], bbox: &PixelBox) -> Result<BinaryMask, NoCandidates> {
    if candidates.is_empty() {
        return Err(NoCandidates);
    }
    let all_scored = candidates.iter().all(|c| c.quality.is_some());
    let window = bbox.pixel_window();
    let key = |c: &MaskCandidate| -> f64 {
        if all_scored {
            c.quality.unwrap_or(0.0)
        } else {
            c.mask.count_in_window(&window) as f64
        }
    };
    let mut best = 0;
    let mut best_key = key(&candidates[0]);
    for (i, c) in candidates.iter().enumerate().skip(1) {
        let k = key(c);
        if k > best_key {
            best = i;
            best_key = k;
        }
    }
    Ok(candidates[best].mask.clone())
}

pub trait Detector: Send + Sync {
    /// Model name and checkpoint, recorded in the manifest.
    fn identity(&self) -> String;

    fn detect(
        &self,
        image: &RgbImage,
        phrase: &str,
        tau_det: f64,
        tau_txt: f64,
    ) -> Result<Vec<Detection>, BackendError>;

    /// True when raw scores do not depend on the thresholds passed in, so a
    /// single call at `tau_det = 0` can serve a whole threshold sweep.
    fn threshold_independent(&self) -> bool {
        false
    }
}

pub trait Segmenter: Send + Sync {
    fn identity(&self) -> String;

    fn segment(&self, image: &RgbImage, bbox: &PixelBox) -> Result<Vec<MaskCandidate>, BackendError>;
}

#[derive(Debug, Clone, Copy)]
pub struct InpaintRequest<'a> {
    pub image: &'a RgbImage,
    pub mask: &'a BinaryMask,
    pub prompt: &'a str,
    pub guidance: f64,
    pub n_steps: u32,
    pub seed: u64,
    pub policy: ExecutionPolicy,
}

pub trait Inpainter: Send + Sync {
    fn identity(&self) -> String;

    /// Frame the model works in for an input of `original` size.
    fn native_frame(&self, original: FrameSize) -> FrameSize {
        original
    }

    fn inpaint(&self, request: &InpaintRequest<'_>) -> Result<RgbImage, BackendError>;
}

pub trait Describer: Send + Sync {
    fn identity(&self) -> String;

    fn describe(&self, image: &RgbImage) -> Result<String, BackendError>;
}

impl<T: Detector + ?Sized> Detector for std::sync::Arc<T> {
    fn identity(&self) -> String {
        (**self).identity()
    }

    fn detect(&self, image: &RgbImage, phrase: &str, tau_det: f64, tau_txt: f64) -> Result<Vec<Detection>, BackendError> {
        (**self).detect(image, phrase, tau_det, tau_txt)
    }

    fn threshold_independent(&self) -> bool {
        (**self).threshold_independent()
    }
}

impl<T: Segmenter + ?Sized> Segmenter for std::sync::Arc<T> {
    fn identity(&self) -> String {
        (**self).identity()
    }

    fn segment(&self, image: &RgbImage, bbox: &PixelBox) -> Result<Vec<MaskCandidate>, BackendError> {
        (**self).segment(image, bbox)
    }
}

impl<T: Inpainter + ?Sized> Inpainter for std::sync::Arc<T> {
    fn identity(&self) -> String {
        (**self).identity()
    }

    fn native_frame(&self, original: FrameSize) -> FrameSize {
        (**self).native_frame(original)
    }

    fn inpaint(&self, request: &InpaintRequest<'_>) -> Result<RgbImage, BackendError> {
        (**self).inpaint(request)
    }
}

impl<T: Describer + ?Sized> Describer for std::sync::Arc<T> {
    fn identity(&self) -> String {
        (**self).identity()
    }

    fn describe(&self, image: &RgbImage) -> Result<String, BackendError> {
        (**self).describe(image)
    }
}

/// One instance of each stage backend, owned by a single run.
pub struct BackendSet {
    pub detector: Box<dyn Detector>,
    pub segmenter: Box<dyn Segmenter>,
    pub inpainter: Box<dyn Inpainter>,
    pub describer: Box<dyn Describer>,
    pub accelerator_available: bool,
}

impl BackendSet {
    pub fn mock() -> Self {
        Self {
            detector: Box::new(mock::MockDetector),
            segmenter: Box::new(mock::MockSegmenter),
            inpainter: Box::new(mock::MockInpainter),
            describer: Box::new(mock::MockDescriber),
            accelerator_available: false,
        }
    }

    pub fn identities(&self) -> BackendIdentities {
        BackendIdentities {
            detector: self.detector.identity(),
            segmenter: self.segmenter.identity(),
            inpainter: self.inpainter.identity(),
            describer: self.describer.identity(),
        }
    }
}

impl fmt::Debug for BackendSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendSet")
            .field("identities", &self.identities())
            .field("accelerator_available", &self.accelerator_available)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendIdentities {
    pub detector: String,
    pub segmenter: String,
    pub inpainter: String,
    pub describer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Real,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mock" => Ok(Self::Mock),
            "real" => Ok(Self::Real),
            other => Err(format!("unknown backend set '{other}' (expected mock or real)")),
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mock => "mock",
            Self::Real => "real",
        })
    }
}
