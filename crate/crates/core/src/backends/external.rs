//! Adapters that delegate a stage to an out-of-process model runner.
//!
//! The runner is any executable. For each call the adapter creates a
//! scratch directory, writes `request.json` plus the input PNGs into it and
//! invokes `<program> <args...> <stage> <dir>`. The runner must write
//! `response.json` into the same directory before exiting:
//!
//! | stage      | inputs                          | response                                      |
//! |------------|---------------------------------|-----------------------------------------------|
//! | `detect`   | `image.png`                     | `{"boxes":[{x_min,y_min,x_max,y_max,score}]}` |
//! | `segment`  | `image.png`                     | `{"candidates":[{"mask":"<png>","quality":q}]}` |
//! | `inpaint`  | `image.png`, `mask.png`         | `{"image":"<png>"}`                           |
//! | `describe` | `image.png`                     | `{"text":"..."}`                              |
//!
//! Any stage may instead answer `{"error":{"kind":"out_of_memory"|"failed","message":"..."}}`.
//! The child inherits the process environment, which is how API tokens
//! reach remote describers; they are never written into the scratch files.

use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use wait_timeout::ChildExt;

use super::{
    BackendError, Describer, Detector, ExecutionPolicy, InpaintRequest, Inpainter, MaskCandidate,
    Segmenter, DEFAULT_TIMEOUT_SECS,
};
use crate::geometry::{Detection, FrameSize, PixelBox};
use crate::maskops::{BinaryMask, RgbImage};

/// Environment variable the remote describer reads its token from.
pub const DESCRIBER_TOKEN_ENV: &str = "REPLICATE_API_TOKEN";

pub const DETECTOR_IDENTITY: &str = "GroundingDINO SwinT OGC (weights/groundingdino_swint_ogc.pth)";
pub const SEGMENTER_IDENTITY: &str = "SAM ViT-H (weights/sam_vit_h_4b8939.pth, id 4b8939)";
pub const INPAINTER_IDENTITY: &str = "stabilityai/stable-diffusion-2-inpainting";
pub const DESCRIBER_IDENTITY: &str = "llava-hf/llava-1.5-7b-hf";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerCommand {
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_SECS
}

impl RunnerCommand {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self {
            program: program.into(),
            args: Vec::new(),
            timeout_secs: DEFAULT_TIMEOUT_SECS,
        }
    }

    pub fn arg(mut self, arg: impl Into<String>) -> Self {
        self.args.push(arg.into());
        self
    }

    pub fn timeout(mut self, secs: u64) -> Self {
        self.timeout_secs = secs;
        self
    }

    /// Parse a whitespace-separated command line, e.g. from an env variable.
    pub fn parse(line: &str) -> Option<Self> {
        let mut parts = line.split_whitespace();
        let program = parts.next()?;
        Some(Self {
            program: program.into(),
            args: parts.map(str::to_string).collect(),
            timeout_secs: DEFAULT_TIMEOUT_SECS,
        })
    }

    fn invoke(&self, stage: &str, write_inputs: impl FnOnce(&Path) -> Result<(), BackendError>) -> Result<(tempfile::TempDir, serde_json::Value), BackendError> {
        let dir = tempfile::tempdir().map_err(|e| BackendError::Failed(format!("scratch dir: {e}")))?;
        write_inputs(dir.path())?;
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .arg(stage)
            .arg(dir.path())
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BackendError::Unavailable(format!("{}: {e}", self.program.display())))?;
        let status = match child
            .wait_timeout(Duration::from_secs(self.timeout_secs))
            .map_err(|e| BackendError::Failed(e.to_string()))?
        {
            Some(status) => status,
            None => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(BackendError::Timeout(self.timeout_secs));
            }
        };
        let response_path = dir.path().join("response.json");
        let bytes = match std::fs::read(&response_path) {
            Ok(b) => b,
            Err(_) if !status.success() => {
                return Err(BackendError::Failed(format!("{stage} runner exited with {status}")));
            }
            Err(e) => return Err(BackendError::Contract(format!("{stage} runner wrote no response: {e}"))),
        };
        let value: serde_json::Value = serde_json::from_slice(&bytes)
            .map_err(|e| BackendError::Contract(format!("{stage} response is not JSON: {e}")))?;
        if let Some(err) = value.get("error") {
            let message = err.get("message").and_then(|m| m.as_str()).unwrap_or("").to_string();
            return Err(match err.get("kind").and_then(|k| k.as_str()) {
                Some("out_of_memory") => BackendError::OutOfMemory(message),
                _ => BackendError::Failed(message),
            });
        }
        Ok((dir, value))
    }
}

fn write_png(path: &Path, bytes: Result<Vec<u8>, crate::maskops::MaskError>) -> Result<(), BackendError> {
    let bytes = bytes.map_err(|e| BackendError::Failed(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| BackendError::Failed(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), BackendError> {
    std::fs::write(path, value.to_string()).map_err(|e| BackendError::Failed(format!("{}: {e}", path.display())))
}

fn response_png(dir: &Path, value: &serde_json::Value, key: &str) -> Result<Vec<u8>, BackendError> {
    let name = value
        .get(key)
        .and_then(|v| v.as_str())
        .ok_or_else(|| BackendError::Contract(format!("response lacks '{key}'")))?;
    // keep runners inside their scratch directory
    let rel = Path::new(name);
    if rel.is_absolute() || rel.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(BackendError::Contract(format!("'{name}' escapes the scratch directory")));
    }
    std::fs::read(dir.join(rel)).map_err(|e| BackendError::Contract(format!("{name}: {e}")))
}

#[derive(Debug, Clone)]
pub struct ExternalDetector {
    pub command: RunnerCommand,
    pub identity: String,
}

#[derive(Debug, Clone)]
pub struct ExternalSegmenter {
    pub command: RunnerCommand,
    pub identity: String,
}

#[derive(Debug, Clone)]
pub struct ExternalInpainter {
    pub command: RunnerCommand,
    pub identity: String,
    /// Square working frame of the model, if it does not accept arbitrary sizes.
    pub native_side: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct ExternalDescriber {
    pub command: RunnerCommand,
    pub identity: String,
}

#[derive(Deserialize)]
struct BoxResponse {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    score: f64,
}

impl Detector for ExternalDetector {
    fn identity(&self) -> String {
        self.identity.clone()
    }

    fn detect(&self, image: &RgbImage, phrase: &str, tau_det: f64, tau_txt: f64) -> Result<Vec<Detection>, BackendError> {
        let (_dir, value) = self.command.invoke("detect", |dir| {
            write_png(&dir.join("image.png"), image.to_png())?;
            write_json(
                &dir.join("request.json"),
                &json!({"phrase": phrase, "tau_det": tau_det, "tau_txt": tau_txt}),
            )
        })?;
        let boxes: Vec<BoxResponse> = serde_json::from_value(value.get("boxes").cloned().unwrap_or_default())
            .map_err(|e| BackendError::Contract(format!("detect boxes: {e}")))?;
        boxes
            .into_iter()
            .map(|b| {
                let bbox = PixelBox::new(image.frame(), b.x_min, b.y_min, b.x_max, b.y_max)
                    .map_err(|e| BackendError::Contract(e.to_string()))?;
                Detection::new(bbox, b.score, phrase).map_err(|e| BackendError::Contract(e.to_string()))
            })
            .collect()
    }
}

impl Segmenter for ExternalSegmenter {
    fn identity(&self) -> String {
        self.identity.clone()
    }

    fn segment(&self, image: &RgbImage, bbox: &PixelBox) -> Result<Vec<MaskCandidate>, BackendError> {
        let (dir, value) = self.command.invoke("segment", |dir| {
            write_png(&dir.join("image.png"), image.to_png())?;
            let [x_min, y_min, x_max, y_max] = bbox.coords();
            write_json(
                &dir.join("request.json"),
                &json!({"box": {"x_min": x_min, "y_min": y_min, "x_max": x_max, "y_max": y_max}}),
            )
        })?;
        let candidates = value
            .get("candidates")
            .and_then(|c| c.as_array())
            .ok_or_else(|| BackendError::Contract("segment response lacks 'candidates'".into()))?;
        let mut out = Vec::with_capacity(candidates.len());
        for c in candidates {
            let bytes = response_png(dir.path(), c, "mask")?;
            let mask = BinaryMask::from_png(&bytes).map_err(|e| BackendError::Contract(e.to_string()))?;
            if mask.frame() != image.frame() {
                return Err(BackendError::Contract(format!(
                    "mask frame {} differs from image frame {}",
                    mask.frame(),
                    image.frame()
                )));
            }
            let quality = c.get("quality").and_then(|q| q.as_f64());
            if let Some(q) = quality {
                if !(0.0..=1.0).contains(&q) {
                    return Err(BackendError::Contract(format!("mask quality {q} outside [0, 1]")));
                }
            }
            out.push(MaskCandidate { mask, quality });
        }
        if out.is_empty() {
            return Err(BackendError::Contract("segmenter returned no candidates".into()));
        }
        Ok(out)
    }
}

impl Inpainter for ExternalInpainter {
    fn identity(&self) -> String {
        self.identity.clone()
    }

    fn native_frame(&self, original: FrameSize) -> FrameSize {
        match self.native_side.and_then(|s| FrameSize::square(s).ok()) {
            Some(f) => f,
            None => original,
        }
    }

    fn inpaint(&self, request: &InpaintRequest<'_>) -> Result<RgbImage, BackendError> {
        let ExecutionPolicy { device, precision } = request.policy;
        let (dir, value) = self.command.invoke("inpaint", |dir| {
            write_png(&dir.join("image.png"), request.image.to_png())?;
            write_png(&dir.join("mask.png"), request.mask.to_png())?;
            write_json(
                &dir.join("request.json"),
                &json!({
                    "prompt": request.prompt,
                    "guidance": request.guidance,
                    "n_steps": request.n_steps,
                    "seed": request.seed,
                    "device": device,
                    "precision": precision,
                }),
            )
        })?;
        let bytes = response_png(dir.path(), &value, "image")?;
        let edited = RgbImage::from_png(&bytes).map_err(|e| BackendError::Contract(e.to_string()))?;
        if edited.frame() != request.image.frame() {
            return Err(BackendError::Contract(format!(
                "edited frame {} differs from input frame {}",
                edited.frame(),
                request.image.frame()
            )));
        }
        Ok(edited)
    }
}

impl Describer for ExternalDescriber {
    fn identity(&self) -> String {
        self.identity.clone()
    }

    fn describe(&self, image: &RgbImage) -> Result<String, BackendError> {
        let (_dir, value) = self.command.invoke("describe", |dir| {
            write_png(&dir.join("image.png"), image.to_png())?;
            write_json(&dir.join("request.json"), &json!({}))
        })?;
        let text = value
            .get("text")
            .and_then(|t| t.as_str())
            .map(str::trim)
            .unwrap_or_default();
        if text.is_empty() {
            return Err(BackendError::Contract("describer returned empty text".into()));
        }
        Ok(text.to_string())
    }
}

/// Runner commands for each stage of the real backend set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealBackendConfig {
    pub detector: RunnerCommand,
    pub segmenter: RunnerCommand,
    pub inpainter: RunnerCommand,
    pub describer: RunnerCommand,
    #[serde(default)]
    pub inpaint_native_side: Option<u32>,
    #[serde(default)]
    pub accelerator_available: bool,
}

pub const ENV_DETECTOR_CMD: &str = "LSID_DETECTOR_CMD";
pub const ENV_SEGMENTER_CMD: &str = "LSID_SEGMENTER_CMD";
pub const ENV_INPAINTER_CMD: &str = "LSID_INPAINTER_CMD";
pub const ENV_DESCRIBER_CMD: &str = "LSID_DESCRIBER_CMD";
pub const ENV_ACCELERATOR: &str = "LSID_ACCELERATOR";

impl RealBackendConfig {
    /// Read runner commands from `LSID_*_CMD` variables.
    pub fn from_env() -> Result<Self, BackendError> {
        let get = |name: &str| -> Result<RunnerCommand, BackendError> {
            std::env::var(name)
                .ok()
                .and_then(|v| RunnerCommand::parse(&v))
                .ok_or_else(|| BackendError::Unavailable(format!("{name} is not set")))
        };
        Ok(Self {
            detector: get(ENV_DETECTOR_CMD)?,
            segmenter: get(ENV_SEGMENTER_CMD)?,
            inpainter: get(ENV_INPAINTER_CMD)?,
            describer: get(ENV_DESCRIBER_CMD)?,
            inpaint_native_side: None,
            accelerator_available: std::env::var(ENV_ACCELERATOR).is_ok_and(|v| v == "1"),
        })
    }

    pub fn build(&self) -> super::BackendSet {
        super::BackendSet {
            detector: Box::new(ExternalDetector {
                command: self.detector.clone(),
                identity: DETECTOR_IDENTITY.into(),
            }),
            segmenter: Box::new(ExternalSegmenter {
                command: self.segmenter.clone(),
                identity: SEGMENTER_IDENTITY.into(),
            }),
            inpainter: Box::new(ExternalInpainter {
                command: self.inpainter.clone(),
                identity: INPAINTER_IDENTITY.into(),
                native_side: self.inpaint_native_side,
            }),
            describer: Box::new(ExternalDescriber {
                command: self.describer.clone(),
                identity: DESCRIBER_IDENTITY.into(),
            }),
            accelerator_available: self.accelerator_available,
        }
    }
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;
    use std::os::unix::fs::PermissionsExt;

    fn script(dir: &Path, body: &str) -> RunnerCommand {
        let path = dir.join("runner.sh");
        std::fs::write(&path, format!("#!/bin/sh\nstage=\"$1\"\nout=\"$2\"\n{body}\n")).unwrap();
        std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
        RunnerCommand::new(path)
    }

    fn image() -> RgbImage {
        RgbImage::filled(FrameSize::new(16, 8).unwrap(), [0.5, 0.5, 0.5])
    }

    #[test]
    fn detect_smoke() {
        let tmp = tempfile::tempdir().unwrap();
        let cmd = script(
            tmp.path(),
            r#"echo '{"boxes":[{"x_min":1,"y_min":2,"x_max":9,"y_max":7,"score":0.66}]}' > "$out/response.json""#,
        );
        let det = ExternalDetector {
            command: cmd,
            identity: DETECTOR_IDENTITY.into(),
        };
        let dets = det.detect(&image(), "red car", 0.5, 0.35).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].bbox.coords(), [1.0, 2.0, 9.0, 7.0]);
        assert_eq!(dets[0].score(), 0.66);
    }

    #[test]
    fn segment_and_inpaint_smoke() {
        let tmp = tempfile::tempdir().unwrap();
        let mask = BinaryMask::rect(FrameSize::new(16, 8).unwrap(), 2, 2, 6, 6);
        let mask_path = tmp.path().join("fixed_mask.png");
        std::fs::write(&mask_path, mask.to_png().unwrap()).unwrap();
        let body = format!(
            r#"case "$stage" in
  segment) cp "{}" "$out/m0.png"; echo '{{"candidates":[{{"mask":"m0.png","quality":0.9}}]}}' > "$out/response.json" ;;
  inpaint) test -f "$out/mask.png" || exit 9; cp "$out/image.png" "$out/edited.png"; echo '{{"image":"edited.png"}}' > "$out/response.json" ;;
esac"#,
            mask_path.display()
        );
        let cmd = script(tmp.path(), &body);
        let seg = ExternalSegmenter {
            command: cmd.clone(),
            identity: SEGMENTER_IDENTITY.into(),
        };
        let bbox = PixelBox::new(FrameSize::new(16, 8).unwrap(), 1.0, 1.0, 7.0, 7.0).unwrap();
        let cands = seg.segment(&image(), &bbox).unwrap();
        assert_eq!(cands[0].mask, mask);
        assert_eq!(cands[0].quality, Some(0.9));

        let inp = ExternalInpainter {
            command: cmd,
            identity: INPAINTER_IDENTITY.into(),
            native_side: None,
        };
        let img = image();
        let out = inp
            .inpaint(&InpaintRequest {
                image: &img,
                mask: &mask,
                prompt: "blue",
                guidance: 7.5,
                n_steps: 50,
                seed: 0,
                policy: ExecutionPolicy::CPU,
            })
            .unwrap();
        assert_eq!(out.to_png().unwrap(), img.to_png().unwrap());
    }

    #[test]
    fn error_kinds_and_timeout() {
        let tmp = tempfile::tempdir().unwrap();
        let cmd = script(
            tmp.path(),
            r#"echo '{"error":{"kind":"out_of_memory","message":"CUDA OOM"}}' > "$out/response.json""#,
        );
        let d = ExternalDescriber {
            command: cmd,
            identity: DESCRIBER_IDENTITY.into(),
        };
        assert_eq!(d.describe(&image()), Err(BackendError::OutOfMemory("CUDA OOM".into())));

        let slow = script(tmp.path(), "sleep 5").timeout(1);
        let d = ExternalDescriber {
            command: slow,
            identity: DESCRIBER_IDENTITY.into(),
        };
        assert_eq!(d.describe(&image()), Err(BackendError::Timeout(1)));
    }

    #[test]
    fn describer_sees_token_but_scratch_files_do_not() {
        let tmp = tempfile::tempdir().unwrap();
        let leak = tmp.path().join("scan.txt");
        let body = format!(
            r#"cat "$out"/* > "{}"; printf '{{"text":"token len %s"}}' "${{#{}}}" > "$out/response.json""#,
            leak.display(),
            DESCRIBER_TOKEN_ENV
        );
        let cmd = script(tmp.path(), &body);
        let d = ExternalDescriber {
            command: cmd,
            identity: DESCRIBER_IDENTITY.into(),
        };
        // the variable may or may not be set in the test environment; only
        // check that the scratch inputs never contain its value
        let text = d.describe(&image()).unwrap();
        assert!(text.starts_with("token len"));
        if let Ok(token) = std::env::var(DESCRIBER_TOKEN_ENV) {
            let scanned = std::fs::read(&leak).unwrap();
            assert!(!String::from_utf8_lossy(&scanned).contains(&token));
        }
    }

    #[test]
    fn missing_program_is_unavailable() {
        let d = ExternalDescriber {
            command: RunnerCommand::new("/nonexistent/runner"),
            identity: DESCRIBER_IDENTITY.into(),
        };
        assert!(matches!(d.describe(&image()), Err(BackendError::Unavailable(_))));
    }

    #[test]
    fn runner_cannot_escape_scratch_dir() {
        let tmp = tempfile::tempdir().unwrap();
        let cmd = script(tmp.path(), r#"echo '{"image":"../../etc/passwd"}' > "$out/response.json""#);
        let inp = ExternalInpainter {
            command: cmd,
            identity: INPAINTER_IDENTITY.into(),
            native_side: None,
        };
        let img = image();
        let mask = BinaryMask::empty(img.frame());
        let res = inp.inpaint(&InpaintRequest {
            image: &img,
            mask: &mask,
            prompt: "x",
            guidance: 7.5,
            n_steps: 1,
            seed: 0,
            policy: ExecutionPolicy::CPU,
        });
        assert!(matches!(res, Err(BackendError::Contract(_))));
    }
}
