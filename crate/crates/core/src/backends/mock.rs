//! Deterministic stand-ins for the four model stages.
//!
//! They only understand the fixture world, but they honor the same
//! contracts as the real adapters and are pure functions of their inputs.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};

use sha2::{Digest, Sha256};

use super::fixture::FixtureColor;
use super::{
    BackendError, Describer, Detector, InpaintRequest, Inpainter, MaskCandidate, Segmenter,
};
use crate::geometry::{Detection, FrameSize, PixelBox};
use crate::maskops::{morphology, BinaryMask, MorphKind, Rgb, RgbImage, StructuringElement};

/// Minimum share of pixels a color needs before the describer mentions it.
pub const DESCRIBE_MIN_COVERAGE: f64 = 0.01;

const INPAINT_JITTER: f32 = 0.04;

#[derive(Debug, Clone, Copy, Default)]
pub struct MockDetector;

#[derive(Debug, Clone, Copy, Default)]
pub struct MockSegmenter;

#[derive(Debug, Clone, Copy, Default)]
pub struct MockInpainter;

#[derive(Debug, Clone, Copy, Default)]
pub struct MockDescriber;

/// Bounding window and area of one 4-connected component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Component {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
    area: u64,
}

fn components(mask: &BinaryMask) -> Vec<Component> {
    let frame = mask.frame();
    let (w, h) = (frame.width, frame.height);
    let mut seen = vec![false; frame.pixel_count()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for sy in 0..h {
        for sx in 0..w {
            let si = (sy * w + sx) as usize;
            if seen[si] || !mask.get(sx, sy) {
                continue;
            }
            seen[si] = true;
            queue.push_back((sx, sy));
            let mut c = Component {
                x0: sx,
                y0: sy,
                x1: sx + 1,
                y1: sy + 1,
                area: 0,
            };
            while let Some((x, y)) = queue.pop_front() {
                c.area += 1;
                c.x0 = c.x0.min(x);
                c.y0 = c.y0.min(y);
                c.x1 = c.x1.max(x + 1);
                c.y1 = c.y1.max(y + 1);
                let mut visit = |nx: u32, ny: u32| {
                    let ni = (ny * w + nx) as usize;
                    if !seen[ni] && mask.get(nx, ny) {
                        seen[ni] = true;
                        queue.push_back((nx, ny));
                    }
                };
                if x > 0 {
                    visit(x - 1, y);
                }
                if x + 1 < w {
                    visit(x + 1, y);
                }
                if y > 0 {
                    visit(x, y - 1);
                }
                if y + 1 < h {
                    visit(x, y + 1);
                }
            }
            out.push(c);
        }
    }
    out
}

fn color_pixels(image: &RgbImage, color: FixtureColor) -> BinaryMask {
    BinaryMask::from_fn(image.frame(), |x, y| FixtureColor::classify(image.get(x, y)) == Some(color))
}

impl Detector for MockDetector {
    fn identity(&self) -> String {
        "mock-detector (color components) v1".to_string()
    }

    fn detect(
        &self,
        image: &RgbImage,
        phrase: &str,
        tau_det: f64,
        _tau_txt: f64,
    ) -> Result<Vec<Detection>, BackendError> {
        let Some(color) = FixtureColor::find_in(phrase) else {
            return Ok(Vec::new());
        };
        let comps = components(&color_pixels(image, color));
        let Some(largest) = comps.iter().map(|c| c.area).max() else {
            return Ok(Vec::new());
        };
        let frame = image.frame();
        let mut dets = Vec::new();
        for c in comps {
            let score = c.area as f64 / largest as f64;
            if score < tau_det {
                continue;
            }
            let bbox = PixelBox::new(frame, c.x0 as f64, c.y0 as f64, c.x1 as f64, c.y1 as f64)
                .map_err(|e| BackendError::Failed(e.to_string()))?;
            dets.push(Detection::new(bbox, score, phrase).map_err(|e| BackendError::Failed(e.to_string()))?);
        }
        dets.sort_by(|a, b| {
            b.score()
                .total_cmp(&a.score())
                .then(a.bbox.x_min().total_cmp(&b.bbox.x_min()))
        });
        Ok(dets)
    }

    fn threshold_independent(&self) -> bool {
        true
    }
}

impl Segmenter for MockSegmenter {
    fn identity(&self) -> String {
        "mock-segmenter (dominant color in box) v1".to_string()
    }

    fn segment(&self, image: &RgbImage, bbox: &PixelBox) -> Result<Vec<MaskCandidate>, BackendError> {
        let frame = image.frame();
        if bbox.frame() != frame {
            return Err(BackendError::Contract(format!(
                "box frame {} differs from image frame {}",
                bbox.frame(),
                frame
            )));
        }
        let win = bbox.pixel_window();
        let mut counts = [0usize; 4];
        for y in win.y0..win.y1 {
            for x in win.x0..win.x1 {
                if let Some(c) = FixtureColor::classify(image.get(x, y)) {
                    counts[c as usize] += 1;
                }
            }
        }
        let mut dominant: Option<(FixtureColor, usize)> = None;
        for c in FixtureColor::ALL {
            let n = counts[c as usize];
            if n > 0 && dominant.is_none_or(|(_, best)| n > best) {
                dominant = Some((c, n));
            }
        }
        let Some((color, _)) = dominant else {
            return Ok(vec![MaskCandidate {
                mask: BinaryMask::empty(frame),
                quality: Some(0.0),
            }]);
        };
        let exact = BinaryMask::from_fn(frame, |x, y| {
            win.contains(x, y) && FixtureColor::classify(image.get(x, y)) == Some(color)
        });
        let eroded = morphology(&exact, MorphKind::Erode, StructuringElement::square(1));
        Ok(vec![
            MaskCandidate {
                mask: exact,
                quality: Some(1.0),
            },
            MaskCandidate {
                mask: eroded,
                quality: Some(0.6),
            },
        ])
    }
}

/// Fill color for an inpainting prompt: the named fixture color nudged by a
/// seed-dependent jitter, or a digest-derived color for other prompts.
pub fn inpaint_color(prompt: &str, seed: u64) -> Rgb {
    let mut hasher = Sha256::new();
    hasher.update(prompt.as_bytes());
    hasher.update([0u8]);
    hasher.update(seed.to_le_bytes());
    let digest = hasher.finalize();
    match FixtureColor::find_in(prompt) {
        Some(color) => {
            let base = color.rgb();
            let mut out = [0.0f32; 3];
            for i in 0..3 {
                let unit = digest[i] as f32 / 255.0;
                out[i] = (base[i] + (2.0 * unit - 1.0) * INPAINT_JITTER).clamp(0.0, 1.0);
            }
            out
        }
        None => [
            digest[0] as f32 / 255.0,
            digest[1] as f32 / 255.0,
            digest[2] as f32 / 255.0,
        ],
    }
}

impl Inpainter for MockInpainter {
    fn identity(&self) -> String {
        "mock-inpainter (digest fill) v1".to_string()
    }

    fn inpaint(&self, request: &InpaintRequest<'_>) -> Result<RgbImage, BackendError> {
        let frame = request.image.frame();
        if request.mask.frame() != frame {
            return Err(BackendError::Contract(format!(
                "mask frame {} differs from image frame {}",
                request.mask.frame(),
                frame
            )));
        }
        let fill = inpaint_color(request.prompt, request.seed);
        let mut out = request.image.clone();
        for y in 0..frame.height {
            for x in 0..frame.width {
                if request.mask.get(x, y) {
                    out.set(x, y, fill);
                }
            }
        }
        Ok(out)
    }
}

/// Coverage share of each fixture color, largest first. Ties keep color order.
pub fn color_coverage(image: &RgbImage) -> Vec<(FixtureColor, f64)> {
    let total = image.frame().pixel_count() as f64;
    let mut counts = [0usize; 4];
    for &p in image.pixels() {
        if let Some(c) = FixtureColor::classify(p) {
            counts[c as usize] += 1;
        }
    }
    let mut out: Vec<(FixtureColor, f64)> = FixtureColor::ALL
        .into_iter()
        .map(|c| (c, counts[c as usize] as f64 / total))
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    out
}

impl Describer for MockDescriber {
    fn identity(&self) -> String {
        "mock-describer (color coverage) v1".to_string()
    }

    fn describe(&self, image: &RgbImage) -> Result<String, BackendError> {
        let parts: Vec<String> = color_coverage(image)
            .into_iter()
            .filter(|(_, share)| *share > DESCRIBE_MIN_COVERAGE)
            .map(|(c, share)| format!("{} region covering {:.1}% of the image", c.word(), share * 100.0))
            .collect();
        if parts.is_empty() {
            return Ok("background only".to_string());
        }
        Ok(format!("A gray scene with a {}.", parts.join(", a ")))
    }
}

/// Wraps a backend and fails its first `remaining` calls with `error`.
///
/// `usize::MAX` makes it fail forever. Useful for exercising fallback and
/// failure-isolation paths without a real model.
#[derive(Debug)]
pub struct Faulty<T> {
    inner: T,
    error: BackendError,
    remaining: AtomicUsize,
    calls: AtomicUsize,
}

impl<T> Faulty<T> {
    pub fn new(inner: T, error: BackendError, failures: usize) -> Self {
        Self {
            inner,
            error,
            remaining: AtomicUsize::new(failures),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn always(inner: T, error: BackendError) -> Self {
        Self::new(inner, error, usize::MAX)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn trip(&self) -> Result<(), BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let left = self.remaining.load(Ordering::SeqCst);
        if left == 0 {
            return Ok(());
        }
        if left != usize::MAX {
            self.remaining.fetch_sub(1, Ordering::SeqCst);
        }
        Err(self.error.clone())
    }
}

impl<T: Detector> Detector for Faulty<T> {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn detect(&self, image: &RgbImage, phrase: &str, tau_det: f64, tau_txt: f64) -> Result<Vec<Detection>, BackendError> {
        self.trip()?;
        self.inner.detect(image, phrase, tau_det, tau_txt)
    }

    fn threshold_independent(&self) -> bool {
        self.inner.threshold_independent()
    }
}

impl<T: Segmenter> Segmenter for Faulty<T> {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn segment(&self, image: &RgbImage, bbox: &PixelBox) -> Result<Vec<MaskCandidate>, BackendError> {
        self.trip()?;
        self.inner.segment(image, bbox)
    }
}

impl<T: Inpainter> Inpainter for Faulty<T> {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn native_frame(&self, original: FrameSize) -> FrameSize {
        self.inner.native_frame(original)
    }

    fn inpaint(&self, request: &InpaintRequest<'_>) -> Result<RgbImage, BackendError> {
        self.trip()?;
        self.inner.inpaint(request)
    }
}

impl<T: Describer> Describer for Faulty<T> {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn describe(&self, image: &RgbImage) -> Result<String, BackendError> {
        self.trip()?;
        self.inner.describe(image)
    }
}

#[cfg(test)]
mod tests {
    use super::super::fixture::{FixtureRect, FixtureScene};
    use super::super::{select_best_mask, ExecutionPolicy};
    use super::*;
    use crate::maskops::mask_iou;

    fn frame(w: u32, h: u32) -> FrameSize {
        FrameSize::new(w, h).unwrap()
    }

    fn red_scene() -> FixtureScene {
        FixtureScene::new(frame(64, 48)).with(FixtureRect::new(FixtureColor::Red, 10, 12, 30, 20))
    }

    #[test]
    fn detect_single_rectangle() {
        let img = red_scene().render();
        let dets = MockDetector.detect(&img, "red", 0.5, 0.35).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].bbox.coords(), [10.0, 12.0, 30.0, 20.0]);
        assert_eq!(dets[0].score(), 1.0);
        assert!(MockDetector.detect(&img, "blue", 0.0, 0.35).unwrap().is_empty());
        assert!(MockDetector.detect(&img, "a dog", 0.0, 0.35).unwrap().is_empty());
    }

    #[test]
    fn detect_area_ratio_scores() {
        // areas 100 and 50
        let scene = FixtureScene::new(frame(64, 64))
            .with(FixtureRect::new(FixtureColor::Red, 2, 2, 12, 12))
            .with(FixtureRect::new(FixtureColor::Red, 30, 30, 40, 35));
        let img = scene.render();
        let all = MockDetector.detect(&img, "red", 0.0, 0.35).unwrap();
        let scores: Vec<f64> = all.iter().map(|d| d.score()).collect();
        assert_eq!(scores, vec![1.0, 0.5]);
        let kept = MockDetector.detect(&img, "red", 0.6, 0.35).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].bbox.coords(), [2.0, 2.0, 12.0, 12.0]);
    }

    #[test]
    fn detect_orders_equal_scores_by_x() {
        let scene = FixtureScene::new(frame(64, 64))
            .with(FixtureRect::new(FixtureColor::Blue, 40, 2, 50, 12))
            .with(FixtureRect::new(FixtureColor::Blue, 2, 30, 12, 40));
        let dets = MockDetector.detect(&scene.render(), "blue", 0.0, 0.35).unwrap();
        assert_eq!(dets[0].bbox.x_min(), 2.0);
        assert_eq!(dets[1].bbox.x_min(), 40.0);
    }

    #[test]
    fn segment_candidates() {
        let scene = red_scene();
        let img = scene.render();
        let bbox = PixelBox::new(img.frame(), 10.0, 12.0, 30.0, 20.0).unwrap();
        let cands = MockSegmenter.segment(&img, &bbox).unwrap();
        assert_eq!(cands.len(), 2);
        assert_eq!(mask_iou(&cands[0].mask, &scene.truth_mask(0)).unwrap(), 1.0);
        assert_eq!(cands[1].quality, Some(0.6));
        assert_eq!(select_best_mask(&cands, &bbox).unwrap(), cands[0].mask);

        let bg = PixelBox::new(img.frame(), 40.0, 30.0, 60.0, 40.0).unwrap();
        let cands = MockSegmenter.segment(&img, &bg).unwrap();
        assert_eq!(cands.len(), 1);
        assert!(cands[0].mask.is_empty());
        assert_eq!(cands[0].quality, Some(0.0));
    }

    fn request<'a>(img: &'a RgbImage, mask: &'a BinaryMask, prompt: &'a str, seed: u64) -> InpaintRequest<'a> {
        InpaintRequest {
            image: img,
            mask,
            prompt,
            guidance: 7.5,
            n_steps: 50,
            seed,
            policy: ExecutionPolicy::CPU,
        }
    }

    #[test]
    fn inpaint_empty_mask_is_identity_and_deterministic() {
        let img = red_scene().render();
        let empty = BinaryMask::empty(img.frame());
        assert_eq!(MockInpainter.inpaint(&request(&img, &empty, "blue", 7)).unwrap(), img);
        let mask = red_scene().truth_mask(0);
        let a = MockInpainter.inpaint(&request(&img, &mask, "blue", 7)).unwrap();
        let b = MockInpainter.inpaint(&request(&img, &mask, "blue", 7)).unwrap();
        assert_eq!(a, b);
        let c = MockInpainter.inpaint(&request(&img, &mask, "blue", 8)).unwrap();
        assert_ne!(a, c);
        assert_eq!(FixtureColor::classify(a.get(15, 15)), Some(FixtureColor::Blue));
    }

    #[test]
    fn describe_cases() {
        let gray = FixtureScene::new(frame(20, 20)).render();
        assert_eq!(MockDescriber.describe(&gray).unwrap(), "background only");
        // 40 of 400 pixels red = 10%
        let scene = FixtureScene::new(frame(20, 20)).with(FixtureRect::new(FixtureColor::Red, 0, 0, 10, 4));
        let text = MockDescriber.describe(&scene.render()).unwrap();
        assert!(text.contains("red"), "{text}");
        assert!(text.contains("10.0%"), "{text}");
        assert_eq!(text, MockDescriber.describe(&scene.render()).unwrap());
    }

    #[test]
    fn describe_skips_colors_at_one_percent() {
        // 4 of 400 pixels = exactly 1%, not mentioned
        let scene = FixtureScene::new(frame(20, 20)).with(FixtureRect::new(FixtureColor::Green, 0, 0, 2, 2));
        assert_eq!(MockDescriber.describe(&scene.render()).unwrap(), "background only");
    }

    #[test]
    fn faulty_fails_then_recovers() {
        let f = Faulty::new(MockDescriber, BackendError::Timeout(120), 1);
        let img = FixtureScene::new(frame(4, 4)).render();
        assert_eq!(f.describe(&img), Err(BackendError::Timeout(120)));
        assert!(f.describe(&img).is_ok());
        assert_eq!(f.calls(), 2);
    }
}
