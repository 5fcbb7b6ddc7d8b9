//! Boxes, frames and scale maps used by the detection stage.
//!
//! Box coordinates stay in floating point until a caller asks for a pixel
//! window; rounding happens exactly once, half away from zero.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("frame mismatch: {left} vs {right}")]
    FrameMismatch { left: FrameSize, right: FrameSize },
    #[error("invalid frame {width}x{height}: both extents must be at least 1")]
    InvalidFrame { width: u32, height: u32 },
    #[error("invalid box ({x_min}, {y_min}, {x_max}, {y_max}) in frame {frame}")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        frame: FrameSize,
    },
    #[error("score {0} outside [0, 1]")]
    InvalidScore(f64),
    #[error("ratio {0} outside [0, 1]")]
    InvalidRatio(f64),
    #[error("detection phrase must not be empty")]
    EmptyPhrase,
}

pub type Result<T, E = GeometryError> = std::result::Result<T, E>;

/// Pixel extent of an image or mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameSize {
    pub width: u32,
    pub height: u32,
}

impl FrameSize {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidFrame { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn square(side: u32) -> Result<Self> {
        Self::new(side, side)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn ensure_same(&self, other: &FrameSize) -> Result<()> {
        if self != other {
            return Err(GeometryError::FrameMismatch {
                left: *self,
                right: *other,
            });
        }
        Ok(())
    }
}

impl fmt::Display for FrameSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Axis-aligned box in continuous pixel coordinates of `frame`.
///
/// Construction clamps coordinates into `[0, width] x [0, height]` and
/// rejects boxes that are non-finite or degenerate after clamping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    frame: FrameSize,
}

/// Integer pixel window `[x0, x1) x [y0, y1)` extracted from a box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelWindow {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelWindow {
    pub fn is_empty(&self) -> bool {
        self.x0 >= self.x1 || self.y0 >= self.y1
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

impl PixelBox {
    pub fn new(frame: FrameSize, x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let invalid = || GeometryError::InvalidBox {
            x_min,
            y_min,
            x_max,
            y_max,
            frame,
        };
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(invalid());
        }
        let w = frame.width as f64;
        let h = frame.height as f64;
        let (cx0, cy0) = (x_min.clamp(0.0, w), y_min.clamp(0.0, h));
        let (cx1, cy1) = (x_max.clamp(0.0, w), y_max.clamp(0.0, h));
        if !(cx0 < cx1 && cy0 < cy1) {
            return Err(invalid());
        }
        Ok(Self {
            x_min: cx0,
            y_min: cy0,
            x_max: cx1,
            y_max: cy1,
            frame,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }
    pub fn frame(&self) -> FrameSize {
        self.frame
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Grow (or shrink, for negative `margin`) every side, clamping to the frame.
    pub fn expanded(&self, margin: f64) -> Result<Self> {
        Self::new(
            self.frame,
            self.x_min - margin,
            self.y_min - margin,
            self.x_max + margin,
            self.y_max + margin,
        )
    }

    /// The integer pixel window covered by this box.
    ///
    /// Edges are rounded half away from zero, then clamped to the frame.
    pub fn pixel_window(&self) -> PixelWindow {
        let round = |v: f64, limit: u32| -> u32 { (v.round().max(0.0) as u64).min(limit as u64) as u32 };
        PixelWindow {
            x0: round(self.x_min, self.frame.width),
            y0: round(self.y_min, self.frame.height),
            x1: round(self.x_max, self.frame.width),
            y1: round(self.y_max, self.frame.height),
        }
    }
}

/// A phrase-grounded box with a confidence score.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: PixelBox,
    score: f64,
    phrase: String,
}

impl Detection {
    pub fn new(bbox: PixelBox, score: f64, phrase: impl Into<String>) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(GeometryError::InvalidScore(score));
        }
        let phrase = phrase.into();
        if phrase.trim().is_empty() {
            return Err(GeometryError::EmptyPhrase);
        }
        Ok(Self {
            bbox,
            score,
            phrase,
        })
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn phrase(&self) -> &str {
        &self.phrase
    }

    pub fn frame(&self) -> FrameSize {
        self.bbox.frame
    }
}

/// Ratios mapping coordinates of one frame onto another.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleMap {
    from: FrameSize,
    to: FrameSize,
    sx: f64,
    sy: f64,
}

impl ScaleMap {
    pub fn from(&self) -> FrameSize {
        self.from
    }
    pub fn to(&self) -> FrameSize {
        self.to
    }
    pub fn sx(&self) -> f64 {
        self.sx
    }
    pub fn sy(&self) -> f64 {
        self.sy
    }

    pub fn inverse(&self) -> ScaleMap {
        make_scale_map(self.to, self.from)
    }

    pub fn is_identity(&self) -> bool {
        self.from == self.to
    }
}

pub fn make_scale_map(from: FrameSize, to: FrameSize) -> ScaleMap {
    ScaleMap {
        from,
        to,
        sx: to.width as f64 / from.width as f64,
        sy: to.height as f64 / from.height as f64,
    }
}

pub fn map_box(b: &PixelBox, sm: &ScaleMap) -> Result<PixelBox> {
    b.frame.ensure_same(&sm.from)?;
    if sm.is_identity() {
        return Ok(*b);
    }
    PixelBox::new(
        sm.to,
        b.x_min * sm.sx,
        b.y_min * sm.sy,
        b.x_max * sm.sx,
        b.y_max * sm.sy,
    )
}

pub fn map_detection(d: &Detection, sm: &ScaleMap) -> Result<Detection> {
    Ok(Detection {
        bbox: map_box(&d.bbox, sm)?,
        score: d.score,
        phrase: d.phrase.clone(),
    })
}

pub fn iou_box(a: &PixelBox, b: &PixelBox) -> Result<f64> {
    a.frame.ensure_same(&b.frame)?;
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return Ok(0.0);
    }
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Keep detections with `score >= tau_det`, preserving input order.
pub fn filter_by_score(dets: &[Detection], tau_det: f64) -> Vec<Detection> {
    dets.iter().filter(|d| d.score >= tau_det).cloned().collect()
}

/// Greedy non-maximum suppression.
///
/// Candidates are visited by descending score (equal scores keep input
/// order); a candidate is dropped when its IoU with any kept box exceeds
/// `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(GeometryError::InvalidRatio(iou_threshold));
    }
    if let Some(first) = dets.first() {
        for d in &dets[1..] {
            first.frame().ensure_same(&d.frame())?;
        }
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // stable sort: ties keep the earlier input index first
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .partial_cmp(&dets[i].score)
            .unwrap_or(Ordering::Equal)
    });

    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for idx in order {
        let candidate = &dets[idx];
        let mut suppressed = false;
        for k in &kept {
            if iou_box(&k.bbox, &candidate.bbox)? > iou_threshold {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(candidate.clone());
        }
    }
    Ok(kept)
}

/// On-disk detection list: one phrase, one frame, many scored boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionsDocument {
    pub phrase: String,
    pub frame: FrameDoc,
    pub boxes: Vec<BoxDoc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameDoc {
    pub w: u32,
    pub h: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDoc {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub score: f64,
}

impl DetectionsDocument {
    pub fn from_detections(phrase: &str, frame: FrameSize, dets: &[Detection]) -> Self {
        Self {
            phrase: phrase.to_string(),
            frame: FrameDoc {
                w: frame.width,
                h: frame.height,
            },
            boxes: dets
                .iter()
                .map(|d| BoxDoc {
                    x_min: d.bbox.x_min,
                    y_min: d.bbox.y_min,
                    x_max: d.bbox.x_max,
                    y_max: d.bbox.y_max,
                    score: d.score,
                })
                .collect(),
        }
    }

    pub fn to_detections(&self) -> Result<Vec<Detection>> {
        let frame = FrameSize::new(self.frame.w, self.frame.h)?;
        self.boxes
            .iter()
            .map(|b| {
                let bbox = PixelBox::new(frame, b.x_min, b.y_min, b.x_max, b.y_max)?;
                Detection::new(bbox, b.score, self.phrase.clone())
            })
            .collect()
    }

    /// Pretty JSON, newline-terminated, fields in declaration order.
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("detections serialize");
        out.push(b'\n');
        out
    }

    pub fn from_json_bytes(bytes: &[u8]) -> serde_json::Result<Self> {
        serde_json::from_slice(bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(w: u32, h: u32) -> FrameSize {
        FrameSize::new(w, h).unwrap()
    }

    fn bx(f: FrameSize, c: [f64; 4]) -> PixelBox {
        PixelBox::new(f, c[0], c[1], c[2], c[3]).unwrap()
    }

    fn det(f: FrameSize, c: [f64; 4], score: f64) -> Detection {
        Detection::new(bx(f, c), score, "thing").unwrap()
    }

    #[test]
    fn frame_rejects_zero_extent() {
        assert!(FrameSize::new(0, 4).is_err());
        assert!(FrameSize::new(4, 0).is_err());
    }

    #[test]
    fn box_rejects_degenerate_and_nonfinite() {
        let f = frame(10, 10);
        assert!(PixelBox::new(f, 5.0, 0.0, 5.0, 4.0).is_err());
        assert!(PixelBox::new(f, f64::NAN, 0.0, 5.0, 4.0).is_err());
        // entirely outside collapses after clamping
        assert!(PixelBox::new(f, 11.0, 0.0, 15.0, 4.0).is_err());
    }

    #[test]
    fn box_clamps_into_frame() {
        let b = bx(frame(10, 10), [-3.0, 2.0, 14.0, 12.0]);
        assert_eq!(b.coords(), [0.0, 2.0, 10.0, 10.0]);
    }

    #[test]
    fn iou_identity_disjoint_and_half_overlap() {
        let f = frame(32, 32);
        let a = bx(f, [0.0, 0.0, 10.0, 10.0]);
        assert_eq!(iou_box(&a, &a).unwrap(), 1.0);
        let far = bx(f, [20.0, 20.0, 30.0, 30.0]);
        assert_eq!(iou_box(&a, &far).unwrap(), 0.0);
        let b = bx(f, [5.0, 0.0, 15.0, 10.0]);
        assert!((iou_box(&a, &b).unwrap() - 50.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn iou_checks_frames() {
        let a = bx(frame(10, 10), [0.0, 0.0, 5.0, 5.0]);
        let b = bx(frame(20, 10), [0.0, 0.0, 5.0, 5.0]);
        assert!(matches!(
            iou_box(&a, &b),
            Err(GeometryError::FrameMismatch { .. })
        ));
    }

    #[test]
    fn filter_is_inclusive_and_ordered() {
        let f = frame(10, 10);
        let dets = vec![
            det(f, [0.0, 0.0, 2.0, 2.0], 0.6),
            det(f, [0.0, 0.0, 3.0, 3.0], 0.4),
            det(f, [0.0, 0.0, 4.0, 4.0], 0.5),
        ];
        let kept = filter_by_score(&dets, 0.5);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score(), 0.6);
        assert_eq!(kept[1].score(), 0.5);
        assert_eq!(filter_by_score(&dets, 0.0).len(), 3);
        assert_eq!(filter_by_score(&dets[..2], 0.5).len(), 1);
    }

    #[test]
    fn nms_basic_cases() {
        let f = frame(100, 100);
        let single = vec![det(f, [1.0, 1.0, 9.0, 9.0], 0.3)];
        assert_eq!(nms(&single, 0.5).unwrap(), single);

        let disjoint = vec![
            det(f, [0.0, 0.0, 10.0, 10.0], 0.4),
            det(f, [50.0, 50.0, 60.0, 60.0], 0.9),
        ];
        let kept = nms(&disjoint, 0.5).unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score(), 0.9);

        // IoU = 80 / 100 = 0.8 (the second box is 80% of the first, nested)
        let heavy = vec![
            det(f, [0.0, 0.0, 10.0, 10.0], 0.9),
            det(f, [0.0, 0.0, 10.0, 8.0], 0.7),
        ];
        assert!((iou_box(&heavy[0].bbox, &heavy[1].bbox).unwrap() - 0.8).abs() < 1e-12);
        let kept = nms(&heavy, 0.5).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score(), 0.9);
    }

    #[test]
    fn nms_tie_keeps_earlier_index() {
        let f = frame(100, 100);
        let dets = vec![
            det(f, [0.0, 0.0, 10.0, 10.0], 0.8),
            det(f, [1.0, 0.0, 11.0, 10.0], 0.8),
        ];
        let kept = nms(&dets, 0.5).unwrap();
        assert_eq!(kept, vec![dets[0].clone()]);
    }

    #[test]
    fn nms_rejects_mixed_frames() {
        let dets = vec![
            det(frame(10, 10), [0.0, 0.0, 5.0, 5.0], 0.8),
            det(frame(11, 10), [0.0, 0.0, 5.0, 5.0], 0.7),
        ];
        assert!(nms(&dets, 0.5).is_err());
    }

    #[test]
    fn scale_map_ratios_and_identity() {
        let w = frame(512, 512);
        let sm = make_scale_map(w, w);
        assert_eq!((sm.sx(), sm.sy()), (1.0, 1.0));
        let b = bx(w, [3.5, 7.25, 100.0, 200.0]);
        assert_eq!(map_box(&b, &sm).unwrap(), b);

        let sm = make_scale_map(w, frame(1024, 768));
        assert_eq!((sm.sx(), sm.sy()), (2.0, 1.5));
        let mapped = map_box(&bx(w, [0.0, 0.0, 256.0, 256.0]), &sm).unwrap();
        assert_eq!(mapped.coords(), [0.0, 0.0, 512.0, 384.0]);
        assert_eq!(mapped.frame(), frame(1024, 768));
    }

    #[test]
    fn map_box_clamps_at_target_edge() {
        let src = frame(512, 512);
        let sm = make_scale_map(src, frame(1024, 768));
        let b = bx(src, [400.0, 300.0, 700.0, 900.0]);
        let mapped = map_box(&b, &sm).unwrap();
        assert_eq!(mapped.coords(), [800.0, 450.0, 1024.0, 768.0]);
    }

    #[test]
    fn map_box_checks_source_frame() {
        let sm = make_scale_map(frame(512, 512), frame(100, 100));
        let b = bx(frame(100, 100), [0.0, 0.0, 5.0, 5.0]);
        assert!(map_box(&b, &sm).is_err());
    }

    #[test]
    fn pixel_window_rounds_half_away_from_zero() {
        let b = bx(frame(20, 20), [1.5, 2.49, 10.5, 11.5]);
        assert_eq!(
            b.pixel_window(),
            PixelWindow {
                x0: 2,
                y0: 2,
                x1: 11,
                y1: 12
            }
        );
    }

    #[test]
    fn detection_validation() {
        let b = bx(frame(10, 10), [0.0, 0.0, 1.0, 1.0]);
        assert!(Detection::new(b, 1.2, "x").is_err());
        assert!(Detection::new(b, -0.1, "x").is_err());
        assert!(Detection::new(b, 0.5, "  ").is_err());
    }

    #[test]
    fn detections_document_round_trip() {
        let f = frame(64, 48);
        let dets = vec![
            Detection::new(bx(f, [1.0, 2.0, 30.5, 40.25]), 0.875, "red car").unwrap(),
            Detection::new(bx(f, [0.1, 0.2, 0.3, 0.4]), 1.0 / 3.0, "red car").unwrap(),
        ];
        let doc = DetectionsDocument::from_detections("red car", f, &dets);
        let bytes = doc.to_json_bytes();
        let text = std::str::from_utf8(&bytes).unwrap();
        let phrase_at = text.find("\"phrase\"").unwrap();
        let frame_at = text.find("\"frame\"").unwrap();
        let boxes_at = text.find("\"boxes\"").unwrap();
        assert!(phrase_at < frame_at && frame_at < boxes_at);
        let back = DetectionsDocument::from_json_bytes(&bytes).unwrap();
        assert_eq!(back.to_detections().unwrap(), dets);
    }
}
