//! Binary mask algebra and the small amount of raster rendering the
//! pipeline persists (overlays, annotated detections, before/after panels).
//!
//! Masks are strictly two-valued. Morphology treats pixels outside the
//! frame as background.

use std::io::Cursor;

use image::{GrayImage, ImageFormat, Luma, RgbImage as Rgb8Image};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Detection, FrameSize, GeometryError, PixelWindow};

#[derive(Debug, Error)]
pub enum MaskError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("cannot compose an empty sequence of masks")]
    EmptySequence,
    #[error("alpha {0} outside [0, 1]")]
    InvalidAlpha(f32),
    #[error("raster has {actual} values, frame {frame} needs {expected}")]
    BadLength {
        frame: FrameSize,
        expected: usize,
        actual: usize,
    },
    #[error("channel value {0} outside [0, 1]")]
    ChannelRange(f32),
    #[error("mask value {0} is neither 0 nor 255")]
    NonBinaryPng(u8),
    #[error("png codec: {0}")]
    Codec(#[from] image::ImageError),
}

pub type Result<T, E = MaskError> = std::result::Result<T, E>;

pub type Rgb = [f32; 3];

pub const MID_GRAY: Rgb = [0.5, 0.5, 0.5];
pub const OVERLAY_RED: Rgb = [1.0, 0.0, 0.0];
pub const DEFAULT_OVERLAY_ALPHA: f32 = 0.45;
pub const ANNOTATION_STROKE: u32 = 2;
pub const ANNOTATION_COLOR: Rgb = [0.0, 1.0, 1.0];
pub const PANEL_GUTTER: u32 = 8;

/// Floating-point RGB raster, channels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    frame: FrameSize,
    pixels: Vec<Rgb>,
}

impl RgbImage {
    pub fn filled(frame: FrameSize, color: Rgb) -> Self {
        Self {
            frame,
            pixels: vec![color; frame.pixel_count()],
        }
    }

    pub fn from_pixels(frame: FrameSize, pixels: Vec<Rgb>) -> Result<Self> {
        if pixels.len() != frame.pixel_count() {
            return Err(MaskError::BadLength {
                frame,
                expected: frame.pixel_count(),
                actual: pixels.len(),
            });
        }
        for p in &pixels {
            for &c in p {
                if !(0.0..=1.0).contains(&c) {
                    return Err(MaskError::ChannelRange(c));
                }
            }
        }
        Ok(Self { frame, pixels })
    }

    pub fn frame(&self) -> FrameSize {
        self.frame
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> Rgb {
        self.pixels[self.index(x, y)]
    }

    pub fn set(&mut self, x: u32, y: u32, color: Rgb) {
        let i = self.index(x, y);
        self.pixels[i] = color;
    }

    /// Paint the window `[x0, x1) x [y0, y1)` (clipped to the frame).
    pub fn fill_rect(&mut self, x0: u32, y0: u32, x1: u32, y1: u32, color: Rgb) {
        for y in y0..y1.min(self.frame.height) {
            for x in x0..x1.min(self.frame.width) {
                self.set(x, y, color);
            }
        }
    }

    fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.frame.width as usize + x as usize
    }

    /// 8-bit RGB PNG; each channel stored as `round(255 * v)`.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut buf = Rgb8Image::new(self.frame.width, self.frame.height);
        for (i, px) in buf.pixels_mut().enumerate() {
            let p = self.pixels[i];
            *px = image::Rgb([quantize(p[0]), quantize(p[1]), quantize(p[2])]);
        }
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let decoded = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
        let frame = FrameSize::new(decoded.width(), decoded.height())?;
        let pixels = decoded
            .pixels()
            .map(|p| [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0])
            .collect();
        Ok(Self { frame, pixels })
    }
}

fn quantize(v: f32) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Per-pixel {0,1} raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    frame: FrameSize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(frame: FrameSize) -> Self {
        Self {
            frame,
            bits: vec![false; frame.pixel_count()],
        }
    }

    pub fn full(frame: FrameSize) -> Self {
        Self {
            frame,
            bits: vec![true; frame.pixel_count()],
        }
    }

    pub fn from_bits(frame: FrameSize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != frame.pixel_count() {
            return Err(MaskError::BadLength {
                frame,
                expected: frame.pixel_count(),
                actual: bits.len(),
            });
        }
        Ok(Self { frame, bits })
    }

    pub fn from_fn(frame: FrameSize, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(frame.pixel_count());
        for y in 0..frame.height {
            for x in 0..frame.width {
                bits.push(f(x, y));
            }
        }
        Self { frame, bits }
    }

    /// Mask whose foreground is the window `[x0, x1) x [y0, y1)`.
    pub fn rect(frame: FrameSize, x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self::from_fn(frame, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    pub fn frame(&self) -> FrameSize {
        self.frame
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.frame.width as usize + x as usize]
    }

    /// Membership with everything outside the frame reading as background.
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        if x < 0 || y < 0 || x >= self.frame.width as i64 || y >= self.frame.height as i64 {
            return false;
        }
        self.get(x as u32, y as u32)
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let i = y as usize * self.frame.width as usize + x as usize;
        self.bits[i] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn count_in_window(&self, w: &PixelWindow) -> usize {
        let mut n = 0;
        for y in w.y0..w.y1.min(self.frame.height) {
            for x in w.x0..w.x1.min(self.frame.width) {
                if self.get(x, y) {
                    n += 1;
                }
            }
        }
        n
    }

    pub fn complement(&self) -> Self {
        Self {
            frame: self.frame,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.frame == other.frame && self.bits.iter().zip(&other.bits).all(|(a, b)| !a || *b)
    }

    /// Tight bounding window of the foreground, if any.
    pub fn bounding_window(&self) -> Option<PixelWindow> {
        let mut win: Option<PixelWindow> = None;
        for y in 0..self.frame.height {
            for x in 0..self.frame.width {
                if self.get(x, y) {
                    let w = win.get_or_insert(PixelWindow {
                        x0: x,
                        y0: y,
                        x1: x + 1,
                        y1: y + 1,
                    });
                    w.x0 = w.x0.min(x);
                    w.y0 = w.y0.min(y);
                    w.x1 = w.x1.max(x + 1);
                    w.y1 = w.y1.max(y + 1);
                }
            }
        }
        win
    }

    /// Single-channel PNG with values {0, 255}.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut buf = GrayImage::new(self.frame.width, self.frame.height);
        for (i, px) in buf.pixels_mut().enumerate() {
            *px = Luma([if self.bits[i] { 255 } else { 0 }]);
        }
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let decoded = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8();
        let frame = FrameSize::new(decoded.width(), decoded.height())?;
        let mut bits = Vec::with_capacity(frame.pixel_count());
        for p in decoded.pixels() {
            match p[0] {
                0 => bits.push(false),
                255 => bits.push(true),
                other => return Err(MaskError::NonBinaryPng(other)),
            }
        }
        Ok(Self { frame, bits })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementShape {
    Disk,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StructuringElement {
    pub shape: ElementShape,
    pub radius: u32,
}

impl StructuringElement {
    pub fn disk(radius: u32) -> Self {
        Self {
            shape: ElementShape::Disk,
            radius,
        }
    }

    pub fn square(radius: u32) -> Self {
        Self {
            shape: ElementShape::Square,
            radius,
        }
    }

    pub fn contains(&self, dx: i64, dy: i64) -> bool {
        let r = self.radius as i64;
        match self.shape {
            ElementShape::Disk => dx * dx + dy * dy <= r * r,
            ElementShape::Square => dx.abs() <= r && dy.abs() <= r,
        }
    }

    /// Offsets of the element, row-major. Both shapes are symmetric.
    pub fn offsets(&self) -> Vec<(i64, i64)> {
        let r = self.radius as i64;
        let mut out = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if self.contains(dx, dy) {
                    out.push((dx, dy));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MorphKind {
    Erode,
    Dilate,
    Open,
    Close,
}

pub fn compose_or(masks: &[BinaryMask]) -> Result<BinaryMask> {
    let (first, rest) = masks.split_first().ok_or(MaskError::EmptySequence)?;
    let mut out = first.clone();
    for m in rest {
        out.frame.ensure_same(&m.frame)?;
        for (o, &b) in out.bits.iter_mut().zip(&m.bits) {
            *o |= b;
        }
    }
    Ok(out)
}

pub fn morphology(mask: &BinaryMask, kind: MorphKind, elem: StructuringElement) -> BinaryMask {
    if elem.radius == 0 {
        return mask.clone();
    }
    let offsets = elem.offsets();
    match kind {
        MorphKind::Dilate => dilate_raw(mask, &offsets),
        MorphKind::Erode => erode_raw(mask, &offsets),
        MorphKind::Open => dilate_raw(&erode_raw(mask, &offsets), &offsets),
        MorphKind::Close => {
            // Dilation must be allowed to grow past the frame, otherwise the
            // following erosion eats foreground touching the border.
            let pad = elem.radius;
            let padded = pad_mask(mask, pad);
            let closed = erode_raw(&dilate_raw(&padded, &offsets), &offsets);
            crop_mask(&closed, pad, mask.frame)
        }
    }
}

fn dilate_raw(mask: &BinaryMask, offsets: &[(i64, i64)]) -> BinaryMask {
    let frame = mask.frame;
    let (w, h) = (frame.width as i64, frame.height as i64);
    let mut out = BinaryMask::empty(frame);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x as u32, y as u32) {
                continue;
            }
            for &(dx, dy) in offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx >= 0 && ny >= 0 && nx < w && ny < h {
                    out.set(nx as u32, ny as u32, true);
                }
            }
        }
    }
    out
}

fn erode_raw(mask: &BinaryMask, offsets: &[(i64, i64)]) -> BinaryMask {
    let frame = mask.frame;
    BinaryMask::from_fn(frame, |x, y| {
        offsets
            .iter()
            .all(|&(dx, dy)| mask.get_signed(x as i64 + dx, y as i64 + dy))
    })
}

fn pad_mask(mask: &BinaryMask, pad: u32) -> BinaryMask {
    let frame = FrameSize {
        width: mask.frame.width + 2 * pad,
        height: mask.frame.height + 2 * pad,
    };
    BinaryMask::from_fn(frame, |x, y| {
        mask.get_signed(x as i64 - pad as i64, y as i64 - pad as i64)
    })
}

fn crop_mask(mask: &BinaryMask, pad: u32, frame: FrameSize) -> BinaryMask {
    BinaryMask::from_fn(frame, |x, y| mask.get(x + pad, y + pad))
}

pub fn dilate_for_inpaint(mask: &BinaryMask, radius: u32) -> BinaryMask {
    morphology(mask, MorphKind::Dilate, StructuringElement::disk(radius))
}

/// Open then close with the same element.
pub fn refine(mask: &BinaryMask, elem: StructuringElement) -> BinaryMask {
    let opened = morphology(mask, MorphKind::Open, elem);
    morphology(&opened, MorphKind::Close, elem)
}

/// Source index for target index `t` under center-aligned nearest-neighbor
/// sampling: `floor((t + 0.5) * src / dst)`, computed in integers.
fn nearest_index(t: u32, src: u32, dst: u32) -> u32 {
    let s = ((2 * t as u64 + 1) * src as u64) / (2 * dst as u64);
    s.min(src as u64 - 1) as u32
}

pub fn resize_nearest(mask: &BinaryMask, target: FrameSize) -> BinaryMask {
    if mask.frame == target {
        return mask.clone();
    }
    let src = mask.frame;
    let xs: Vec<u32> = (0..target.width)
        .map(|x| nearest_index(x, src.width, target.width))
        .collect();
    let ys: Vec<u32> = (0..target.height)
        .map(|y| nearest_index(y, src.height, target.height))
        .collect();
    BinaryMask::from_fn(target, |x, y| mask.get(xs[x as usize], ys[y as usize]))
}

/// Nearest-neighbor image resize, sharing the mask sampling grid so
/// resized masks stay aligned with resized images.
pub fn resize_image_nearest(image: &RgbImage, target: FrameSize) -> RgbImage {
    if image.frame == target {
        return image.clone();
    }
    let src = image.frame;
    let mut pixels = Vec::with_capacity(target.pixel_count());
    for y in 0..target.height {
        let sy = nearest_index(y, src.height, target.height);
        for x in 0..target.width {
            let sx = nearest_index(x, src.width, target.width);
            pixels.push(image.get(sx, sy));
        }
    }
    RgbImage {
        frame: target,
        pixels,
    }
}

/// `|a ∧ b| / |a ∨ b|`; two empty masks agree perfectly (1.0).
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.frame.ensure_same(&b.frame)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

pub fn render_overlay(image: &RgbImage, mask: &BinaryMask, color: Rgb, alpha: f32) -> Result<RgbImage> {
    image.frame.ensure_same(&mask.frame)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(MaskError::InvalidAlpha(alpha));
    }
    let mut out = image.clone();
    for (px, &m) in out.pixels.iter_mut().zip(&mask.bits) {
        if m {
            for c in 0..3 {
                px[c] = ((1.0 - alpha) * px[c] + alpha * color[c]).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnotationStyle {
    pub stroke: u32,
    pub color: Rgb,
    pub labels: bool,
}

impl Default for AnnotationStyle {
    fn default() -> Self {
        Self {
            stroke: ANNOTATION_STROKE,
            color: ANNOTATION_COLOR,
            labels: true,
        }
    }
}

/// Pixels painted as the outline of `win`: the band of width `stroke`
/// just inside the window edges.
pub fn outline_contains(win: &PixelWindow, stroke: u32, x: u32, y: u32) -> bool {
    win.contains(x, y)
        && (x < win.x0 + stroke || x + stroke >= win.x1 || y < win.y0 + stroke || y + stroke >= win.y1)
}

/// Window occupied by the score label tab of a box, in the image frame.
///
/// The tab sits above the box when there is room, otherwise just inside
/// its top edge.
pub fn label_tab(win: &PixelWindow, frame: FrameSize, text_len: usize) -> PixelWindow {
    let tab_w = (text_len as u32 * (GLYPH_W + 1) + 1).min(frame.width);
    let tab_h = GLYPH_H + 2;
    let y0 = if win.y0 >= tab_h { win.y0 - tab_h } else { win.y0 };
    let x0 = win.x0.min(frame.width - tab_w);
    PixelWindow {
        x0,
        y0,
        x1: (x0 + tab_w).min(frame.width),
        y1: (y0 + tab_h).min(frame.height),
    }
}

pub fn score_label(score: f64) -> String {
    format!("{score:.2}")
}

pub fn annotate_detections(image: &RgbImage, dets: &[Detection], style: AnnotationStyle) -> Result<RgbImage> {
    let mut out = image.clone();
    for d in dets {
        image.frame.ensure_same(&d.frame())?;
        let win = d.bbox.pixel_window();
        for y in win.y0..win.y1 {
            for x in win.x0..win.x1 {
                if outline_contains(&win, style.stroke, x, y) {
                    out.set(x, y, style.color);
                }
            }
        }
        if style.labels {
            let text = score_label(d.score());
            let tab = label_tab(&win, image.frame, text.len());
            out.fill_rect(tab.x0, tab.y0, tab.x1, tab.y1, style.color);
            draw_text(&mut out, tab.x0 + 1, tab.y0 + 1, &text, [0.0, 0.0, 0.0]);
        }
    }
    Ok(out)
}

const GLYPH_W: u32 = 3;
const GLYPH_H: u32 = 5;

/// 3x5 bitmaps, one row per entry, most significant of the low 3 bits = left.
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        _ => [0; 5],
    }
}

fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, color: Rgb) {
    let frame = img.frame;
    for (i, c) in text.chars().enumerate() {
        let gx = x + i as u32 * (GLYPH_W + 1);
        for (row, bits) in glyph(c).iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits & (1 << (GLYPH_W - 1 - col)) != 0 {
                    let (px, py) = (gx + col, y + row as u32);
                    if px < frame.width && py < frame.height {
                        img.set(px, py, color);
                    }
                }
            }
        }
    }
}

/// Side-by-side panel: original, an 8 px mid-gray gutter, edited.
pub fn before_after(original: &RgbImage, edited: &RgbImage) -> Result<RgbImage> {
    original.frame.ensure_same(&edited.frame)?;
    let (w, h) = (original.frame.width, original.frame.height);
    let frame = FrameSize::new(2 * w + PANEL_GUTTER, h)?;
    let mut out = RgbImage::filled(frame, MID_GRAY);
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, original.get(x, y));
            out.set(x + w + PANEL_GUTTER, y, edited.get(x, y));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PixelBox;

    fn frame(w: u32, h: u32) -> FrameSize {
        FrameSize::new(w, h).unwrap()
    }

    #[test]
    fn compose_or_identity_and_errors() {
        let f = frame(6, 6);
        let m = BinaryMask::rect(f, 1, 1, 4, 3);
        assert_eq!(compose_or(&[m.clone(), BinaryMask::empty(f)]).unwrap(), m);
        assert!(matches!(compose_or(&[]), Err(MaskError::EmptySequence)));
        assert!(compose_or(&[m, BinaryMask::empty(frame(6, 5))]).is_err());
    }

    #[test]
    fn compose_or_union_count() {
        let f = frame(20, 20);
        let a = BinaryMask::rect(f, 0, 0, 10, 10);
        let b = BinaryMask::rect(f, 5, 5, 15, 15);
        let u = compose_or(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(u, compose_or(&[b, a]).unwrap());
        // 100 + 100 - 25
        assert_eq!(u.count(), 175);
    }

    #[test]
    fn dilate_empty_is_empty() {
        let f = frame(8, 8);
        let e = BinaryMask::empty(f);
        assert_eq!(morphology(&e, MorphKind::Dilate, StructuringElement::disk(2)), e);
    }

    #[test]
    fn open_removes_isolated_pixel() {
        let f = frame(5, 5);
        let m = BinaryMask::rect(f, 2, 2, 3, 3);
        let opened = morphology(&m, MorphKind::Open, StructuringElement::square(1));
        assert!(opened.is_empty());
    }

    #[test]
    fn close_fills_single_hole() {
        let f = frame(5, 5);
        let mut m = BinaryMask::full(f);
        m.set(2, 2, false);
        let closed = morphology(&m, MorphKind::Close, StructuringElement::square(1));
        assert_eq!(closed, BinaryMask::full(f));
    }

    #[test]
    fn inpaint_dilation_of_single_pixel_is_plus() {
        let f = frame(5, 5);
        let m = BinaryMask::rect(f, 2, 2, 3, 3);
        assert_eq!(dilate_for_inpaint(&m, 0), m);
        let d = dilate_for_inpaint(&m, 1);
        assert_eq!(d.count(), 5);
        for (x, y) in [(2, 2), (1, 2), (3, 2), (2, 1), (2, 3)] {
            assert!(d.get(x, y));
        }
    }

    #[test]
    fn refine_with_square_preserves_rectangles() {
        let f = frame(40, 40);
        for m in [
            BinaryMask::rect(f, 5, 7, 20, 30),
            BinaryMask::rect(f, 0, 0, 12, 9),
            BinaryMask::rect(f, 30, 25, 40, 40),
        ] {
            assert_eq!(refine(&m, StructuringElement::square(1)), m);
        }
    }

    #[test]
    fn resize_identity_and_block_upscale() {
        let f = frame(2, 2);
        let m = BinaryMask::from_bits(f, vec![true, false, false, true]).unwrap();
        assert_eq!(resize_nearest(&m, f), m);
        let up = resize_nearest(&m, frame(4, 4));
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(up.get(x, y), m.get(x / 2, y / 2), "({x},{y})");
            }
        }
    }

    #[test]
    fn mask_iou_cases() {
        let f = frame(10, 10);
        let full = BinaryMask::full(f);
        let half = BinaryMask::rect(f, 0, 0, 10, 5);
        assert_eq!(mask_iou(&full, &full).unwrap(), 1.0);
        assert_eq!(mask_iou(&full, &half).unwrap(), 0.5);
        let other = BinaryMask::rect(f, 0, 5, 10, 10);
        assert_eq!(mask_iou(&half, &other).unwrap(), 0.0);
        let e = BinaryMask::empty(f);
        assert_eq!(mask_iou(&e, &e).unwrap(), 1.0);
        assert_eq!(mask_iou(&e, &half).unwrap(), 0.0);
        assert!(mask_iou(&e, &BinaryMask::empty(frame(9, 10))).is_err());
    }

    #[test]
    fn overlay_blend() {
        let f = frame(2, 1);
        let img = RgbImage::filled(f, [0.2, 0.2, 0.2]);
        let mask = BinaryMask::from_bits(f, vec![true, false]).unwrap();
        let color = [0.8, 0.8, 0.8];
        assert_eq!(render_overlay(&img, &mask, color, 0.0).unwrap(), img);
        let full = render_overlay(&img, &mask, color, 1.0).unwrap();
        assert_eq!(full.get(0, 0), color);
        assert_eq!(full.get(1, 0), img.get(1, 0));
        let half = render_overlay(&img, &mask, color, 0.5).unwrap();
        for c in half.get(0, 0) {
            assert!((c - 0.5).abs() < 1e-6);
        }
        assert!(render_overlay(&img, &mask, color, 1.5).is_err());
    }

    #[test]
    fn annotate_changes_exactly_outline_pixels() {
        let f = frame(40, 30);
        let img = RgbImage::filled(f, MID_GRAY);
        assert_eq!(annotate_detections(&img, &[], AnnotationStyle::default()).unwrap(), img);

        let b = PixelBox::new(f, 10.0, 8.0, 25.0, 20.0).unwrap();
        let d = Detection::new(b, 0.9, "red").unwrap();
        let style = AnnotationStyle {
            labels: false,
            ..AnnotationStyle::default()
        };
        let out = annotate_detections(&img, std::slice::from_ref(&d), style).unwrap();
        // independent enumeration of the 2 px band inside [10,25) x [8,20)
        let mut expected = 0;
        for y in 0..30u32 {
            for x in 0..40u32 {
                let inside = (10..25).contains(&x) && (8..20).contains(&y);
                let band = inside && (x <= 11 || x >= 23 || y <= 9 || y >= 18);
                assert_eq!(out.get(x, y) != img.get(x, y), band, "({x},{y})");
                expected += band as usize;
            }
        }
        assert_eq!(expected, 15 * 12 - 11 * 8);
        let twice = annotate_detections(&out, &[d], style).unwrap();
        assert_eq!(twice, out);
    }

    #[test]
    fn annotate_labels_stay_in_tab() {
        let f = frame(64, 64);
        let img = RgbImage::filled(f, MID_GRAY);
        let b = PixelBox::new(f, 20.0, 20.0, 50.0, 40.0).unwrap();
        let d = Detection::new(b, 0.5, "red").unwrap();
        let out = annotate_detections(&img, std::slice::from_ref(&d), AnnotationStyle::default()).unwrap();
        let win = b.pixel_window();
        let tab = label_tab(&win, f, score_label(0.5).len());
        assert_eq!(tab.y1, win.y0);
        for y in 0..64 {
            for x in 0..64 {
                if out.get(x, y) != img.get(x, y) {
                    assert!(outline_contains(&win, 2, x, y) || tab.contains(x, y));
                }
            }
        }
    }

    #[test]
    fn before_after_layout() {
        let f = frame(7, 4);
        let a = RgbImage::filled(f, [0.1, 0.2, 0.3]);
        let b = RgbImage::filled(f, [0.9, 0.8, 0.7]);
        let c = before_after(&a, &b).unwrap();
        assert_eq!(c.frame(), frame(2 * 7 + 8, 4));
        for y in 0..4 {
            for x in 0..7 {
                assert_eq!(c.get(x, y), a.get(x, y));
                assert_eq!(c.get(x + 15, y), b.get(x, y));
            }
            for x in 7..15 {
                assert_eq!(c.get(x, y), MID_GRAY);
            }
        }
        assert!(before_after(&a, &RgbImage::filled(frame(4, 7), MID_GRAY)).is_err());
    }

    #[test]
    fn png_round_trips() {
        let f = frame(5, 3);
        let m = BinaryMask::rect(f, 1, 0, 4, 2);
        let bytes = m.to_png().unwrap();
        assert_eq!(BinaryMask::from_png(&bytes).unwrap(), m);

        let img = RgbImage::from_pixels(
            f,
            (0..15).map(|i| [i as f32 / 15.0, 0.5, 1.0]).collect(),
        )
        .unwrap();
        let back = RgbImage::from_png(&img.to_png().unwrap()).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn rgb_image_rejects_out_of_range() {
        let f = frame(1, 1);
        assert!(RgbImage::from_pixels(f, vec![[1.1, 0.0, 0.0]]).is_err());
        assert!(RgbImage::from_pixels(f, vec![]).is_err());
    }
}
