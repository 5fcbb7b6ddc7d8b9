//! The synthetic scene world the mock backends understand: a mid-gray
//! background with axis-aligned rectangles in pure primary colors.

use serde::{Deserialize, Serialize};

use crate::geometry::FrameSize;
use crate::maskops::{BinaryMask, Rgb, RgbImage, MID_GRAY};

pub const BACKGROUND: Rgb = MID_GRAY;

/// Per-channel distance within which a pixel counts as a fixture color.
pub const COLOR_TOLERANCE: f32 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixtureColor {
    Red,
    Green,
    Blue,
    Yellow,
}

impl FixtureColor {
    pub const ALL: [FixtureColor; 4] = [Self::Red, Self::Green, Self::Blue, Self::Yellow];

    pub fn rgb(self) -> Rgb {
        match self {
            Self::Red => [1.0, 0.0, 0.0],
            Self::Green => [0.0, 1.0, 0.0],
            Self::Blue => [0.0, 0.0, 1.0],
            Self::Yellow => [1.0, 1.0, 0.0],
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Self::Red => "red",
            Self::Green => "green",
            Self::Blue => "blue",
            Self::Yellow => "yellow",
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == word)
    }

    /// First color word appearing in free text, case-insensitively.
    pub fn find_in(text: &str) -> Option<Self> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .find_map(|t| Self::from_word(&t.to_lowercase()))
    }

    pub fn classify(pixel: Rgb) -> Option<Self> {
        Self::ALL.into_iter().find(|c| {
            let target = c.rgb();
            (0..3).all(|i| (pixel[i] - target[i]).abs() <= COLOR_TOLERANCE)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureRect {
    pub color: FixtureColor,
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl FixtureRect {
    pub fn new(color: FixtureColor, x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { color, x0, y0, x1, y1 }
    }

    pub fn area(&self) -> u64 {
        (self.x1.saturating_sub(self.x0)) as u64 * (self.y1.saturating_sub(self.y0)) as u64
    }
}

/// A scene description. Later rectangles paint over earlier ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureScene {
    pub frame: FrameSize,
    pub rects: Vec<FixtureRect>,
}

impl FixtureScene {
    pub fn new(frame: FrameSize) -> Self {
        Self {
            frame,
            rects: Vec::new(),
        }
    }

    pub fn with(mut self, rect: FixtureRect) -> Self {
        self.rects.push(rect);
        self
    }

    pub fn render(&self) -> RgbImage {
        let mut img = RgbImage::filled(self.frame, BACKGROUND);
        for r in &self.rects {
            img.fill_rect(r.x0, r.y0, r.x1, r.y1, r.color.rgb());
        }
        img
    }

    /// Ground-truth mask of the visible pixels of rectangle `index`.
    pub fn truth_mask(&self, index: usize) -> BinaryMask {
        let target = self.rects[index];
        let mut m = BinaryMask::rect(self.frame, target.x0, target.y0, target.x1, target.y1);
        for r in &self.rects[index + 1..] {
            for y in r.y0..r.y1.min(self.frame.height) {
                for x in r.x0..r.x1.min(self.frame.width) {
                    m.set(x, y, false);
                }
            }
        }
        m
    }

    /// Union of every visible pixel of `color`.
    pub fn color_mask(&self, color: FixtureColor) -> BinaryMask {
        let img = self.render();
        BinaryMask::from_fn(self.frame, |x, y| FixtureColor::classify(img.get(x, y)) == Some(color))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn color_words_and_classification() {
        assert_eq!(FixtureColor::find_in("a Red car in front"), Some(FixtureColor::Red));
        assert_eq!(FixtureColor::find_in("reddish"), None);
        assert_eq!(FixtureColor::find_in("dog"), None);
        assert_eq!(FixtureColor::classify(BACKGROUND), None);
        assert_eq!(FixtureColor::classify([0.9, 0.95, 0.1]), Some(FixtureColor::Yellow));
        assert_eq!(FixtureColor::classify([1.0, 0.0, 0.0]), Some(FixtureColor::Red));
    }

    #[test]
    fn truth_mask_excludes_occluders() {
        let f = FrameSize::new(20, 20).unwrap();
        let scene = FixtureScene::new(f)
            .with(FixtureRect::new(FixtureColor::Red, 0, 0, 10, 10))
            .with(FixtureRect::new(FixtureColor::Blue, 5, 5, 15, 15));
        assert_eq!(scene.truth_mask(0).count(), 75);
        assert_eq!(scene.truth_mask(1).count(), 100);
        assert_eq!(scene.color_mask(FixtureColor::Red), scene.truth_mask(0));
    }
}
