//! Reference implementations written from first principles, with no
//! dependency on the library under test. Tests compare production code
//! against these on random inputs.

use std::path::{Path, PathBuf};

/// SHA-256 straight from the FIPS 180-4 definition.
pub fn sha256(data: &[u8]) -> [u8; 32] {
    const K: [u32; 64] = [
        0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4, 0xab1c5ed5, 0xd807aa98,
        0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe, 0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786,
        0x0fc19dc6, 0x240ca1cc, 0x2de92c6f, 0x4a7484aa, 0x5cb0a9dc, 0x76f988da, 0x983e5152, 0xa831c66d, 0xb00327c8,
        0xbf597fc7, 0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc, 0x53380d13,
        0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b, 0xc24b8b70, 0xc76c51a3, 0xd192e819,
        0xd6990624, 0xf40e3585, 0x106aa070, 0x19a4c116, 0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a,
        0x5b9cca4f, 0x682e6ff3, 0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7,
        0xc67178f2,
    ];
    let mut h: [u32; 8] = [
        0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a, 0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19,
    ];
    let mut msg = data.to_vec();
    let bit_len = (data.len() as u64).wrapping_mul(8);
    msg.push(0x80);
    while msg.len() % 64 != 56 {
        msg.push(0);
    }
    msg.extend_from_slice(&bit_len.to_be_bytes());

    for chunk in msg.chunks(64) {
        let mut w = [0u32; 64];
        for i in 0..16 {
            w[i] = u32::from_be_bytes([chunk[4 * i], chunk[4 * i + 1], chunk[4 * i + 2], chunk[4 * i + 3]]);
        }
        for i in 16..64 {
            let s0 = w[i - 15].rotate_right(7) ^ w[i - 15].rotate_right(18) ^ (w[i - 15] >> 3);
            let s1 = w[i - 2].rotate_right(17) ^ w[i - 2].rotate_right(19) ^ (w[i - 2] >> 10);
            w[i] = w[i - 16].wrapping_add(s0).wrapping_add(w[i - 7]).wrapping_add(s1);
        }
        let [mut a, mut b, mut c, mut d, mut e, mut f, mut g, mut hh] = h;
        for i in 0..64 {
            let s1 = e.rotate_right(6) ^ e.rotate_right(11) ^ e.rotate_right(25);
            let ch = (e & f) ^ (!e & g);
            let t1 = hh.wrapping_add(s1).wrapping_add(ch).wrapping_add(K[i]).wrapping_add(w[i]);
            let s0 = a.rotate_right(2) ^ a.rotate_right(13) ^ a.rotate_right(22);
            let maj = (a & b) ^ (a & c) ^ (b & c);
            let t2 = s0.wrapping_add(maj);
            hh = g;
            g = f;
            f = e;
            e = d.wrapping_add(t1);
            d = c;
            c = b;
            b = a;
            a = t1.wrapping_add(t2);
        }
        for (slot, v) in h.iter_mut().zip([a, b, c, d, e, f, g, hh]) {
            *slot = slot.wrapping_add(v);
        }
    }
    let mut out = [0u8; 32];
    for (i, word) in h.iter().enumerate() {
        out[4 * i..4 * i + 4].copy_from_slice(&word.to_be_bytes());
    }
    out
}

pub fn sha256_hex(data: &[u8]) -> String {
    sha256(data).iter().map(|b| format!("{b:02x}")).collect()
}

/// Axis-aligned box `(x_min, y_min, x_max, y_max)`.
pub type Rect = (f64, f64, f64, f64);

pub fn rect_iou(a: Rect, b: Rect) -> f64 {
    let iw = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let ih = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = iw * ih;
    let area = |r: Rect| (r.2 - r.0) * (r.3 - r.1);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy non-maximum suppression, quadratic. Returns kept input indices
/// in output order. Equal scores keep input order.
pub fn greedy_nms(boxes: &[(Rect, f64)], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    // insertion sort by score descending, stable
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && boxes[order[j]].1 > boxes[order[j - 1]].1 {
            order.swap(j, j - 1);
            j -= 1;
        }
    }
    let mut suppressed = vec![false; boxes.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order[pos + 1..] {
            if rect_iou(boxes[i].0, boxes[j].0) > threshold {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// Pixel-count area of the intersection of two integer rectangles, by
/// enumeration.
pub fn grid_overlap(a: (i64, i64, i64, i64), b: (i64, i64, i64, i64)) -> (usize, usize) {
    let (x0, y0) = (a.0.min(b.0), a.1.min(b.1));
    let (x1, y1) = (a.2.max(b.2), a.3.max(b.3));
    let inside = |r: (i64, i64, i64, i64), x: i64, y: i64| x >= r.0 && x < r.2 && y >= r.1 && y < r.3;
    let (mut inter, mut union) = (0, 0);
    for y in y0..y1 {
        for x in x0..x1 {
            let (p, q) = (inside(a, x, y), inside(b, x, y));
            inter += (p && q) as usize;
            union += (p || q) as usize;
        }
    }
    (inter, union)
}

/// A raster of booleans, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Grid {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width * height);
        Self { width, height, bits }
    }

    /// Membership on the whole integer plane; outside the raster is false.
    pub fn at(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.bits[y as usize * self.width + x as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Erode,
    Dilate,
    Open,
    Close,
}

pub fn element(shape: Shape, r: i64) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let inside = match shape {
                Shape::Disk => dx * dx + dy * dy <= r * r,
                Shape::Square => true,
            };
            if inside {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Set morphology on the integer plane, evaluated at `(x, y)`. The input
/// set is the raster's foreground; nothing outside the raster belongs.
pub fn morph_at(m: &Grid, op: Op, elem: &[(i64, i64)], x: i64, y: i64) -> bool {
    let dilated = |x: i64, y: i64| elem.iter().any(|(dx, dy)| m.at(x - dx, y - dy));
    let eroded = |x: i64, y: i64| elem.iter().all(|(dx, dy)| m.at(x + dx, y + dy));
    match op {
        Op::Dilate => dilated(x, y),
        Op::Erode => eroded(x, y),
        Op::Open => elem.iter().any(|(dx, dy)| eroded(x - dx, y - dy)),
        Op::Close => elem.iter().all(|(dx, dy)| dilated(x + dx, y + dy)),
    }
}

/// [`morph_at`] over every raster pixel.
pub fn morph(m: &Grid, op: Op, shape: Shape, r: i64) -> Grid {
    let elem = element(shape, r);
    let mut bits = Vec::with_capacity(m.bits.len());
    for y in 0..m.height as i64 {
        for x in 0..m.width as i64 {
            bits.push(morph_at(m, op, &elem, x, y));
        }
    }
    Grid::new(m.width, m.height, bits)
}

pub fn grid_iou(a: &Grid, b: &Grid) -> f64 {
    let inter = a.bits.iter().zip(&b.bits).filter(|(p, q)| **p && **q).count();
    let union = a.bits.iter().zip(&b.bits).filter(|(p, q)| **p || **q).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Closed-form normal-approximation interval, clamped to `[0, 1]`.
pub fn normal_interval(k: u64, n: u64, z: f64) -> (f64, f64) {
    let p = k as f64 / n as f64;
    let half = z * (p * (1.0 - p) / n as f64).sqrt();
    ((p - half).max(0.0), (p + half).min(1.0))
}

/// Every regular file below `root`.
pub fn walk_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = std::fs::read_dir(&dir) else { continue };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.is_file() {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

/// Files below `root` whose bytes contain `needle`.
pub fn files_containing(root: &Path, needle: &[u8]) -> Vec<PathBuf> {
    assert!(!needle.is_empty());
    walk_files(root)
        .into_iter()
        .filter(|p| {
            std::fs::read(p)
                .map(|bytes| bytes.windows(needle.len()).any(|w| w == needle))
                .unwrap_or(false)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vectors() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(
            sha256_hex(b"abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq"),
            "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1"
        );
    }

    #[test]
    fn nms_oracle_basics() {
        let a = ((0.0, 0.0, 10.0, 10.0), 0.9);
        let b = ((1.0, 0.0, 11.0, 10.0), 0.7);
        let c = ((50.0, 50.0, 60.0, 60.0), 0.8);
        assert_eq!(greedy_nms(&[b, a, c], 0.5), vec![1, 2]);
    }

    #[test]
    fn morph_oracle_single_pixel() {
        let mut bits = vec![false; 25];
        bits[12] = true;
        let g = Grid::new(5, 5, bits);
        assert_eq!(morph(&g, Op::Dilate, Shape::Disk, 1).count(), 5);
        assert_eq!(morph(&g, Op::Open, Shape::Square, 1).count(), 0);
    }
}
