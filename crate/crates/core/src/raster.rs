//! Class-indexed 2D rasters shared by map generation, observation
//! simulation and evaluation.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;

/// Number of semantic classes, including background.
pub const NUM_CLASSES: usize = 7;

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_DRIVABLE: u8 = 1;
pub const CLASS_CROSSING: u8 = 2;
pub const CLASS_WALKWAY: u8 = 3;
pub const CLASS_STOP_LINE: u8 = 4;
pub const CLASS_CARPARK: u8 = 5;
pub const CLASS_DIVIDER: u8 = 6;

/// Display names, indexed by class code.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "background",
    "drivable_area",
    "pedestrian_crossing",
    "walkway",
    "stop_line",
    "carpark_area",
    "divider",
];

/// Fixed RGB palette, indexed by class code. Shared by every image file
/// the project writes.
pub const CLASS_PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [40, 40, 40],
    [128, 128, 140],
    [245, 245, 245],
    [205, 170, 125],
    [230, 60, 60],
    [100, 150, 210],
    [250, 210, 70],
];

/// A class-indexed raster with square pixels of `resolution` meters.
///
/// Row 0 is the north edge; rows grow southward, columns eastward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticRaster {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    pub classes: Vec<u8>,
}

impl SemanticRaster {
    /// All-background raster.
    pub fn filled(width: usize, height: usize, resolution: f64) -> Self {
        Self {
            width,
            height,
            resolution,
            classes: vec![CLASS_BACKGROUND; width * height],
        }
    }

    pub fn from_classes(width: usize, height: usize, resolution: f64, classes: Vec<u8>) -> Self {
        assert_eq!(classes.len(), width * height);
        debug_assert!(classes.iter().all(|&c| (c as usize) < NUM_CLASSES));
        Self { width, height, resolution, classes }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.classes[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, class: u8) {
        debug_assert!((class as usize) < NUM_CLASSES);
        self.classes[row * self.width + col] = class;
    }

    #[inline]
    pub fn in_bounds(&self, row: i64, col: i64) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.height && (col as usize) < self.width
    }

    pub fn count_class(&self, class: u8) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }

    /// Fraction of pixels holding `class`.
    pub fn class_fraction(&self, class: u8) -> f64 {
        self.count_class(class) as f64 / self.classes.len() as f64
    }

    /// FNV-1a hash of the full raster content and geometry.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x1_0000_01b3);
        };
        for b in (self.width as u64).to_le_bytes() {
            eat(b);
        }
        for b in (self.height as u64).to_le_bytes() {
            eat(b);
        }
        for b in self.resolution.to_le_bytes() {
            eat(b);
        }
        for &c in &self.classes {
            eat(c);
        }
        h
    }

    /// The raster as if its content were re-rendered with the viewer's
    /// heading increased by `delta` radians (content appears rotated
    /// clockwise by `delta` in image coordinates). Pixels sampled from
    /// outside the source become background.
    pub fn rotated_by(&self, delta: f64) -> SemanticRaster {
        let (s, c) = math::rot_components(delta);
        if s == 0.0 && c == 1.0 {
            return self.clone();
        }
        let cu = self.width as f64 / 2.0;
        let cv = self.height as f64 / 2.0;
        let mut out = SemanticRaster::filled(self.width, self.height, self.resolution);
        for i in 0..self.height {
            let v = i as f64 + 0.5 - cv;
            for j in 0..self.width {
                let u = j as f64 + 0.5 - cu;
                // Image-coordinate rotation by -delta maps output pixels
                // onto their source.
                let su = c * u + s * v + cu;
                let sv = -s * u + c * v + cv;
                let (sr, sc) = (math::floor(sv) as i64, math::floor(su) as i64);
                if self.in_bounds(sr, sc) {
                    out.set(i, j, self.get(sr as usize, sc as usize));
                }
            }
        }
        out
    }

    /// Per-pixel indicator of class boundaries: 1 where the pixel differs
    /// from any existing 4-neighbor. Symmetric under raster rotation.
    pub fn boundary_indicator(&self) -> Vec<u8> {
        let (w, h) = (self.width, self.height);
        let mut out = vec![0u8; w * h];
        for i in 0..h {
            for j in 0..w {
                let c = self.get(i, j);
                let differs = (i > 0 && self.get(i - 1, j) != c)
                    || (i + 1 < h && self.get(i + 1, j) != c)
                    || (j > 0 && self.get(i, j - 1) != c)
                    || (j + 1 < w && self.get(i, j + 1) != c);
                if differs {
                    out[i * w + j] = 1;
                }
            }
        }
        out
    }

    /// Size of the largest 4-connected component of `class`, as a fraction
    /// of all pixels of that class. Returns 1.0 when the class is absent.
    pub fn largest_component_fraction(&self, class: u8) -> f64 {
        let total = self.count_class(class);
        if total == 0 {
            return 1.0;
        }
        let (w, h) = (self.width, self.height);
        let mut seen = vec![false; w * h];
        let mut largest = 0usize;
        let mut stack: Vec<usize> = Vec::new();
        for start in 0..w * h {
            if seen[start] || self.classes[start] != class {
                continue;
            }
            let mut size = 0usize;
            stack.push(start);
            seen[start] = true;
            while let Some(p) = stack.pop() {
                size += 1;
                let (r, c) = (p / w, p % w);
                let mut push = |rr: usize, cc: usize, stack: &mut Vec<usize>| {
                    let q = rr * w + cc;
                    if !seen[q] && self.classes[q] == class {
                        seen[q] = true;
                        stack.push(q);
                    }
                };
                if r > 0 {
                    push(r - 1, c, &mut stack);
                }
                if r + 1 < h {
                    push(r + 1, c, &mut stack);
                }
                if c > 0 {
                    push(r, c - 1, &mut stack);
                }
                if c + 1 < w {
                    push(r, c + 1, &mut stack);
                }
            }
            largest = largest.max(size);
        }
        largest as f64 / total as f64
    }
}

/// Per-class intersection-over-union between two equally sized rasters.
/// `None` for classes absent from both.
pub fn per_class_iou(a: &SemanticRaster, b: &SemanticRaster) -> [Option<f64>; NUM_CLASSES] {
    assert_eq!(a.classes.len(), b.classes.len(), "raster size mismatch");
    let mut inter = [0usize; NUM_CLASSES];
    let mut union = [0usize; NUM_CLASSES];
    for (&ca, &cb) in a.classes.iter().zip(&b.classes) {
        if ca == cb {
            inter[ca as usize] += 1;
            union[ca as usize] += 1;
        } else {
            union[ca as usize] += 1;
            union[cb as usize] += 1;
        }
    }
    let mut out = [None; NUM_CLASSES];
    for k in 0..NUM_CLASSES {
        if union[k] > 0 {
            out[k] = Some(inter[k] as f64 / union[k] as f64);
        }
    }
    out
}

/// Mean IoU over the six foreground classes present in either raster.
///
/// This is the single IoU definition used everywhere: degradation
/// calibration and evaluation share it bit for bit.
pub fn mean_iou(a: &SemanticRaster, b: &SemanticRaster) -> Option<f64> {
    let per = per_class_iou(a, b);
    let mut sum = 0.0;
    let mut n = 0usize;
    for iou in per.iter().skip(1).flatten() {
        sum += iou;
        n += 1;
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;

    fn checkerboard(side: usize) -> SemanticRaster {
        let mut r = SemanticRaster::filled(side, side, 0.5);
        for i in 0..side {
            for j in 0..side {
                if (i / 4 + j / 4) % 2 == 0 {
                    r.set(i, j, CLASS_DRIVABLE);
                }
            }
        }
        r
    }

    #[test]
    fn iou_identical_rasters_is_one() {
        let r = checkerboard(32);
        assert_eq!(mean_iou(&r, &r), Some(1.0));
    }

    #[test]
    fn iou_disjoint_classes_is_zero() {
        let mut a = SemanticRaster::filled(8, 8, 0.5);
        let mut b = SemanticRaster::filled(8, 8, 0.5);
        for j in 0..8 {
            a.set(0, j, CLASS_DRIVABLE);
            b.set(1, j, CLASS_DRIVABLE);
        }
        let per = per_class_iou(&a, &b);
        assert_eq!(per[CLASS_DRIVABLE as usize], Some(0.0));
        assert_eq!(per[CLASS_CROSSING as usize], None);
    }

    #[test]
    fn iou_half_overlap() {
        let mut a = SemanticRaster::filled(4, 4, 0.5);
        let mut b = SemanticRaster::filled(4, 4, 0.5);
        // a marks rows 0-1, b marks rows 1-2: intersection 4, union 12.
        for j in 0..4 {
            a.set(0, j, CLASS_DRIVABLE);
            a.set(1, j, CLASS_DRIVABLE);
            b.set(1, j, CLASS_DRIVABLE);
            b.set(2, j, CLASS_DRIVABLE);
        }
        let per = per_class_iou(&a, &b);
        assert!((per[1].unwrap() - 4.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_by_zero_is_identity() {
        let r = checkerboard(32);
        assert_eq!(r.rotated_by(0.0), r);
    }

    #[test]
    fn rotation_by_pi_flips_indices() {
        let r = checkerboard(32);
        let rot = r.rotated_by(PI);
        for i in 0..32 {
            for j in 0..32 {
                assert_eq!(rot.get(i, j), r.get(31 - i, 31 - j));
            }
        }
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let r = checkerboard(32);
        let mut out = r.clone();
        for _ in 0..4 {
            out = out.rotated_by(PI / 2.0);
        }
        assert_eq!(out, r);
    }

    #[test]
    fn content_hash_tracks_content() {
        let a = checkerboard(16);
        let mut b = a.clone();
        assert_eq!(a.content_hash(), b.content_hash());
        b.set(3, 3, CLASS_DIVIDER);
        assert_ne!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn component_fraction_detects_split() {
        let mut r = SemanticRaster::filled(9, 9, 0.5);
        for i in 0..9 {
            for j in 0..4 {
                r.set(i, j, CLASS_DRIVABLE);
            }
            for j in 5..9 {
                r.set(i, j, CLASS_DRIVABLE);
            }
        }
        let frac = r.largest_component_fraction(CLASS_DRIVABLE);
        assert!((frac - 0.5).abs() < 1e-12);
        // Bridge the gap.
        r.set(4, 4, CLASS_DRIVABLE);
        assert!(r.largest_component_fraction(CLASS_DRIVABLE) > 0.99);
    }

    #[test]
    fn boundary_indicator_marks_edges_only() {
        let mut r = SemanticRaster::filled(8, 8, 0.5);
        for i in 2..6 {
            for j in 2..6 {
                r.set(i, j, CLASS_DRIVABLE);
            }
        }
        let b = r.boundary_indicator();
        // Interior of the square is not boundary.
        assert_eq!(b[4 * 8 + 4], 0);
        // Square rim is boundary, as is the background ring around it.
        assert_eq!(b[2 * 8 + 2], 1);
        assert_eq!(b[8 + 2], 1);
        // Far corner untouched.
        assert_eq!(b[0], 0);
    }
}
