//! Per-pixel target-location score grids.

use crate::geometry::{BoundingBox, Cell};
use serde::{Deserialize, Serialize};

/// Non-negative score grid, row-major, with the frame's dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    width: usize,
    height: usize,
    scores: Vec<f32>,
}

impl Heatmap {
    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "heatmap must be non-empty");
        Self {
            width,
            height,
            scores: vec![0.0; width * height],
        }
    }

    /// Panics when the length does not match or a score is negative or
    /// non-finite.
    pub fn from_scores(width: usize, height: usize, scores: Vec<f32>) -> Self {
        assert!(width > 0 && height > 0, "heatmap must be non-empty");
        assert_eq!(scores.len(), width * height, "heatmap size mismatch");
        assert!(
            scores.iter().all(|s| s.is_finite() && *s >= 0.0),
            "heatmap scores must be finite and non-negative"
        );
        Self {
            width,
            height,
            scores,
        }
    }

    /// A single unit of mass at `cell`.
    pub fn delta(width: usize, height: usize, cell: Cell) -> Self {
        let mut h = Self::zeros(width, height);
        h.set(cell, 1.0);
        h
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn get(&self, cell: Cell) -> f32 {
        self.scores[cell.row * self.width + cell.col]
    }

    pub fn set(&mut self, cell: Cell, value: f32) {
        assert!(value.is_finite() && value >= 0.0);
        self.scores[cell.row * self.width + cell.col] = value;
    }

    /// Row-major-first maximal cell.
    pub fn argmax(&self) -> Cell {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = i;
            }
        }
        Cell::new(best / self.width, best % self.width)
    }

    pub fn max(&self) -> f32 {
        self.scores.iter().copied().fold(0.0, f32::max)
    }

    pub fn sum(&self) -> f64 {
        self.scores.iter().map(|&s| s as f64).sum()
    }

    /// Box of `target_size` centered at the argmax, clipped to the frame.
    pub fn extract_box(&self, target_size: (u32, u32)) -> BoundingBox {
        extract_box(self, target_size)
    }
}

/// Box of `target_size` centered at the row-major-first maximal cell,
/// intersected with the heatmap's domain.
pub fn extract_box(h: &Heatmap, target_size: (u32, u32)) -> BoundingBox {
    BoundingBox::centered_at(h.argmax(), target_size)
        .clip_to(h.width, h.height)
        .expect("argmax cell lies inside the frame")
}

/// Heatmaps whose mass is already within this distance of 1 are returned
/// unchanged, which makes [`normalize`] exactly idempotent.
pub const NORMALIZED_TOLERANCE: f64 = 1e-5;

/// Rescales to unit mass; an all-zero map becomes uniform.
pub fn normalize(h: &Heatmap) -> Heatmap {
    let total = h.sum();
    if total <= 0.0 {
        let u = 1.0 / (h.width * h.height) as f32;
        return Heatmap {
            width: h.width,
            height: h.height,
            scores: vec![u; h.scores.len()],
        };
    }
    if (total - 1.0).abs() <= NORMALIZED_TOLERANCE {
        return h.clone();
    }
    let scores = h
        .scores
        .iter()
        .map(|&s| (s as f64 / total) as f32)
        .collect();
    Heatmap {
        width: h.width,
        height: h.height,
        scores,
    }
}

/// Mass-conserving area-weighted resampling of a row-major grid.
///
/// Every source cell is treated as a unit square whose mass is split among
/// the destination cells it overlaps, in proportion to the overlap.
pub fn resample_area(
    src: &[f32],
    src_w: usize,
    src_h: usize,
    dst_w: usize,
    dst_h: usize,
) -> Vec<f32> {
    assert_eq!(src.len(), src_w * src_h);
    let cols = axis_weights(src_w, dst_w);
    let rows = axis_weights(src_h, dst_h);
    let mut tmp = vec![0f64; src_h * dst_w];
    for r in 0..src_h {
        let row = &src[r * src_w..(r + 1) * src_w];
        let out = &mut tmp[r * dst_w..(r + 1) * dst_w];
        for (c, &v) in row.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            for &(d, w) in &cols[c] {
                out[d] += v as f64 * w;
            }
        }
    }
    let mut dst = vec![0f64; dst_w * dst_h];
    for r in 0..src_h {
        for &(d, w) in &rows[r] {
            let src_row = &tmp[r * dst_w..(r + 1) * dst_w];
            let dst_row = &mut dst[d * dst_w..(d + 1) * dst_w];
            for (o, &v) in dst_row.iter_mut().zip(src_row) {
                *o += v * w;
            }
        }
    }
    dst.into_iter().map(|v| v as f32).collect()
}

/// For each source index, the destination indices it overlaps and the
/// fraction of its mass going to each.
fn axis_weights(src_len: usize, dst_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = dst_len as f64 / src_len as f64;
    (0..src_len)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = ((hi.ceil() as usize).max(first + 1)).min(dst_len);
            (first..last)
                .filter_map(|d| {
                    let overlap = hi.min((d + 1) as f64) - lo.max(d as f64);
                    (overlap > 0.0).then(|| (d, overlap / scale))
                })
                .collect()
        })
        .collect()
}
