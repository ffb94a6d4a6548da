//! Tracking fixtures and a direct, loop-based correlation reference.

use ptrack::backend::{Roi, CHANNELS};
use ptrack::belief::{AppearanceModel, Frame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_frame(seed: u64, w: usize, h: usize) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Frame::new(0, w, h, (0..w * h).map(|_| rng.random::<f32>()).collect())
}

pub fn random_filter(seed: u64, size: (u32, u32)) -> AppearanceModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (size.0 * size.1) as usize * CHANNELS;
    AppearanceModel::from_filter(size, CHANNELS, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Intensity plus central-difference gradients with edge clamping.
pub fn features(frame: &Frame, r: usize, c: usize) -> [f64; 3] {
    let (w, h) = (frame.width(), frame.height());
    let p = |r: usize, c: usize| frame.get(r, c) as f64;
    let gx = (p(r, (c + 1).min(w - 1)) - p(r, c.saturating_sub(1))) / 2.0;
    let gy = (p((r + 1).min(h - 1), c) - p(r.saturating_sub(1), c)) / 2.0;
    [p(r, c), gx, gy]
}

/// Score of the filter on the patch centered at (row, col): the patch with
/// its intensity mean removed, scaled to unit norm, dotted with the filter.
pub fn naive_score(frame: &Frame, theta: &AppearanceModel, row: usize, col: usize) -> f64 {
    let (fh, fw) = (theta.filter_h(), theta.filter_w());
    let (top, left) = (row - fh / 2, col - fw / 2);
    let mut x = Vec::new();
    for r in 0..fh {
        for c in 0..fw {
            x.extend(features(frame, top + r, left + c));
        }
    }
    let n = (fh * fw) as f64;
    let mean = x.iter().step_by(3).sum::<f64>() / n;
    for v in x.iter_mut().step_by(3) {
        *v -= mean;
    }
    let norm_sq: f64 = x.iter().map(|v| v * v).sum();
    if norm_sq < 1e-12 {
        return 0.0;
    }
    let dot: f64 = x.iter().zip(theta.filter()).map(|(a, b)| a * b).sum();
    dot / norm_sq.sqrt()
}

/// Heatmap over a whole frame: clipped scores inside the ROI, zero outside.
pub fn naive_heatmap(frame: &Frame, theta: &AppearanceModel, roi: Roi) -> Vec<f64> {
    let w = frame.width();
    let mut out = vec![0.0; w * frame.height()];
    for r in roi.top..roi.top + roi.height {
        for c in roi.left..roi.left + roi.width {
            out[r * w + c] = naive_score(frame, theta, r, c).max(0.0);
        }
    }
    out
}

/// Largest relative deviation, with small references floored at 1e-6.
pub fn max_rel_err(got: &[f32], want: &[f64]) -> f64 {
    got.iter()
        .zip(want)
        .map(|(&g, &w)| (g as f64 - w).abs() / w.abs().max(1e-6))
        .fold(0.0, f64::max)
}
