//! Correlation-filter tracking primitives: TRACK, REINIT and UPDATE.
//!
//! Frames are lifted to a three-channel feature map (intensity plus central
//! difference gradients). A filter scores a placement by correlating with
//! the mean-centred, unit-normalised patch under it, so scores are
//! comparable across illumination changes and a perfectly matching filter
//! scores 1 on its own patch.
//!
//! Placements are restricted to centers whose patch lies fully inside the
//! frame. The search region (ROI) is a fixed-size square of such centers,
//! shifted to stay inside the valid range, so every call evaluates the
//! same number of placements.

use crate::belief::{Action, Appearance, AppearanceModel, Belief, Frame, Motion};
use crate::geometry::{iou, BoundingBox, Cell};
use crate::heatmap::Heatmap;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const CHANNELS: usize = 3;

/// Squared patch norms below this score 0 (flat patches carry no signal).
pub const MIN_NORM_SQ: f64 = 1e-12;

/// Negatives must overlap the positive box by less than this.
pub const NEG_MAX_IOU: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// ROI side as a multiple of the larger target side.
    pub roi_ratio: f64,
    pub n_neg: usize,
    pub eta_app: f64,
    pub update_iters: usize,
    /// Reports abstain when the heatmap maximum is below this.
    pub report_threshold: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            roi_ratio: 3.0,
            n_neg: 8,
            eta_app: 0.05,
            update_iters: 10,
            report_threshold: 0.2,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("backend config: {0}")]
    Invalid(String),
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.roi_ratio.is_finite() && self.roi_ratio > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "roi_ratio must be positive, got {}",
                self.roi_ratio
            )));
        }
        if !(self.eta_app.is_finite() && self.eta_app >= 0.0) {
            return Err(ConfigError::Invalid(format!(
                "eta_app must be >= 0, got {}",
                self.eta_app
            )));
        }
        if !self.report_threshold.is_finite() {
            return Err(ConfigError::Invalid("report_threshold must be finite".into()));
        }
        Ok(())
    }
}

/// Number of filter placements evaluated by one TRACK or REINIT call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub candidates_evaluated: usize,
}

/// Per-pixel features, row-major with channels interleaved, plus integral
/// images for constant-time patch statistics.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
    /// (H+1)x(W+1) integral of the intensity channel.
    sum0: Vec<f64>,
    /// (H+1)x(W+1) integral of the squared feature vector.
    sumsq: Vec<f64>,
}

impl FeatureMap {
    pub fn from_frame(frame: &Frame) -> Self {
        let (w, h) = (frame.width(), frame.height());
        let px = |r: usize, c: usize| frame.get(r, c) as f64;
        let mut data = vec![0f64; w * h * CHANNELS];
        for r in 0..h {
            for c in 0..w {
                let gx = (px(r, (c + 1).min(w - 1)) - px(r, c.saturating_sub(1))) / 2.0;
                let gy = (px((r + 1).min(h - 1), c) - px(r.saturating_sub(1), c)) / 2.0;
                let o = (r * w + c) * CHANNELS;
                data[o] = px(r, c);
                data[o + 1] = gx;
                data[o + 2] = gy;
            }
        }
        let stride = w + 1;
        let mut sum0 = vec![0f64; (h + 1) * stride];
        let mut sumsq = vec![0f64; (h + 1) * stride];
        for r in 0..h {
            let (mut row0, mut rowsq) = (0.0, 0.0);
            for c in 0..w {
                let o = (r * w + c) * CHANNELS;
                let v = &data[o..o + CHANNELS];
                row0 += v[0];
                rowsq += v.iter().map(|x| x * x).sum::<f64>();
                sum0[(r + 1) * stride + c + 1] = sum0[r * stride + c + 1] + row0;
                sumsq[(r + 1) * stride + c + 1] = sumsq[r * stride + c + 1] + rowsq;
            }
        }
        Self {
            width: w,
            height: h,
            data,
            sum0,
            sumsq,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Feature vector of pixel (row, col).
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let o = (row * self.width + col) * CHANNELS;
        &self.data[o..o + CHANNELS]
    }

    fn rect(table: &[f64], stride: usize, top: usize, left: usize, h: usize, w: usize) -> f64 {
        let (b, r) = (top + h, left + w);
        table[b * stride + r] - table[top * stride + r] - table[b * stride + left]
            + table[top * stride + left]
    }

    /// Intensity mean and centred norm of the patch with top-left `(top, left)`.
    fn patch_stats(&self, top: usize, left: usize, ph: usize, pw: usize) -> (f64, f64) {
        let s = self.width + 1;
        let n = (ph * pw) as f64;
        let s0 = Self::rect(&self.sum0, s, top, left, ph, pw);
        let sq = Self::rect(&self.sumsq, s, top, left, ph, pw);
        let mu = s0 / n;
        let norm_sq = (sq - n * mu * mu).max(0.0);
        (mu, norm_sq)
    }
}

/// Inclusive range of centers whose `size` patch lies inside the frame, as
/// ((row_min, row_max), (col_min, col_max)); `None` if the target does not
/// fit.
pub fn valid_centers(
    frame_w: usize,
    frame_h: usize,
    size: (u32, u32),
) -> Option<((usize, usize), (usize, usize))> {
    let (w, h) = (size.0 as usize, size.1 as usize);
    if w > frame_w || h > frame_h {
        return None;
    }
    Some(((h / 2, frame_h - h + h / 2), (w / 2, frame_w - w + w / 2)))
}

/// Clamps a cell into the valid center range.
pub fn clamp_center(cell: Cell, frame_w: usize, frame_h: usize, size: (u32, u32)) -> Cell {
    let ((r0, r1), (c0, c1)) = valid_centers(frame_w, frame_h, size).expect("target fits frame");
    Cell::new(cell.row.clamp(r0, r1), cell.col.clamp(c0, c1))
}

/// A rectangle of candidate centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Roi {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Roi {
    pub fn placements(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, cell: Cell) -> bool {
        cell.row >= self.top
            && cell.row < self.top + self.height
            && cell.col >= self.left
            && cell.col < self.left + self.width
    }

    pub fn center(&self) -> Cell {
        Cell::new(self.top + self.height / 2, self.left + self.width / 2)
    }
}

/// ROI side in placements for a target size.
pub fn roi_side(cfg: &TrackerConfig, size: (u32, u32)) -> usize {
    ((cfg.roi_ratio * size.0.max(size.1) as f64).ceil() as usize).max(1)
}

fn roi_axis(center: usize, side: usize, lo: usize, hi: usize) -> (usize, usize) {
    let span = hi - lo + 1;
    if side >= span {
        return (lo, span);
    }
    let start = center.saturating_sub(side / 2).clamp(lo, hi + 1 - side);
    (start, side)
}

/// ROI of the configured side centered (as nearly as the frame allows) at
/// `center`.
pub fn roi_at(
    center: Cell,
    cfg: &TrackerConfig,
    size: (u32, u32),
    frame_w: usize,
    frame_h: usize,
) -> Roi {
    let ((r0, r1), (c0, c1)) = valid_centers(frame_w, frame_h, size).expect("target fits frame");
    let side = roi_side(cfg, size);
    let (top, height) = roi_axis(center.row, side, r0, r1);
    let (left, width) = roi_axis(center.col, side, c0, c1);
    Roi {
        top,
        left,
        height,
        width,
    }
}

/// Inclusive range of ROI centers (row, col) for which the ROI is not
/// shifted; REINIT draws uniformly from it.
pub fn roi_center_range(
    cfg: &TrackerConfig,
    size: (u32, u32),
    frame_w: usize,
    frame_h: usize,
) -> ((usize, usize), (usize, usize)) {
    let ((r0, r1), (c0, c1)) = valid_centers(frame_w, frame_h, size).expect("target fits frame");
    let side = roi_side(cfg, size);
    let axis = |lo: usize, hi: usize| {
        let span = hi - lo + 1;
        if side >= span {
            let mid = lo + span / 2;
            (mid, mid)
        } else {
            (lo + side / 2, hi + 1 - side + side / 2)
        }
    };
    (axis(r0, r1), axis(c0, c1))
}

/// Filter response at one valid center.
pub fn score_at(theta: &AppearanceModel, fm: &FeatureMap, center: Cell) -> f64 {
    let (fh, fw) = (theta.filter_h(), theta.filter_w());
    let top = center.row - fh / 2;
    let left = center.col - fw / 2;
    let (mu, norm_sq) = fm.patch_stats(top, left, fh, fw);
    if norm_sq < MIN_NORM_SQ {
        return 0.0;
    }
    let filt = theta.filter();
    let row_len = fw * CHANNELS;
    let mut dot = 0.0;
    for r in 0..fh {
        let o = ((top + r) * fm.width + left) * CHANNELS;
        let x = &fm.data[o..o + row_len];
        let f = &filt[r * row_len..(r + 1) * row_len];
        dot += x.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
    }
    let sum_ch0: f64 = filt.iter().step_by(CHANNELS).sum();
    (dot - mu * sum_ch0) / norm_sq.sqrt()
}

/// Mean-centred, unit-norm patch vector at a valid center, in filter
/// layout; all zeros for flat patches.
pub fn normalized_patch(fm: &FeatureMap, center: Cell, size: (u32, u32)) -> Vec<f64> {
    let (pw, ph) = (size.0 as usize, size.1 as usize);
    let top = center.row - ph / 2;
    let left = center.col - pw / 2;
    let (mu, norm_sq) = fm.patch_stats(top, left, ph, pw);
    let mut z = Vec::with_capacity(pw * ph * CHANNELS);
    for r in 0..ph {
        let o = ((top + r) * fm.width + left) * CHANNELS;
        z.extend_from_slice(&fm.data[o..o + pw * CHANNELS]);
    }
    if norm_sq < MIN_NORM_SQ {
        z.fill(0.0);
        return z;
    }
    let inv = 1.0 / norm_sq.sqrt();
    for (k, v) in z.iter_mut().enumerate() {
        if k % CHANNELS == 0 {
            *v -= mu;
        }
        *v *= inv;
    }
    z
}

/// Correlates the filter over every center of `roi`; zero elsewhere.
pub fn correlate_roi(theta: &AppearanceModel, fm: &FeatureMap, roi: Roi) -> Heatmap {
    let mut scores = vec![0f32; fm.width * fm.height];
    for r in roi.top..roi.top + roi.height {
        for c in roi.left..roi.left + roi.width {
            let s = score_at(theta, fm, Cell::new(r, c));
            scores[r * fm.width + c] = s.max(0.0) as f32;
        }
    }
    Heatmap::from_scores(fm.width, fm.height, scores)
}

/// TRACK: search the ROI around the previous heatmap's peak.
pub fn track(
    h_prev: &Heatmap,
    theta: &AppearanceModel,
    frame: &Frame,
    cfg: &TrackerConfig,
) -> (Heatmap, Budget) {
    track_features(h_prev, theta, &FeatureMap::from_frame(frame), cfg)
}

pub fn track_features(
    h_prev: &Heatmap,
    theta: &AppearanceModel,
    fm: &FeatureMap,
    cfg: &TrackerConfig,
) -> (Heatmap, Budget) {
    let roi = roi_at(h_prev.argmax(), cfg, theta.target_size(), fm.width, fm.height);
    (
        correlate_roi(theta, fm, roi),
        Budget {
            candidates_evaluated: roi.placements(),
        },
    )
}

/// Draws a REINIT ROI center uniformly over unshifted ROI centers.
pub fn draw_reinit_center<R: Rng + ?Sized>(
    cfg: &TrackerConfig,
    size: (u32, u32),
    frame_w: usize,
    frame_h: usize,
    rng: &mut R,
) -> Cell {
    let ((r0, r1), (c0, c1)) = roi_center_range(cfg, size, frame_w, frame_h);
    Cell::new(rng.random_range(r0..=r1), rng.random_range(c0..=c1))
}

/// REINIT: search an ROI of the same size at a random location.
pub fn reinit<R: Rng + ?Sized>(
    theta: &AppearanceModel,
    frame: &Frame,
    cfg: &TrackerConfig,
    rng: &mut R,
) -> (Heatmap, Budget) {
    reinit_features(theta, &FeatureMap::from_frame(frame), cfg, rng)
}

pub fn reinit_features<R: Rng + ?Sized>(
    theta: &AppearanceModel,
    fm: &FeatureMap,
    cfg: &TrackerConfig,
    rng: &mut R,
) -> (Heatmap, Budget) {
    let size = theta.target_size();
    let center = draw_reinit_center(cfg, size, fm.width, fm.height, rng);
    let roi = roi_at(center, cfg, size, fm.width, fm.height);
    (
        correlate_roi(theta, fm, roi),
        Budget {
            candidates_evaluated: roi.placements(),
        },
    )
}

/// Boxes of negative examples on a ring around `pos`, each a valid
/// placement with IoU below [`NEG_MAX_IOU`].
pub fn negative_boxes(pos: BoundingBox, n: usize, frame_w: usize, frame_h: usize) -> Vec<BoundingBox> {
    let size = (pos.w() as u32, pos.h() as u32);
    let Some(((r0, r1), (c0, c1))) = valid_centers(frame_w, frame_h, size) else {
        return Vec::new();
    };
    let (pr, pc) = pos.center();
    let base = 0.8 * pos.w().max(pos.h()) as f64;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / n.max(1) as f64;
        let (dy, dx) = (angle.sin(), angle.cos());
        'search: for scale in [1.0, 1.5, 2.0, 3.0, 4.0, 6.0] {
            for sign in [1.0, -1.0] {
                let r = pr + (sign * scale * base * dy).round() as i32;
                let c = pc + (sign * scale * base * dx).round() as i32;
                let r = r.clamp(r0 as i32, r1 as i32);
                let c = c.clamp(c0 as i32, c1 as i32);
                let b = BoundingBox::centered_at(Cell::new(r as usize, c as usize), size);
                if iou(&b, &pos) < NEG_MAX_IOU {
                    out.push(b);
                    break 'search;
                }
            }
        }
    }
    out
}

/// Runs the configured number of gradient steps on
/// `(θ·z_pos − 1)² + Σ (θ·z_neg)²`.
pub fn fit_filter(theta: &AppearanceModel, pos: &[f64], negs: &[Vec<f64>], cfg: &TrackerConfig) -> AppearanceModel {
    let mut f = theta.filter().to_vec();
    let dot = |f: &[f64], z: &[f64]| f.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
    let mut grad = vec![0f64; f.len()];
    for _ in 0..cfg.update_iters {
        grad.fill(0.0);
        let ep = dot(&f, pos) - 1.0;
        for (g, z) in grad.iter_mut().zip(pos) {
            *g += 2.0 * ep * z;
        }
        for neg in negs {
            let en = dot(&f, neg);
            for (g, z) in grad.iter_mut().zip(neg) {
                *g += 2.0 * en * z;
            }
        }
        for (w, g) in f.iter_mut().zip(&grad) {
            *w -= cfg.eta_app * g;
        }
    }
    AppearanceModel::from_filter(theta.target_size(), theta.channels(), f)
}

/// UPDATE: fit the filter to the patch at the heatmap peak against ring
/// negatives. Peaks outside the valid range are clamped into it.
pub fn update_appearance(
    theta: &AppearanceModel,
    h: &Heatmap,
    frame: &Frame,
    cfg: &TrackerConfig,
) -> AppearanceModel {
    update_appearance_features(theta, h, &FeatureMap::from_frame(frame), cfg)
}

pub fn update_appearance_features(
    theta: &AppearanceModel,
    h: &Heatmap,
    fm: &FeatureMap,
    cfg: &TrackerConfig,
) -> AppearanceModel {
    let size = theta.target_size();
    let center = clamp_center(h.argmax(), fm.width, fm.height, size);
    update_at(theta, center, fm, cfg)
}

/// UPDATE with the positive patch at an explicit valid center.
pub fn update_at(theta: &AppearanceModel, center: Cell, fm: &FeatureMap, cfg: &TrackerConfig) -> AppearanceModel {
    let size = theta.target_size();
    let pos_box = BoundingBox::centered_at(center, size);
    let pos = normalized_patch(fm, center, size);
    let negs: Vec<Vec<f64>> = negative_boxes(pos_box, cfg.n_neg, fm.width, fm.height)
        .into_iter()
        .map(|b| {
            let (r, c) = b.center();
            normalized_patch(fm, Cell::new(r as usize, c as usize), size)
        })
        .collect();
    fit_filter(theta, &pos, &negs, cfg)
}

/// One belief step: the motion axis produces the new heatmap, then the
/// appearance axis either refits on it or carries the filter over.
pub fn step_belief<R: Rng + ?Sized>(
    b_prev: &Belief,
    frame: &Frame,
    action: Action,
    cfg: &TrackerConfig,
    rng: &mut R,
) -> Belief {
    step_belief_features(b_prev, &FeatureMap::from_frame(frame), action, cfg, rng).0
}

pub fn step_belief_features<R: Rng + ?Sized>(
    b_prev: &Belief,
    fm: &FeatureMap,
    action: Action,
    cfg: &TrackerConfig,
    rng: &mut R,
) -> (Belief, Budget) {
    let (heatmap, budget) = match action.motion {
        Motion::Track => track_features(&b_prev.heatmap, &b_prev.appearance, fm, cfg),
        Motion::Reinit => reinit_features(&b_prev.appearance, fm, cfg, rng),
    };
    let appearance = match action.appearance {
        Appearance::Update => update_appearance_features(&b_prev.appearance, &heatmap, fm, cfg),
        Appearance::Ignore => b_prev.appearance.clone(),
    };
    (
        Belief {
            appearance,
            heatmap,
        },
        budget,
    )
}

/// Initial belief from a manually drawn box: a delta heatmap at its center
/// and a filter fitted once from zero.
pub fn init_belief(frame: &Frame, init_box: BoundingBox, cfg: &TrackerConfig) -> Belief {
    init_belief_features(&FeatureMap::from_frame(frame), init_box, cfg)
}

pub fn init_belief_features(fm: &FeatureMap, init_box: BoundingBox, cfg: &TrackerConfig) -> Belief {
    let size = (init_box.w() as u32, init_box.h() as u32);
    let (r, c) = init_box.center();
    let cell = clamp_center(
        Cell::new(r.max(0) as usize, c.max(0) as usize),
        fm.width,
        fm.height,
        size,
    );
    let heatmap = Heatmap::delta(fm.width, fm.height, cell);
    let zero = AppearanceModel::zeros(size, CHANNELS);
    let appearance = update_appearance_features(&zero, &heatmap, fm, cfg);
    Belief {
        appearance,
        heatmap,
    }
}

/// Reported box for a heatmap, or `None` (abstain) when its peak is below
/// the report threshold.
pub fn report(h: &Heatmap, size: (u32, u32), cfg: &TrackerConfig) -> Option<BoundingBox> {
    if (h.max() as f64) < cfg.report_threshold {
        None
    } else {
        Some(h.extract_box(size))
    }
}
