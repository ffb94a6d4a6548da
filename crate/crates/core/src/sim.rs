//! Deterministic synthetic streaming-video world.
//!
//! A textured target performs a clipped random walk over a smooth textured
//! background. Distractors share the target's texture (plus fixed noise),
//! occluders hide the target fully or partially, cuts teleport the target
//! and redraw the scene, and illumination and pixel noise vary per frame.
//!
//! All randomness comes from ChaCha8 generators seeded with
//! [`ScenarioSpec::seed`], one stream per concern (see [`streams`]), so an
//! episode is a pure function of its spec on every platform.

use crate::belief::Frame;
use crate::geometry::{iou, BoundingBox, Cell, IOU_CORRECT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// ChaCha stream ids, one per source of randomness.
pub mod streams {
    pub const MOTION: u64 = 1;
    pub const TEXTURE: u64 = 2;
    pub const EVENTS: u64 = 3;
    pub const NOISE: u64 = 4;
}

/// Seed namespaces, so training, evaluation and auxiliary episodes never
/// share a seed.
pub mod seed_tags {
    pub const TRAIN: u64 = 0x7472_6169_6e00;
    pub const EVAL: u64 = 0x6576_616c_0000;
    pub const RECOVERY: u64 = 0x7265_636f_7600;
    pub const AGENT: u64 = 0x6167_656e_7400;
    pub const REPLAY: u64 = 0x7265_706c_6179;
}

/// Mixes a base seed, a namespace tag and an index into a new seed
/// (splitmix64 finalizer).
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(tag)
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error("unknown preset `{0}` (expected short_term or long_term)")]
    UnknownPreset(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("ground truth json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed episode directory: {0}")]
    Malformed(String),
}

/// Parameters of one synthetic episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    /// (height, width) in pixels.
    pub frame_size: (usize, usize),
    pub episode_len: usize,
    /// (width, height) in pixels; both odd.
    pub target_size: (u32, u32),
    /// Per-axis standard deviation of the target's random-walk step.
    pub motion_step_sigma: f64,
    /// Per-frame blend of the target texture towards a fresh texture.
    pub appearance_drift_rate: f64,
    pub n_distractors: usize,
    /// Standard deviation of the fixed noise each distractor adds to the
    /// target texture.
    pub distractor_noise_sigma: f64,
    /// Expected occlusion onsets per 100 frames (full and partial).
    pub occlusion_rate: f64,
    /// Inclusive (min, max) occlusion duration in frames.
    pub occlusion_len: (usize, usize),
    /// Share of occlusion events that cover only 40-80% of the target.
    pub partial_occlusion_share: f64,
    /// Expected cuts per 100 frames.
    pub cut_rate: f64,
    /// Stationary standard deviation of the illumination gain.
    pub illum_sigma: f64,
    pub pixel_noise_sigma: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn height(&self) -> usize {
        self.frame_size.0
    }

    pub fn width(&self) -> usize {
        self.frame_size.1
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_len(mut self, episode_len: usize) -> Self {
        self.episode_len = episode_len;
        self
    }

    fn mean_occlusion_len(&self) -> f64 {
        (self.occlusion_len.0 + self.occlusion_len.1) as f64 / 2.0
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidSpec(m));
        let (tw, th) = (self.target_size.0 as usize, self.target_size.1 as usize);
        if self.episode_len < 2 {
            return bad(format!("episode_len must be >= 2, got {}", self.episode_len));
        }
        if tw == 0 || th == 0 || tw % 2 == 0 || th % 2 == 0 {
            return bad(format!("target sides must be odd and positive, got {tw}x{th}"));
        }
        if tw > self.width() || th > self.height() {
            return bad(format!(
                "target {tw}x{th} does not fit a {}x{} frame",
                self.width(),
                self.height()
            ));
        }
        let rates = [
            ("motion_step_sigma", self.motion_step_sigma),
            ("distractor_noise_sigma", self.distractor_noise_sigma),
            ("occlusion_rate", self.occlusion_rate),
            ("cut_rate", self.cut_rate),
            ("illum_sigma", self.illum_sigma),
            ("pixel_noise_sigma", self.pixel_noise_sigma),
        ];
        for (name, v) in rates {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        for (name, p) in [
            ("appearance_drift_rate", self.appearance_drift_rate),
            ("partial_occlusion_share", self.partial_occlusion_share),
            ("cut_rate / 100", self.cut_rate / 100.0),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        let (lo, hi) = self.occlusion_len;
        if lo == 0 || lo > hi {
            return bad(format!("occlusion_len must satisfy 1 <= min <= max, got {lo}..{hi}"));
        }
        if self.occlusion_rate > 0.0 && 100.0 / self.occlusion_rate - self.mean_occlusion_len() < 1.0
        {
            return bad(format!(
                "occlusion_rate {} leaves no gap between events of mean length {}",
                self.occlusion_rate,
                self.mean_occlusion_len()
            ));
        }
        Ok(())
    }
}

/// Named scenario families.
///
/// * `short_term`: 1,000 frames, slow motion, one distractor, 0.5 occlusions
///   per 100 frames and no cuts.
/// * `long_term`: 5,000 frames, faster motion and drift, two distractors,
///   4 occlusions and 1 cut per 100 frames.
pub fn preset(name: &str) -> Result<ScenarioSpec, SimError> {
    let base = ScenarioSpec {
        frame_size: (128, 128),
        episode_len: 1000,
        target_size: (11, 11),
        motion_step_sigma: 1.0,
        appearance_drift_rate: 0.002,
        n_distractors: 1,
        distractor_noise_sigma: 0.2,
        occlusion_rate: 0.5,
        occlusion_len: (4, 12),
        partial_occlusion_share: 0.3,
        cut_rate: 0.0,
        illum_sigma: 0.05,
        pixel_noise_sigma: 0.02,
        seed: 0,
    };
    match name {
        "short_term" => Ok(base),
        "long_term" => Ok(ScenarioSpec {
            episode_len: 5000,
            motion_step_sigma: 1.5,
            appearance_drift_rate: 0.004,
            n_distractors: 2,
            occlusion_rate: 4.0,
            cut_rate: 1.0,
            illum_sigma: 0.1,
            pixel_noise_sigma: 0.03,
            ..base
        }),
        other => Err(SimError::UnknownPreset(other.to_string())),
    }
}

/// Ground truth of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtFrame {
    #[serde(rename = "i")]
    pub index: usize,
    /// Target box; recorded even while the target is hidden.
    #[serde(rename = "box")]
    pub bbox: Option<BoundingBox>,
    /// The target is fully hidden.
    pub occluded: bool,
    /// The target teleported on this frame.
    #[serde(rename = "cut")]
    pub cut_here: bool,
    /// Part of the target is hidden; it still counts as visible.
    #[serde(default)]
    pub partial: bool,
}

impl GtFrame {
    /// The box a tracker is expected to report, if any.
    pub fn visible_box(&self) -> Option<BoundingBox> {
        if self.occluded {
            None
        } else {
            self.bbox
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub frames: Vec<GtFrame>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Onsets of (full or partial) occlusion events.
    pub fn occlusion_onsets(&self) -> usize {
        let hidden = |f: &GtFrame| f.occluded || f.partial;
        let mut prev = false;
        let mut n = 0;
        for f in &self.frames {
            let h = hidden(f);
            if h && !prev {
                n += 1;
            }
            prev = h;
        }
        n
    }

    pub fn occluded_fraction(&self) -> f64 {
        let n = self.frames.iter().filter(|f| f.occluded).count();
        n as f64 / self.frames.len().max(1) as f64
    }
}

/// A tracker's per-frame output: a box, or abstention.
pub type Report = Option<BoundingBox>;

/// Binary reward: 1 iff a visible target is reported with IoU >= 0.5, or a
/// hidden target is met with abstention.
pub fn oracle_reward(gt: &GroundTruth, i: usize, reported: Report) -> u8 {
    frame_reward(&gt.frames[i], reported)
}

pub fn frame_reward(gt: &GtFrame, reported: Report) -> u8 {
    match (gt.visible_box(), reported) {
        (Some(truth), Some(r)) => u8::from(iou(&truth, &r) >= IOU_CORRECT),
        (None, None) => 1,
        _ => 0,
    }
}

#[derive(Debug, Clone, Copy)]
enum OcclusionKind {
    Full,
    /// Covers `cover` columns or rows of the target from one side.
    Partial { side: u8, cover: usize },
}

#[derive(Debug, Clone, Copy)]
struct Occlusion {
    kind: OcclusionKind,
    gray: f32,
    remaining: usize,
}

#[derive(Debug, Clone)]
struct Distractor {
    center: (i32, i32),
    noise: Vec<f32>,
}

/// Frame-by-frame episode generator; collect it with [`generate_episode`]
/// or stream it to avoid holding a long episode in memory.
pub struct EpisodeStream {
    spec: ScenarioSpec,
    next_index: usize,
    motion_rng: ChaCha8Rng,
    texture_rng: ChaCha8Rng,
    events_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    background: Vec<f32>,
    texture: Vec<f32>,
    drift_goal: Vec<f32>,
    center: (i32, i32),
    distractors: Vec<Distractor>,
    occlusion: Option<Occlusion>,
    gap: usize,
    gain_state: f64,
    bias_state: f64,
}

const DRIFT_GOAL_PERIOD: usize = 50;
const ILLUM_AR: f64 = 0.95;
/// Side of the value-noise lattice cells used for object textures, in pixels.
const TEXTURE_CELL: usize = 2;

impl EpisodeStream {
    pub fn new(spec: ScenarioSpec) -> Result<Self, SimError> {
        spec.validate()?;
        let rng = |stream| {
            let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
            r.set_stream(stream);
            r
        };
        let mut s = Self {
            motion_rng: rng(streams::MOTION),
            texture_rng: rng(streams::TEXTURE),
            events_rng: rng(streams::EVENTS),
            noise_rng: rng(streams::NOISE),
            background: Vec::new(),
            texture: Vec::new(),
            drift_goal: Vec::new(),
            center: (0, 0),
            distractors: Vec::new(),
            occlusion: None,
            gap: 0,
            gain_state: 0.0,
            bias_state: 0.0,
            next_index: 0,
            spec,
        };
        s.background = s.draw_background();
        s.texture = s.draw_texture();
        s.drift_goal = s.draw_texture();
        s.center = s.random_center();
        s.distractors = (0..s.spec.n_distractors)
            .map(|_| {
                let center = s.random_center();
                let n = s.texture.len();
                let sigma = s.spec.distractor_noise_sigma;
                let noise = (0..n)
                    .map(|_| (s.texture_rng.sample::<f64, _>(StandardNormal) * sigma) as f32)
                    .collect();
                Distractor { center, noise }
            })
            .collect();
        s.gap = s.draw_gap();
        Ok(s)
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    /// The initialization box an annotator would draw on frame 0.
    pub fn init_box(&self) -> BoundingBox {
        self.target_box(self.center)
    }

    fn target_box(&self, center: (i32, i32)) -> BoundingBox {
        let (w, h) = self.spec.target_size;
        BoundingBox::centered_at(Cell::new(center.0 as usize, center.1 as usize), (w, h))
    }

    /// Inclusive (row, col) range of centers that keep the target inside.
    fn center_range(&self) -> ((i32, i32), (i32, i32)) {
        let (w, h) = (self.spec.target_size.0 as i32, self.spec.target_size.1 as i32);
        let (fh, fw) = (self.spec.height() as i32, self.spec.width() as i32);
        ((h / 2, fh - h + h / 2), (w / 2, fw - w + w / 2))
    }

    fn random_center(&mut self) -> (i32, i32) {
        let ((r0, r1), (c0, c1)) = self.center_range();
        (
            self.motion_rng.random_range(r0..=r1),
            self.motion_rng.random_range(c0..=c1),
        )
    }

    fn clamp_center(&self, c: (i32, i32)) -> (i32, i32) {
        let ((r0, r1), (c0, c1)) = self.center_range();
        (c.0.clamp(r0, r1), c.1.clamp(c0, c1))
    }

    fn walk(&mut self, c: (i32, i32)) -> (i32, i32) {
        let sigma = self.spec.motion_step_sigma;
        let mut dr = self.motion_rng.sample::<f64, _>(StandardNormal) * sigma;
        let mut dc = self.motion_rng.sample::<f64, _>(StandardNormal) * sigma;
        let norm = (dr * dr + dc * dc).sqrt();
        let cap = 3.0 * sigma;
        if norm > cap {
            dr *= cap / norm;
            dc *= cap / norm;
        }
        self.clamp_center((c.0 + dr.round() as i32, c.1 + dc.round() as i32))
    }

    fn teleport(&mut self) -> (i32, i32) {
        let (fh, fw) = (self.spec.height() as f64, self.spec.width() as f64);
        let min_dist = (fh * fh + fw * fw).sqrt() / 4.0;
        let old = self.center;
        let dist = |c: (i32, i32)| {
            (((c.0 - old.0) as f64).powi(2) + ((c.1 - old.1) as f64).powi(2)).sqrt()
        };
        for _ in 0..1000 {
            let c = self.random_center();
            if dist(c) >= min_dist {
                return c;
            }
        }
        // Fall back to the farthest corner of the valid range.
        let ((r0, r1), (c0, c1)) = self.center_range();
        [(r0, c0), (r0, c1), (r1, c0), (r1, c1)]
            .into_iter()
            .max_by(|a, b| dist(*a).total_cmp(&dist(*b)))
            .unwrap()
    }

    /// Smooth two-octave value noise.
    fn draw_background(&mut self) -> Vec<f32> {
        let (h, w) = (self.spec.height(), self.spec.width());
        let coarse = value_noise(&mut self.texture_rng, w, h, 16);
        let fine = value_noise(&mut self.texture_rng, w, h, 5);
        coarse
            .iter()
            .zip(&fine)
            .map(|(c, f)| (0.25 + 0.5 * c + 0.2 * (f - 0.5)).clamp(0.0, 1.0))
            .collect()
    }

    /// High-contrast blotchy texture, distinct from the smooth background.
    fn draw_texture(&mut self) -> Vec<f32> {
        let (w, h) = (self.spec.target_size.0 as usize, self.spec.target_size.1 as usize);
        value_noise(&mut self.texture_rng, w, h, TEXTURE_CELL)
            .into_iter()
            .map(|v| (0.05 + 0.9 * v).clamp(0.0, 1.0))
            .collect()
    }

    fn draw_gap(&mut self) -> usize {
        if self.spec.occlusion_rate <= 0.0 {
            return usize::MAX;
        }
        // 1 + Geometric(p) with mean 100/rate - mean_len, so that onsets
        // occur at `occlusion_rate` per 100 frames.
        let mean_gap = 100.0 / self.spec.occlusion_rate - self.spec.mean_occlusion_len();
        let extra_mean = (mean_gap - 1.0).max(0.0);
        let p = 1.0 / (extra_mean + 1.0);
        let mut k = 0;
        while self.events_rng.random::<f64>() >= p {
            k += 1;
        }
        1 + k
    }

    fn draw_occlusion(&mut self) -> Occlusion {
        let (lo, hi) = self.spec.occlusion_len;
        let remaining = self.events_rng.random_range(lo..=hi);
        let gray = self.events_rng.random_range(0.25f32..0.75);
        let partial = self.events_rng.random::<f64>() < self.spec.partial_occlusion_share;
        let kind = if partial {
            let side = self.events_rng.random_range(0u8..4);
            let frac = self.events_rng.random_range(0.4f64..=0.8);
            let extent = if side < 2 {
                self.spec.target_size.0
            } else {
                self.spec.target_size.1
            } as f64;
            OcclusionKind::Partial {
                side,
                cover: ((frac * extent).round() as usize).max(1),
            }
        } else {
            OcclusionKind::Full
        };
        Occlusion {
            kind,
            gray,
            remaining,
        }
    }

    fn advance_events(&mut self, index: usize) -> bool {
        let mut cut = false;
        if index > 0 {
            let p_cut = self.spec.cut_rate / 100.0;
            if p_cut > 0.0 && self.events_rng.random::<f64>() < p_cut {
                cut = true;
            }
            if cut {
                self.center = self.teleport();
                self.background = self.draw_background();
                for k in 0..self.distractors.len() {
                    let c = self.random_center();
                    self.distractors[k].center = c;
                }
            } else {
                self.center = self.walk(self.center);
                for k in 0..self.distractors.len() {
                    let c = self.distractors[k].center;
                    let c = self.walk(c);
                    self.distractors[k].center = c;
                }
            }
            if let Some(o) = &mut self.occlusion {
                o.remaining -= 1;
                if o.remaining == 0 {
                    self.occlusion = None;
                    self.gap = self.draw_gap();
                }
            }
        }
        if self.occlusion.is_none() {
            if self.gap == 0 {
                self.occlusion = Some(self.draw_occlusion());
            } else if self.gap != usize::MAX {
                self.gap -= 1;
                if self.gap == 0 && index > 0 {
                    self.occlusion = Some(self.draw_occlusion());
                }
            }
        }
        cut
    }

    fn drift(&mut self, index: usize) {
        let r = self.spec.appearance_drift_rate as f32;
        if r <= 0.0 || index == 0 {
            return;
        }
        if index.is_multiple_of(DRIFT_GOAL_PERIOD) {
            self.drift_goal = self.draw_texture();
        }
        for (t, g) in self.texture.iter_mut().zip(&self.drift_goal) {
            *t = (1.0 - r) * *t + r * g;
        }
    }

    fn paste(&self, img: &mut [f32], center: (i32, i32), extra: Option<&[f32]>) {
        let fw = self.spec.width();
        let (w, h) = (self.spec.target_size.0 as usize, self.spec.target_size.1 as usize);
        let top = center.0 as usize - h / 2;
        let left = center.1 as usize - w / 2;
        for r in 0..h {
            for c in 0..w {
                let mut v = self.texture[r * w + c];
                if let Some(n) = extra {
                    v += n[r * w + c];
                }
                img[(top + r) * fw + left + c] = v.clamp(0.0, 1.0);
            }
        }
    }

    fn render(&mut self, index: usize) -> (Frame, bool, bool) {
        let (fh, fw) = (self.spec.height(), self.spec.width());
        let mut img = self.background.clone();
        for d in &self.distractors {
            self.paste(&mut img, d.center, Some(&d.noise));
        }
        self.paste(&mut img, self.center, None);

        let target = self.target_box(self.center);
        let (mut occluded, mut partial) = (false, false);
        if let Some(o) = self.occlusion {
            let cover = match o.kind {
                OcclusionKind::Full => {
                    occluded = true;
                    BoundingBox::new(target.x() - 2, target.y() - 2, target.w() + 4, target.h() + 4)
                }
                OcclusionKind::Partial { side, cover } => {
                    partial = true;
                    let c = cover as i32;
                    match side {
                        0 => BoundingBox::new(target.x(), target.y(), c, target.h()),
                        1 => BoundingBox::new(target.x() + target.w() - c, target.y(), c, target.h()),
                        2 => BoundingBox::new(target.x(), target.y(), target.w(), c),
                        _ => BoundingBox::new(target.x(), target.y() + target.h() - c, target.w(), c),
                    }
                }
            };
            if let Some(cb) = cover.clip_to(fw, fh) {
                for r in cb.y()..cb.y() + cb.h() {
                    let row = &mut img[r as usize * fw..(r as usize + 1) * fw];
                    row[cb.x() as usize..(cb.x() + cb.w()) as usize].fill(o.gray);
                }
            }
        }

        let innov = (1.0 - ILLUM_AR * ILLUM_AR).sqrt();
        let sigma = self.spec.illum_sigma;
        self.gain_state = ILLUM_AR * self.gain_state
            + innov * sigma * self.noise_rng.sample::<f64, _>(StandardNormal);
        self.bias_state = ILLUM_AR * self.bias_state
            + innov * 0.5 * sigma * self.noise_rng.sample::<f64, _>(StandardNormal);
        let gain = (1.0 + self.gain_state) as f32;
        let bias = self.bias_state as f32;
        let noise = self.spec.pixel_noise_sigma;
        for p in img.iter_mut() {
            let n = if noise > 0.0 {
                (self.noise_rng.sample::<f64, _>(StandardNormal) * noise) as f32
            } else {
                0.0
            };
            *p = (gain * *p + bias + n).clamp(0.0, 1.0);
        }
        (Frame::new(index, fw, fh, img), occluded, partial)
    }
}

impl Iterator for EpisodeStream {
    type Item = (Frame, GtFrame);

    fn next(&mut self) -> Option<Self::Item> {
        let index = self.next_index;
        if index >= self.spec.episode_len {
            return None;
        }
        self.next_index += 1;
        let cut = self.advance_events(index);
        self.drift(index);
        let (frame, occluded, partial) = self.render(index);
        let gt = GtFrame {
            index,
            bbox: Some(self.target_box(self.center)),
            occluded,
            cut_here: cut,
            partial,
        };
        Some((frame, gt))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.spec.episode_len - self.next_index;
        (n, Some(n))
    }
}

/// A fully materialized episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub frames: Vec<Frame>,
    pub ground_truth: GroundTruth,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn init_box(&self) -> Option<BoundingBox> {
        self.ground_truth.frames.first().and_then(|g| g.bbox)
    }
}

pub fn generate_episode(spec: &ScenarioSpec) -> Result<Episode, SimError> {
    let (frames, gts): (Vec<_>, Vec<_>) = EpisodeStream::new(spec.clone())?.unzip();
    Ok(Episode {
        frames,
        ground_truth: GroundTruth { frames: gts },
    })
}

/// Bilinearly interpolated random lattice with spacing `cell`, in `[0, 1]`.
fn value_noise(rng: &mut ChaCha8Rng, w: usize, h: usize, cell: usize) -> Vec<f32> {
    let gw = w / cell + 2;
    let gh = h / cell + 2;
    let grid: Vec<f32> = (0..gw * gh).map(|_| rng.random::<f32>()).collect();
    let mut out = vec![0f32; w * h];
    for r in 0..h {
        let gy = r as f32 / cell as f32;
        let (y0, ty) = (gy.floor() as usize, gy.fract());
        for c in 0..w {
            let gx = c as f32 / cell as f32;
            let (x0, tx) = (gx.floor() as usize, gx.fract());
            let g = |y: usize, x: usize| grid[y * gw + x];
            let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
            let bot = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
            out[r * w + c] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

const GT_FILE: &str = "ground_truth.json";

fn frame_file(i: usize) -> String {
    format!("frame_{i:06}.png")
}

fn gray_image(f: &Frame) -> image::GrayImage {
    let bytes: Vec<u8> = f.pixels().iter().map(|&p| to_u8(p)).collect();
    image::GrayImage::from_raw(f.width() as u32, f.height() as u32, bytes).expect("frame buffer matches its dimensions")
}

/// The frame as an 8-bit grayscale PNG.
pub fn frame_png(f: &Frame) -> Result<Vec<u8>, SimError> {
    let mut out = std::io::Cursor::new(Vec::new());
    gray_image(f).write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Writes 8-bit grayscale PNG frames plus `ground_truth.json` into `dir`.
pub fn export_episode(dir: &Path, episode: &Episode) -> Result<(), SimError> {
    std::fs::create_dir_all(dir)?;
    for f in &episode.frames {
        gray_image(f).save(dir.join(frame_file(f.index)))?;
    }
    let json = serde_json::to_vec_pretty(&episode.ground_truth)?;
    std::fs::write(dir.join(GT_FILE), json)?;
    Ok(())
}

pub fn to_u8(p: f32) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads an episode written by [`export_episode`] (or recorded elsewhere in
/// the same layout).
pub fn import_episode(dir: &Path) -> Result<Episode, SimError> {
    let gt: GroundTruth = serde_json::from_slice(&std::fs::read(dir.join(GT_FILE))?)?;
    let mut frames = Vec::with_capacity(gt.len());
    for (k, g) in gt.frames.iter().enumerate() {
        if g.index != k {
            return Err(SimError::Malformed(format!(
                "ground truth entry {k} has index {}",
                g.index
            )));
        }
        let img = image::open(dir.join(frame_file(k)))?.to_luma8();
        let (w, h) = img.dimensions();
        let pixels = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
        frames.push(Frame::new(k, w as usize, h as usize, pixels));
    }
    if let Some(f) = frames.first() {
        let (w, h) = (f.width(), f.height());
        if frames.iter().any(|g| g.width() != w || g.height() != h) {
            return Err(SimError::Malformed("frame sizes differ".into()));
        }
    }
    Ok(Episode {
        frames,
        ground_truth: gt,
    })
}
