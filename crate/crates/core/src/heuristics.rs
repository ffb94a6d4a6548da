//! Action oracles: the online baseline rule and the ground-truth-aware
//! offline labels used for supervision and Q initialization.

use crate::backend::{clamp_center, normalized_patch, FeatureMap};
use crate::belief::{Action, Appearance, AppearanceModel, Motion};
use crate::geometry::{iou, BoundingBox, Cell, IOU_CORRECT};
use crate::heatmap::Heatmap;
use crate::sim::GtFrame;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Always TRACK; UPDATE iff the previous heatmap's peak reaches `tau`.
pub fn online_action(h_prev: &Heatmap, tau: f64) -> Action {
    let appearance = if h_prev.max() as f64 >= tau {
        Appearance::Update
    } else {
        Appearance::Ignore
    };
    Action::new(Motion::Track, appearance)
}

/// What the motion label is when the target is not visible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvisibleMotion {
    /// Emit no label.
    #[default]
    Skip,
    Reinit,
}

/// TRACK iff the heatmap's peak box overlaps the visible target with
/// IoU >= 0.5; `None` means no label.
pub fn offline_motion_label(
    h: &Heatmap,
    gt: &GtFrame,
    target_size: (u32, u32),
    invisible: InvisibleMotion,
) -> Option<Motion> {
    match gt.visible_box() {
        Some(truth) => {
            if iou(&h.extract_box(target_size), &truth) >= IOU_CORRECT {
                Some(Motion::Track)
            } else {
                Some(Motion::Reinit)
            }
        }
        None => match invisible {
            InvisibleMotion::Skip => None,
            InvisibleMotion::Reinit => Some(Motion::Reinit),
        },
    }
}

/// Normalized patches a later UPDATE decision is judged against: the
/// target's true location and the strongest heatmap location that misses
/// it. Both are absent when the target is not visible.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Evidence {
    pub z_gt: Option<Vec<f32>>,
    pub z_wrong: Option<Vec<f32>>,
}

impl Evidence {
    pub fn visible(&self) -> bool {
        self.z_gt.is_some()
    }
}

/// Strongest positive heatmap cell whose box has IoU < 0.5 with `truth`.
pub fn strongest_wrong_cell(h: &Heatmap, truth: &BoundingBox, target_size: (u32, u32)) -> Option<Cell> {
    let mut best: Option<(f32, Cell)> = None;
    for (i, &s) in h.scores().iter().enumerate() {
        if s <= 0.0 || best.is_some_and(|(b, _)| s <= b) {
            continue;
        }
        let cell = Cell::new(i / h.width(), i % h.width());
        if iou(&BoundingBox::centered_at(cell, target_size), truth) < IOU_CORRECT {
            best = Some((s, cell));
        }
    }
    best.map(|(_, c)| c)
}

pub fn frame_evidence(fm: &FeatureMap, h: &Heatmap, gt: &GtFrame, target_size: (u32, u32)) -> Evidence {
    let Some(truth) = gt.visible_box() else {
        return Evidence::default();
    };
    let to_f32 = |z: Vec<f64>| z.into_iter().map(|v| v as f32).collect::<Vec<_>>();
    let (r, c) = truth.center();
    let gt_cell = clamp_center(
        Cell::new(r.max(0) as usize, c.max(0) as usize),
        fm.width(),
        fm.height(),
        target_size,
    );
    let z_gt = to_f32(normalized_patch(fm, gt_cell, target_size));
    let z_wrong = strongest_wrong_cell(h, &truth, target_size).map(|cell| {
        let cell = clamp_center(cell, fm.width(), fm.height(), target_size);
        to_f32(normalized_patch(fm, cell, target_size))
    });
    Evidence {
        z_gt: Some(z_gt),
        z_wrong,
    }
}

fn dot(theta: &[f64], z: &[f32]) -> f64 {
    theta.iter().zip(z).map(|(a, &b)| a * b as f64).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateLabel {
    pub label: Appearance,
    pub delta_plus: usize,
    pub delta_minus: usize,
    /// Visible lookahead frames actually examined.
    pub n: usize,
}

/// The Δ⁺/Δ⁻ decision rule: UPDATE iff `delta_plus + delta_minus > n / 2`.
pub fn update_rule(delta_plus: usize, delta_minus: usize, n: usize) -> Appearance {
    if n > 0 && 2 * (delta_plus + delta_minus) > n {
        Appearance::Update
    } else {
        Appearance::Ignore
    }
}

/// Compares the filter before (`theta`) and after (`theta_updated`) a
/// candidate update over the first `lookahead` visible frames of
/// `future`: Δ⁺ counts frames where the true location scores higher,
/// Δ⁻ frames where the strongest wrong location scores lower.
pub fn offline_update_label(
    theta: &AppearanceModel,
    theta_updated: &AppearanceModel,
    future: &[Evidence],
    lookahead: usize,
) -> UpdateLabel {
    let (mut dp, mut dm, mut n) = (0, 0, 0);
    for ev in future.iter().filter(|e| e.visible()).take(lookahead) {
        n += 1;
        let z = ev.z_gt.as_ref().unwrap();
        if dot(theta_updated.filter(), z) > dot(theta.filter(), z) {
            dp += 1;
        }
        if let Some(w) = &ev.z_wrong {
            if dot(theta_updated.filter(), w) < dot(theta.filter(), w) {
                dm += 1;
            }
        }
    }
    UpdateLabel {
        label: update_rule(dp, dm, n),
        delta_plus: dp,
        delta_minus: dm,
        n,
    }
}

/// Discounted return of an always-correct future: Σ_{k<remaining} γ^k,
/// with `None` meaning an unbounded horizon.
pub fn discounted_horizon(remaining: Option<u64>, gamma: f64) -> f64 {
    assert!((0.0..1.0).contains(&gamma), "gamma must lie in [0, 1)");
    match remaining {
        None => 1.0 / (1.0 - gamma),
        Some(r) => {
            if gamma == 0.0 {
                return if r > 0 { 1.0 } else { 0.0 };
            }
            (1.0 - gamma.powf(r as f64)) / (1.0 - gamma)
        }
    }
}

/// Per-axis supervised Q targets: the discounted horizon where the axis of
/// `a` matches `a_star`, else 0.
pub fn q_init_target(a: Action, a_star: Action, remaining: Option<u64>, gamma: f64) -> (f64, f64) {
    let g = discounted_horizon(remaining, gamma);
    (
        if a.motion == a_star.motion { g } else { 0.0 },
        if a.appearance == a_star.appearance {
            g
        } else {
            0.0
        },
    )
}

/// One line of a label dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub episode_id: u64,
    pub frame: usize,
    /// `None` serializes as `"SKIP"`.
    #[serde(with = "motion_or_skip")]
    pub motion_label: Option<Motion>,
    pub appearance_label: Appearance,
    pub delta_plus: usize,
    pub delta_minus: usize,
    pub n: usize,
}

mod motion_or_skip {
    use crate::belief::Motion;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Option<Motion>, s: S) -> Result<S::Ok, S::Error> {
        match m {
            Some(m) => m.serialize(s),
            None => s.serialize_str("SKIP"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Motion>, D::Error> {
        let s = String::deserialize(d)?;
        match s.as_str() {
            "SKIP" => Ok(None),
            "TRACK" => Ok(Some(Motion::Track)),
            "REINIT" => Ok(Some(Motion::Reinit)),
            other => Err(serde::de::Error::custom(format!("unknown motion label {other}"))),
        }
    }
}

pub fn write_label_dump<W: Write>(mut w: W, records: &[LabelRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(bbox: BoundingBox, occluded: bool) -> GtFrame {
        GtFrame {
            index: 0,
            bbox: Some(bbox),
            occluded,
            cut_here: false,
            partial: false,
        }
    }

    #[test]
    fn online_rule() {
        let mut h = Heatmap::zeros(8, 8);
        h.set(Cell::new(2, 2), 0.9);
        let a = online_action(&h, 0.5);
        assert_eq!(a, Action::new(Motion::Track, Appearance::Update));
        h.set(Cell::new(2, 2), 0.1);
        assert_eq!(online_action(&h, 0.5).appearance, Appearance::Ignore);
        h.set(Cell::new(2, 2), 0.5);
        assert_eq!(online_action(&h, 0.5).appearance, Appearance::Update);
    }

    #[test]
    fn motion_labels() {
        let truth = BoundingBox::new(10, 10, 10, 10);
        // peak box shifted by 2 columns: IoU = 80/120
        let h = Heatmap::delta(64, 64, Cell::new(15, 17));
        assert!(iou(&h.extract_box((10, 10)), &truth) > 0.6);
        let skip = InvisibleMotion::Skip;
        assert_eq!(offline_motion_label(&h, &gt(truth, false), (10, 10), skip), Some(Motion::Track));
        let far = Heatmap::delta(64, 64, Cell::new(50, 50));
        assert_eq!(offline_motion_label(&far, &gt(truth, false), (10, 10), skip), Some(Motion::Reinit));
        assert_eq!(offline_motion_label(&h, &gt(truth, true), (10, 10), skip), None);
        assert_eq!(
            offline_motion_label(&h, &gt(truth, true), (10, 10), InvisibleMotion::Reinit),
            Some(Motion::Reinit)
        );
    }

    #[test]
    fn update_rule_is_strict() {
        assert_eq!(update_rule(20, 0, 30), Appearance::Update);
        assert_eq!(update_rule(10, 5, 30), Appearance::Ignore);
        assert_eq!(update_rule(0, 0, 0), Appearance::Ignore);
        let theta = AppearanceModel::zeros((3, 3), 3);
        assert_eq!(offline_update_label(&theta, &theta, &[], 30).label, Appearance::Ignore);
    }

    #[test]
    fn q_init_examples() {
        let a = Action::new(Motion::Track, Appearance::Update);
        let b = Action::new(Motion::Reinit, Appearance::Update);
        assert_eq!(q_init_target(a, a, None, 0.95).0, 1.0 / (1.0 - 0.95));
        let (m, u) = q_init_target(a, b, Some(3), 0.95);
        assert_eq!(m, 0.0);
        assert!((u - 2.8525).abs() < 1e-12);
    }

    #[test]
    fn label_dump_format() {
        let r = LabelRecord {
            episode_id: 3,
            frame: 50,
            motion_label: None,
            appearance_label: Appearance::Ignore,
            delta_plus: 4,
            delta_minus: 1,
            n: 30,
        };
        let mut buf = Vec::new();
        write_label_dump(&mut buf, std::slice::from_ref(&r)).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert!(line.contains("\"motion_label\":\"SKIP\""));
        let back: LabelRecord = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(back, r);
    }
}
