//! Precision/recall/F1, the ablation ladder and reinit recovery statistics.

use crate::backend::{FeatureMap, TrackerConfig};
use crate::belief::{Action, Appearance, Motion};
use crate::geometry::{iou, BoundingBox, IOU_CORRECT};
use crate::learn::{Agent, AppearancePolicy, LearnError, MotionPolicy, Policy};
use crate::par::{self, Execution};
use crate::qnet::QNet;
use crate::sim::{derive_seed, preset, seed_tags, EpisodeStream, GroundTruth, ScenarioSpec};
use serde::{Deserialize, Serialize};
use std::io::Write;

fn correct(report: &Option<BoundingBox>, truth: Option<BoundingBox>) -> bool {
    match (report, truth) {
        (Some(r), Some(t)) => iou(r, &t) >= IOU_CORRECT,
        _ => false,
    }
}

/// Precision over non-abstaining reports and recall over frames with a
/// visible target. Empty denominators give 0.
pub fn precision_recall(reports: &[Option<BoundingBox>], gt: &GroundTruth) -> (f64, f64) {
    precision_recall_with(reports, gt, false)
}

/// As [`precision_recall`]; with `include_occluded` the recall denominator
/// also counts frames whose target is fully hidden.
pub fn precision_recall_with(reports: &[Option<BoundingBox>], gt: &GroundTruth, include_occluded: bool) -> (f64, f64) {
    assert_eq!(reports.len(), gt.len(), "reports and ground truth must be aligned");
    let (mut hits, mut reported, mut positives) = (0usize, 0usize, 0usize);
    for (r, g) in reports.iter().zip(&gt.frames) {
        let truth = g.visible_box();
        if r.is_some() {
            reported += 1;
        }
        if truth.is_some() || (include_occluded && g.bbox.is_some()) {
            positives += 1;
        }
        if correct(r, truth) {
            hits += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (ratio(hits, reported), ratio(hits, positives))
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Held-out episodes: seeds are derived under a tag no training run uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub preset: String,
    pub episodes: usize,
    pub episode_len: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            preset: "long_term".into(),
            episodes: 16,
            episode_len: 5000,
            seed: 0,
        }
    }
}

impl SuiteConfig {
    pub fn specs(&self) -> Result<Vec<ScenarioSpec>, LearnError> {
        let base = preset(&self.preset)?;
        Ok((0..self.episodes)
            .map(|k| {
                base.clone()
                    .with_seed(derive_seed(self.seed, seed_tags::EVAL, k as u64))
                    .with_len(self.episode_len)
            })
            .collect())
    }
}

/// A named policy of the ablation ladder.
#[derive(Debug, Clone, Copy)]
pub struct Rung<'n> {
    pub name: &'static str,
    pub policy: Policy,
    pub net: Option<&'n QNet>,
}

pub const ONLINE: &str = "online";
pub const OFFLINE_MOTION: &str = "offline_motion";
pub const OFFLINE_APPEARANCE: &str = "offline_appearance";
pub const OFFLINE_BOTH: &str = "offline_both";
pub const Q_LEARNED: &str = "q_learned";

/// The five rungs: the online rule, a supervised classifier on the
/// offline labels driving motion, appearance or both (the other axis
/// falls back to the online rule), and the Q-learned network.
pub fn ladder<'n>(classifier: &'n QNet, q_net: &'n QNet, tau: f64) -> Vec<Rung<'n>> {
    let p = |motion, appearance| Policy {
        motion,
        appearance,
        tau,
    };
    vec![
        Rung {
            name: ONLINE,
            policy: Policy::online(tau),
            net: None,
        },
        Rung {
            name: OFFLINE_MOTION,
            policy: p(MotionPolicy::Net, AppearancePolicy::Online),
            net: Some(classifier),
        },
        Rung {
            name: OFFLINE_APPEARANCE,
            policy: p(MotionPolicy::Online, AppearancePolicy::Net),
            net: Some(classifier),
        },
        Rung {
            name: OFFLINE_BOTH,
            policy: p(MotionPolicy::Net, AppearancePolicy::Net),
            net: Some(classifier),
        },
        Rung {
            name: Q_LEARNED,
            policy: Policy::net(),
            net: Some(q_net),
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub policy: String,
    pub episode: usize,
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

/// IGNORE choices split by whether the target was fully hidden.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IgnoreCounts {
    pub occluded_ignore: u64,
    pub occluded: u64,
    pub visible_ignore: u64,
    pub visible: u64,
}

impl IgnoreCounts {
    fn add(&mut self, o: &IgnoreCounts) {
        self.occluded_ignore += o.occluded_ignore;
        self.occluded += o.occluded;
        self.visible_ignore += o.visible_ignore;
        self.visible += o.visible;
    }

    pub fn occluded_rate(&self) -> f64 {
        self.occluded_ignore as f64 / self.occluded.max(1) as f64
    }

    pub fn visible_rate(&self) -> f64 {
        self.visible_ignore as f64 / self.visible.max(1) as f64
    }

    /// One-sided two-proportion z statistic for "IGNORE is more frequent on
    /// occluded frames" (pooled variance).
    pub fn z_statistic(&self) -> f64 {
        let (n1, n2) = (self.occluded as f64, self.visible as f64);
        if n1 == 0.0 || n2 == 0.0 {
            return 0.0;
        }
        let pooled = (self.occluded_ignore + self.visible_ignore) as f64 / (n1 + n2);
        let se = (pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2)).sqrt();
        if se == 0.0 {
            return 0.0;
        }
        (self.occluded_rate() - self.visible_rate()) / se
    }
}

/// Critical value of the one-sided standard normal test at α = 0.01.
pub const Z_CRIT_001: f64 = 2.326_347_874_040_841;

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    /// Per rung, in ladder order.
    pub ignore_counts: Vec<(String, IgnoreCounts)>,
}

impl AblationResult {
    pub fn mean_f1(&self, policy: &str) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.policy == policy).map(|r| r.f1).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn ignore(&self, policy: &str) -> Option<IgnoreCounts> {
        self.ignore_counts.iter().find(|(n, _)| n == policy).map(|(_, c)| *c)
    }
}

/// Agent seed of held-out episode `k`.
pub fn eval_agent_seed(seed: u64, k: usize) -> u64 {
    derive_seed(seed, seed_tags::AGENT, (1 << 32) + k as u64)
}

/// Runs every rung on every episode. Rungs step in lockstep over one
/// feature map per frame; episodes run in parallel.
pub fn run_ablation(
    specs: &[ScenarioSpec],
    rungs: &[Rung<'_>],
    cfg: &TrackerConfig,
    seed: u64,
    exec: Execution,
) -> Result<AblationResult, LearnError> {
    let per_episode = par::map_range(exec, specs.len(), |k| {
        eval_episode(&specs[k], rungs, cfg, eval_agent_seed(seed, k))
    });
    let mut rows = Vec::new();
    let mut counts: Vec<IgnoreCounts> = vec![IgnoreCounts::default(); rungs.len()];
    let mut by_rung: Vec<Vec<AblationRow>> = vec![Vec::new(); rungs.len()];
    for (k, res) in per_episode.into_iter().enumerate() {
        for (j, (p, r, c)) in res?.into_iter().enumerate() {
            by_rung[j].push(AblationRow {
                policy: rungs[j].name.to_string(),
                episode: k,
                p,
                r,
                f1: f1(p, r),
            });
            counts[j].add(&c);
        }
    }
    for r in by_rung {
        rows.extend(r);
    }
    Ok(AblationResult {
        rows,
        ignore_counts: rungs.iter().map(|r| r.name.to_string()).zip(counts).collect(),
    })
}

fn eval_episode(
    spec: &ScenarioSpec,
    rungs: &[Rung<'_>],
    cfg: &TrackerConfig,
    agent_seed: u64,
) -> Result<Vec<(f64, f64, IgnoreCounts)>, LearnError> {
    let mut stream = EpisodeStream::new(spec.clone())?;
    let init = stream.init_box();
    let (first, g0) = stream.next().ok_or(LearnError::EmptyEpisode)?;
    let fm0 = FeatureMap::from_frame(&first);
    let mut agents = rungs
        .iter()
        .map(|r| Agent::new(r.policy, r.net, cfg, &fm0, init, agent_seed))
        .collect::<Result<Vec<_>, _>>()?;
    let mut reports = vec![Vec::with_capacity(spec.episode_len); rungs.len()];
    let mut counts = vec![IgnoreCounts::default(); rungs.len()];
    let mut gts = Vec::with_capacity(spec.episode_len);
    let mut step = |fm: &FeatureMap, g: crate::sim::GtFrame| {
        for (j, agent) in agents.iter_mut().enumerate() {
            // only training-time expert rungs may look at ground truth
            let truth = rungs[j].policy.needs_ground_truth().then_some(&g);
            let out = agent.step(fm, truth, false);
            let ignore = out.action.appearance == Appearance::Ignore;
            let c = &mut counts[j];
            if g.occluded {
                c.occluded += 1;
                c.occluded_ignore += ignore as u64;
            } else {
                c.visible += 1;
                c.visible_ignore += ignore as u64;
            }
            reports[j].push(out.report);
        }
        gts.push(g);
    };
    step(&fm0, g0);
    for (frame, g) in stream {
        step(&FeatureMap::from_frame(&frame), g);
    }
    let gt = GroundTruth { frames: gts };
    Ok(reports
        .iter()
        .zip(counts)
        .map(|(r, c)| {
            let (p, rec) = precision_recall(r, &gt);
            (p, rec, c)
        })
        .collect())
}

pub fn write_ablation_csv<W: Write>(w: W, rows: &[AblationRow]) -> Result<(), LearnError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r).map_err(|e| LearnError::Io(std::io::Error::other(e)))?;
    }
    wr.flush()?;
    Ok(())
}

/// A cut-heavy suite with stable appearance: frequent cuts, no drift, no
/// occlusion.
pub fn recovery_suite(episodes: usize, episode_len: usize, seed: u64) -> Result<Vec<ScenarioSpec>, LearnError> {
    let base = ScenarioSpec {
        appearance_drift_rate: 0.0,
        occlusion_rate: 0.0,
        cut_rate: 2.0,
        ..preset("long_term")?
    };
    Ok((0..episodes)
        .map(|k| {
            base.clone()
                .with_seed(derive_seed(seed, seed_tags::RECOVERY, k as u64))
                .with_len(episode_len)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub episode: usize,
    pub cut_frame: usize,
    /// Frames from the cut to the first correct report, counting the cut
    /// frame as 1; `None` if the target was not found before the next cut
    /// or the end of the episode.
    pub frames_to_reacquire: Option<usize>,
}

/// Runs forced (REINIT, IGNORE) on every episode and measures how long
/// each cut takes to recover from.
pub fn reinit_recovery_stats(
    specs: &[ScenarioSpec],
    cfg: &TrackerConfig,
    seed: u64,
    exec: Execution,
) -> Result<Vec<RecoveryRow>, LearnError> {
    let policy = Policy::forced(Action::new(Motion::Reinit, Appearance::Ignore));
    let per = par::map_range(exec, specs.len(), |k| -> Result<Vec<RecoveryRow>, LearnError> {
        let mut stream = EpisodeStream::new(specs[k].clone())?;
        let init = stream.init_box();
        let (first, _) = stream.next().ok_or(LearnError::EmptyEpisode)?;
        let mut agent = Agent::new(policy, None, cfg, &FeatureMap::from_frame(&first), init, eval_agent_seed(seed, k))?;
        let mut rows: Vec<RecoveryRow> = Vec::new();
        let mut open: Option<usize> = None;
        for (frame, g) in stream {
            if g.cut_here {
                if let Some(c) = open.take() {
                    rows.push(RecoveryRow {
                        episode: k,
                        cut_frame: c,
                        frames_to_reacquire: None,
                    });
                }
                open = Some(g.index);
            }
            let out = agent.step(&FeatureMap::from_frame(&frame), None, false);
            if let Some(c) = open {
                if correct(&out.report, g.visible_box()) {
                    rows.push(RecoveryRow {
                        episode: k,
                        cut_frame: c,
                        frames_to_reacquire: Some(g.index - c + 1),
                    });
                    open = None;
                }
            }
        }
        if let Some(c) = open {
            rows.push(RecoveryRow {
                episode: k,
                cut_frame: c,
                frames_to_reacquire: None,
            });
        }
        Ok(rows)
    });
    let mut rows = Vec::new();
    for r in per {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Median with unrecovered cuts counted as infinitely long; `None` when the
/// median itself is unrecovered or there are no cuts.
pub fn median_frames_to_reacquire(rows: &[RecoveryRow]) -> Option<f64> {
    let mut v: Vec<f64> = rows
        .iter()
        .map(|r| r.frames_to_reacquire.map_or(f64::INFINITY, |n| n as f64))
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let m = if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    };
    m.is_finite().then_some(m)
}

pub fn write_recovery_csv<W: Write>(w: W, rows: &[RecoveryRow]) -> Result<(), LearnError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r).map_err(|e| LearnError::Io(std::io::Error::other(e)))?;
    }
    wr.flush()?;
    Ok(())
}
