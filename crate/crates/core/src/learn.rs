//! Experience replay, the Q and mixed losses, the per-episode agent loop
//! and the training driver.

use crate::backend::{
    init_belief_features, report, reinit_features, track_features, update_appearance_features,
    FeatureMap, TrackerConfig,
};
use crate::belief::{Action, Appearance, AppearanceModel, Belief, Frame, Motion};
use crate::eval;
use crate::geometry::{iou, BoundingBox, IOU_CORRECT};
use crate::heuristics::{
    discounted_horizon, frame_evidence, offline_motion_label, offline_update_label,
    online_action, Evidence, InvisibleMotion, LabelRecord,
};
use crate::par::{self, Execution};
use crate::qnet::{featurize, Grads, Head, QNet, QNetError, QValues, INPUT};
use crate::sim::{derive_seed, frame_reward, seed_tags, EpisodeStream, GroundTruth, GtFrame, ScenarioSpec, SimError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::VecDeque;
use std::io::{BufRead, Write};

pub const PLANE_LEN: usize = INPUT * INPUT;
pub const PLANE_MASS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum LearnError {
    #[error("invalid experience tuple: {0}")]
    InvalidTuple(String),
    #[error("cannot sample {k} tuples from a database of {size}")]
    NotEnough { k: usize, size: usize },
    #[error("training diverged at episode {episode}: loss {loss}")]
    Diverged { episode: usize, loss: f64 },
    #[error("invalid learning config: {0}")]
    Config(String),
    #[error("policy needs a network but none was given")]
    MissingNet,
    #[error("episode source produced no frames")]
    EmptyEpisode,
    #[error("reward vector has {got} entries for {expected} stride frames")]
    RewardCount { expected: usize, got: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    QNet(#[from] QNetError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// A featurized 64x64 heatmap with unit mass. Serializes as nested
/// row-major arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane(Vec<f32>);

impl Plane {
    pub fn new(values: Vec<f32>) -> Result<Self, LearnError> {
        if values.len() != PLANE_LEN {
            return Err(LearnError::InvalidTuple(format!(
                "plane has {} cells, expected {PLANE_LEN}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(LearnError::InvalidTuple("plane has negative or non-finite cells".into()));
        }
        let mass: f64 = values.iter().map(|&v| v as f64).sum();
        if (mass - 1.0).abs() > PLANE_MASS_TOLERANCE {
            return Err(LearnError::InvalidTuple(format!("plane mass {mass} is not 1")));
        }
        Ok(Self(values))
    }

    pub fn from_heatmap(h: &crate::heatmap::Heatmap) -> Self {
        Self(featurize(h))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

impl Serialize for Plane {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<&[f32]> = self.0.chunks(INPUT).collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Plane {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = Vec::<Vec<f32>>::deserialize(d)?;
        if rows.len() != INPUT || rows.iter().any(|r| r.len() != INPUT) {
            return Err(serde::de::Error::custom("plane must be 64x64"));
        }
        Plane::new(rows.concat()).map_err(serde::de::Error::custom)
    }
}

mod next_state {
    use super::Plane;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Plane(Plane),
        Terminal(String),
    }

    pub fn serialize<S: Serializer>(p: &Option<Plane>, s: S) -> Result<S::Ok, S::Error> {
        match p {
            Some(p) => p.serialize(s),
            None => s.serialize_str("TERMINAL"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Plane>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Plane(p) => Ok(Some(p)),
            Repr::Terminal(t) if t == "TERMINAL" => Ok(None),
            Repr::Terminal(t) => Err(serde::de::Error::custom(format!("unexpected `{t}`"))),
        }
    }
}

/// Heuristic supervision retained with training tuples.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Labels {
    pub motion: Option<Motion>,
    pub appearance: Option<Appearance>,
    /// Frames left in the episode including this one; `None` is unbounded.
    pub remaining: Option<u64>,
}

impl Labels {
    pub fn label(&self, head: Head) -> Option<usize> {
        match head {
            Head::Motion => self.motion.map(Motion::index),
            Head::Appearance => self.appearance.map(Appearance::index),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceTuple {
    pub episode_id: u64,
    pub frame_index: usize,
    pub state_plane: Plane,
    pub action: Action,
    pub reward: u8,
    /// `None` marks a terminal transition.
    #[serde(with = "next_state")]
    pub next_state_plane: Option<Plane>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Labels>,
}

impl ExperienceTuple {
    pub fn validate(&self) -> Result<(), LearnError> {
        if self.reward > 1 {
            return Err(LearnError::InvalidTuple(format!(
                "reward must be 0 or 1, got {}",
                self.reward
            )));
        }
        Plane::new(self.state_plane.0.clone())?;
        if let Some(n) = &self.next_state_plane {
            Plane::new(n.0.clone())?;
        }
        Ok(())
    }

    pub fn is_terminal(&self) -> bool {
        self.next_state_plane.is_none()
    }
}

/// FIFO-bounded experience database.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayDb {
    capacity: usize,
    items: VecDeque<ExperienceTuple>,
}

impl ReplayDb {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ExperienceTuple> {
        self.items.iter()
    }

    pub fn get(&self, i: usize) -> Option<&ExperienceTuple> {
        self.items.get(i)
    }

    /// Appends, evicting the oldest tuple when full.
    pub fn push(&mut self, t: ExperienceTuple) -> Result<(), LearnError> {
        t.validate()?;
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        Ok(())
    }

    /// `k` distinct tuples, uniformly at random.
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<&ExperienceTuple>, LearnError> {
        if k > self.items.len() {
            return Err(LearnError::NotEnough {
                k,
                size: self.items.len(),
            });
        }
        Ok(rand::seq::index::sample(rng, self.items.len(), k)
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), LearnError> {
        for t in &self.items {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R, capacity: usize) -> Result<Self, LearnError> {
        let mut db = Self::new(capacity);
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            db.push(serde_json::from_str(&line)?)?;
        }
        Ok(db)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub q: f64,
    pub supervised: f64,
    pub total: f64,
}

struct TupleTerms {
    q: QValues,
    /// Bootstrapped target of each head for the taken action.
    targets: [f64; 2],
    /// Supervised target per head, when labelled.
    sup: [Option<[f64; 2]>; 2],
}

fn tuple_terms(net: &QNet, t: &ExperienceTuple, gamma: f64) -> TupleTerms {
    let q = net.forward(t.state_plane.as_slice());
    tuple_terms_with(net, t, gamma, q)
}

fn tuple_terms_with(net: &QNet, t: &ExperienceTuple, gamma: f64, q: QValues) -> TupleTerms {
    let next = t.next_state_plane.as_ref().map(|p| net.forward(p.as_slice()));
    let r = t.reward as f64;
    let targets = Head::BOTH.map(|h| match &next {
        Some(n) => {
            let v = n.head(h);
            r + gamma * v[0].max(v[1])
        }
        None => r,
    });
    let sup = Head::BOTH.map(|h| {
        let labels = t.labels?;
        let star = labels.label(h)?;
        let g = discounted_horizon(labels.remaining, gamma);
        Some(std::array::from_fn(|a| if a == star { g } else { 0.0 }))
    });
    TupleTerms { q, targets, sup }
}

fn taken(t: &ExperienceTuple, h: Head) -> usize {
    match h {
        Head::Motion => t.action.motion.index(),
        Head::Appearance => t.action.appearance.index(),
    }
}

/// Combines per-tuple terms into the loss and dLoss/dQ for each tuple.
fn combine(batch: &[&ExperienceTuple], terms: &[TupleTerms], lambda: f64) -> (LossBreakdown, Vec<QValues>) {
    let n_q = (2 * batch.len()) as f64;
    let n_sup = terms
        .iter()
        .map(|t| t.sup.iter().flatten().count() * 2)
        .sum::<usize>() as f64;
    let mut q_loss = 0.0;
    let mut sup_loss = 0.0;
    let mut dqs = Vec::with_capacity(batch.len());
    for (t, terms) in batch.iter().zip(terms) {
        let mut dq = QValues::default();
        for (k, h) in Head::BOTH.into_iter().enumerate() {
            let a = taken(t, h);
            let e = terms.q.head(h)[a] - terms.targets[k];
            q_loss += e * e;
            dq.head_mut(h)[a] += (1.0 - lambda) * 2.0 * e / n_q;
            if let Some(target) = terms.sup[k] {
                for (a, tv) in target.iter().enumerate() {
                    let e = terms.q.head(h)[a] - tv;
                    sup_loss += e * e;
                    dq.head_mut(h)[a] += lambda * 2.0 * e / n_sup;
                }
            }
        }
        dqs.push(dq);
    }
    let q = q_loss / n_q;
    let supervised = if n_sup > 0.0 { sup_loss / n_sup } else { 0.0 };
    (
        LossBreakdown {
            q,
            supervised,
            total: (1.0 - lambda) * q + lambda * supervised,
        },
        dqs,
    )
}

/// Mean over tuples and heads of `(target - Q(s, a))²` with
/// `target = r + γ·max Q(s', ·)` per head (`r` when terminal), plus the
/// gradient with respect to each tuple's outputs. Targets are constants.
pub fn q_loss_and_targets(net: &QNet, batch: &[&ExperienceTuple], gamma: f64) -> (f64, Vec<QValues>) {
    let terms: Vec<_> = batch.iter().map(|t| tuple_terms(net, t, gamma)).collect();
    let (l, dq) = combine(batch, &terms, 0.0);
    (l.q, dq)
}

/// `(1 − λ)·q_loss + λ·mean (Q − Q_init)²` over both actions of every
/// labelled head.
pub fn mixed_loss(net: &QNet, batch: &[&ExperienceTuple], gamma: f64, lambda: f64) -> LossBreakdown {
    let terms: Vec<_> = batch.iter().map(|t| tuple_terms(net, t, gamma)).collect();
    combine(batch, &terms, lambda).0
}

/// Tuples per gradient chunk. Chunk sums are added in order, so the result
/// does not depend on the execution mode.
const GRAD_CHUNK: usize = 4;

pub fn mixed_loss_and_grads(
    net: &QNet,
    batch: &[&ExperienceTuple],
    gamma: f64,
    lambda: f64,
    exec: Execution,
) -> (LossBreakdown, Grads) {
    let forwards = par::map(exec, batch, |t| {
        let (q, trace) = net.forward_trace(t.state_plane.as_slice());
        (tuple_terms_with(net, t, gamma, q), trace)
    });
    let (terms, traces): (Vec<_>, Vec<_>) = forwards.into_iter().unzip();
    let (loss, dqs) = combine(batch, &terms, lambda);
    let work: Vec<_> = traces.iter().zip(&dqs).collect();
    let partial = par::map_chunks(exec, &work, GRAD_CHUNK, |chunk| {
        let mut g = Grads::zeros();
        for (trace, dq) in chunk {
            g.add_assign(&net.backward(trace, dq));
        }
        g
    });
    let mut grads = Grads::zeros();
    for g in &partial {
        grads.add_assign(g);
    }
    (loss, grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MotionPolicy {
    /// Greedy on the motion head.
    Net,
    /// Always TRACK.
    Online,
    Fixed { action: Motion },
    /// TRACK iff tracking would localize the visible target (training only).
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AppearancePolicy {
    /// Greedy on the appearance head.
    Net,
    /// UPDATE iff the previous peak reaches `tau`.
    Online,
    Fixed { action: Appearance },
    /// UPDATE iff the new heatmap localizes the visible target (training
    /// only).
    Oracle,
}

/// A decision rule per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policy {
    pub motion: MotionPolicy,
    pub appearance: AppearancePolicy,
    /// Threshold of the online appearance rule.
    pub tau: f64,
}

pub const DEFAULT_TAU: f64 = 0.5;

impl Policy {
    pub fn net() -> Self {
        Self {
            motion: MotionPolicy::Net,
            appearance: AppearancePolicy::Net,
            tau: DEFAULT_TAU,
        }
    }

    pub fn online(tau: f64) -> Self {
        Self {
            motion: MotionPolicy::Online,
            appearance: AppearancePolicy::Online,
            tau,
        }
    }

    pub fn forced(a: Action) -> Self {
        Self {
            motion: MotionPolicy::Fixed { action: a.motion },
            appearance: AppearancePolicy::Fixed {
                action: a.appearance,
            },
            tau: DEFAULT_TAU,
        }
    }

    pub fn expert() -> Self {
        Self {
            motion: MotionPolicy::Oracle,
            appearance: AppearancePolicy::Oracle,
            tau: DEFAULT_TAU,
        }
    }

    pub fn needs_net(&self) -> bool {
        self.motion == MotionPolicy::Net || self.appearance == AppearancePolicy::Net
    }

    pub fn needs_ground_truth(&self) -> bool {
        self.motion == MotionPolicy::Oracle || self.appearance == AppearancePolicy::Oracle
    }
}

/// Result of one agent step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub action: Action,
    /// Featurized previous heatmap the decision was based on.
    pub state: Vec<f32>,
    pub report: Option<BoundingBox>,
    pub peak: f32,
    /// Motion label from the counterfactual TRACK output, when requested.
    pub motion_label: Option<Motion>,
    /// Filter before this step and the filter an UPDATE here would give,
    /// when requested.
    pub update_pair: Option<(AppearanceModel, AppearanceModel)>,
}

/// A tracker whose decisions follow a [`Policy`].
pub struct Agent<'n> {
    policy: Policy,
    net: Option<&'n QNet>,
    cfg: TrackerConfig,
    target_size: (u32, u32),
    belief: Belief,
    reinit_rng: ChaCha8Rng,
    explore_rng: ChaCha8Rng,
    epsilon: f64,
}

impl<'n> Agent<'n> {
    pub fn new(
        policy: Policy,
        net: Option<&'n QNet>,
        cfg: &TrackerConfig,
        first: &FeatureMap,
        init_box: BoundingBox,
        seed: u64,
    ) -> Result<Self, LearnError> {
        if policy.needs_net() && net.is_none() {
            return Err(LearnError::MissingNet);
        }
        let mut reinit_rng = ChaCha8Rng::seed_from_u64(seed);
        reinit_rng.set_stream(1);
        let mut explore_rng = ChaCha8Rng::seed_from_u64(seed);
        explore_rng.set_stream(2);
        Ok(Self {
            policy,
            net,
            cfg: cfg.clone(),
            target_size: (init_box.w() as u32, init_box.h() as u32),
            belief: init_belief_features(first, init_box, cfg),
            reinit_rng,
            explore_rng,
            epsilon: 0.0,
        })
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn belief(&self) -> &Belief {
        &self.belief
    }

    pub fn target_size(&self) -> (u32, u32) {
        self.target_size
    }

    fn explore<T: Copy>(&mut self, chosen: T, options: [T; 2]) -> T {
        if self.epsilon > 0.0 && self.explore_rng.random::<f64>() < self.epsilon {
            options[self.explore_rng.random_range(0..2)]
        } else {
            chosen
        }
    }

    fn correct(&self, h: &crate::heatmap::Heatmap, gt: Option<&GtFrame>) -> Option<bool> {
        let truth = gt?.visible_box()?;
        Some(iou(&h.extract_box(self.target_size), &truth) >= IOU_CORRECT)
    }

    /// Decides and applies one action on a frame: motion first produces the
    /// new heatmap, then the appearance decision refits or keeps the filter.
    pub fn step(&mut self, fm: &FeatureMap, gt: Option<&GtFrame>, want_labels: bool) -> StepOutcome {
        let state = featurize(&self.belief.heatmap);
        let q = self.net.filter(|_| self.policy.needs_net()).map(|n| n.forward(&state));
        let needs_track = want_labels || self.policy.motion == MotionPolicy::Oracle;
        let tracked = needs_track.then(|| track_features(&self.belief.heatmap, &self.belief.appearance, fm, &self.cfg).0);

        let motion = match self.policy.motion {
            MotionPolicy::Net => q.expect("net checked at construction").best_motion(),
            MotionPolicy::Online => Motion::Track,
            MotionPolicy::Fixed { action } => action,
            MotionPolicy::Oracle => match self.correct(tracked.as_ref().unwrap(), gt) {
                Some(false) => Motion::Reinit,
                _ => Motion::Track,
            },
        };
        let motion = self.explore(motion, [Motion::Track, Motion::Reinit]);
        let heatmap = match (motion, &tracked) {
            (Motion::Track, Some(h)) => h.clone(),
            (Motion::Track, None) => track_features(&self.belief.heatmap, &self.belief.appearance, fm, &self.cfg).0,
            (Motion::Reinit, _) => reinit_features(&self.belief.appearance, fm, &self.cfg, &mut self.reinit_rng).0,
        };

        let appearance = match self.policy.appearance {
            AppearancePolicy::Net => q.expect("net checked at construction").best_appearance(),
            AppearancePolicy::Online => online_action(&self.belief.heatmap, self.policy.tau).appearance,
            AppearancePolicy::Fixed { action } => action,
            AppearancePolicy::Oracle => {
                let partial = gt.is_some_and(|g| g.partial);
                match self.correct(&heatmap, gt) {
                    Some(true) if !partial => Appearance::Update,
                    _ => Appearance::Ignore,
                }
            }
        };
        let appearance = self.explore(appearance, [Appearance::Update, Appearance::Ignore]);

        let updated = (want_labels || appearance == Appearance::Update)
            .then(|| update_appearance_features(&self.belief.appearance, &heatmap, fm, &self.cfg));
        let motion_label = match (want_labels, gt, &tracked) {
            (true, Some(g), Some(t)) => offline_motion_label(t, g, self.target_size, InvisibleMotion::Skip),
            _ => None,
        };
        let update_pair = if want_labels {
            Some((self.belief.appearance.clone(), updated.clone().unwrap()))
        } else {
            None
        };
        let appearance_model = match appearance {
            Appearance::Update => updated.unwrap(),
            Appearance::Ignore => self.belief.appearance.clone(),
        };
        self.belief = Belief {
            appearance: appearance_model,
            heatmap,
        };
        let report = report(&self.belief.heatmap, self.target_size, &self.cfg);
        StepOutcome {
            action: Action::new(motion, appearance),
            state,
            report,
            peak: self.belief.heatmap.max(),
            motion_label,
            update_pair,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunOptions {
    pub stride: usize,
    pub epsilon: f64,
    /// Compute offline heuristic labels for stride frames.
    pub collect_labels: bool,
    pub lookahead: usize,
    pub invisible_motion: InvisibleMotion,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            stride: 50,
            epsilon: 0.0,
            collect_labels: false,
            lookahead: 30,
            invisible_motion: InvisibleMotion::Skip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub frame: usize,
    pub action: Action,
    pub report: Option<BoundingBox>,
    pub peak: f32,
}

/// What a rewarded frame contributes to the replay database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrideRecord {
    pub frame: usize,
    pub state: Plane,
    pub action: Action,
    /// State of the following frame; `None` for the last stride frame.
    pub next_state: Option<Plane>,
    pub reward: Option<u8>,
    pub labels: Option<Labels>,
    pub label_record: Option<LabelRecord>,
}

/// Everything one episode run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRun {
    pub episode_id: u64,
    pub stride: usize,
    pub steps: Vec<StepRecord>,
    pub strides: Vec<StrideRecord>,
    pub ground_truth: Option<GroundTruth>,
}

impl EpisodeRun {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn reports(&self) -> Vec<Option<BoundingBox>> {
        self.steps.iter().map(|s| s.report).collect()
    }

    /// Mean reward over rewarded stride frames.
    pub fn mean_reward(&self) -> Option<f64> {
        let r: Vec<u8> = self.strides.iter().filter_map(|s| s.reward).collect();
        (!r.is_empty()).then(|| r.iter().map(|&v| v as f64).sum::<f64>() / r.len() as f64)
    }

    pub fn f1(&self) -> Option<f64> {
        let gt = self.ground_truth.as_ref()?;
        let (p, r) = eval::precision_recall(&self.reports(), gt);
        Some(eval::f1(p, r))
    }

    /// Replaces stride rewards, one per stride frame in order.
    pub fn set_rewards(&mut self, rewards: &[u8]) -> Result<(), LearnError> {
        if rewards.len() != self.strides.len() {
            return Err(LearnError::RewardCount {
                expected: self.strides.len(),
                got: rewards.len(),
            });
        }
        for (s, &r) in self.strides.iter_mut().zip(rewards) {
            s.reward = Some(r);
        }
        Ok(())
    }

    /// Tuples for every rewarded stride frame.
    pub fn tuples(&self) -> Vec<ExperienceTuple> {
        self.strides
            .iter()
            .filter_map(|s| {
                Some(ExperienceTuple {
                    episode_id: self.episode_id,
                    frame_index: s.frame,
                    state_plane: s.state.clone(),
                    action: s.action,
                    reward: s.reward?,
                    next_state_plane: s.next_state.clone(),
                    labels: s.labels,
                })
            })
            .collect()
    }

    pub fn label_records(&self) -> Vec<LabelRecord> {
        self.strides.iter().filter_map(|s| s.label_record.clone()).collect()
    }
}

/// Runs one episode: initialize from the first frame's annotated box, then
/// decide, step and report on every frame. Rewards come from ground truth
/// when `frames` carries it (oracle mode) and are left empty otherwise.
pub fn run_episode<I>(
    net: Option<&QNet>,
    frames: I,
    policy: &Policy,
    opts: &RunOptions,
    cfg: &TrackerConfig,
    episode_id: u64,
    seed: u64,
) -> Result<EpisodeRun, LearnError>
where
    I: IntoIterator<Item = (Frame, Option<GtFrame>)>,
{
    let stride = opts.stride.max(1);
    let mut it = frames.into_iter().peekable();
    let Some((first, first_gt)) = it.peek() else {
        return Err(LearnError::EmptyEpisode);
    };
    let init_box = first_gt
        .and_then(|g| g.bbox)
        .ok_or_else(|| LearnError::InvalidTuple("first frame needs an initialization box".into()))?;
    let fm0 = FeatureMap::from_frame(first);
    let mut agent = Agent::new(*policy, net, cfg, &fm0, init_box, seed)?.with_epsilon(opts.epsilon);
    let size = agent.target_size();

    let mut steps = Vec::new();
    let mut strides: Vec<StrideRecord> = Vec::new();
    let mut gts = Vec::new();
    let mut evidence: Vec<Evidence> = Vec::new();
    let mut pairs = Vec::new();
    let mut oracle = true;
    let mut first_fm = Some(fm0);
    while let Some((frame, gt)) = it.next() {
        let i = steps.len();
        let fm = match first_fm.take() {
            Some(fm) => fm,
            None => FeatureMap::from_frame(&frame),
        };
        let stride_frame = i % stride == 0;
        let want_labels = opts.collect_labels && stride_frame && gt.is_some();
        let out = agent.step(&fm, gt.as_ref(), want_labels);
        if opts.collect_labels {
            evidence.push(match &gt {
                Some(g) => frame_evidence(&fm, &agent.belief().heatmap, g, size),
                None => Evidence::default(),
            });
        }
        steps.push(StepRecord {
            frame: i,
            action: out.action,
            report: out.report,
            peak: out.peak,
        });
        if stride_frame {
            let reward = gt.as_ref().map(|g| frame_reward(g, out.report));
            let next_state = it.peek().map(|_| Plane::from_heatmap(&agent.belief().heatmap));
            strides.push(StrideRecord {
                frame: i,
                state: Plane(out.state),
                action: out.action,
                next_state,
                reward,
                labels: None,
                label_record: None,
            });
            pairs.push((out.motion_label, out.update_pair));
        }
        match gt {
            Some(g) => gts.push(g),
            None => oracle = false,
        }
    }
    if let Some(last) = strides.last_mut() {
        last.next_state = None;
    }
    let len = steps.len();
    if opts.collect_labels && oracle {
        for (s, (motion, pair)) in strides.iter_mut().zip(pairs) {
            let Some((theta, theta_up)) = pair else { continue };
            let motion = match (motion, opts.invisible_motion) {
                (None, InvisibleMotion::Reinit) if gts[s.frame].visible_box().is_none() => Some(Motion::Reinit),
                (m, _) => m,
            };
            let u = offline_update_label(&theta, &theta_up, &evidence[s.frame + 1..], opts.lookahead);
            s.labels = Some(Labels {
                motion,
                appearance: Some(u.label),
                remaining: Some((len - s.frame) as u64),
            });
            s.label_record = Some(LabelRecord {
                episode_id,
                frame: s.frame,
                motion_label: motion,
                appearance_label: u.label,
                delta_plus: u.delta_plus,
                delta_minus: u.delta_minus,
                n: u.n,
            });
        }
    }
    Ok(EpisodeRun {
        episode_id,
        stride,
        steps,
        strides,
        ground_truth: oracle.then_some(GroundTruth { frames: gts }),
    })
}

/// Streams a simulated episode with ground truth attached.
pub fn simulated_frames(spec: &ScenarioSpec) -> Result<impl Iterator<Item = (Frame, Option<GtFrame>)>, LearnError> {
    Ok(EpisodeStream::new(spec.clone())?.map(|(f, g)| (f, Some(g))))
}

/// Which policy generates training trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    /// The network being trained (with exploration).
    #[default]
    OnPolicy,
    /// The ground-truth-aware expert; used to train the supervised
    /// classifier baseline.
    Expert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnConfig {
    pub episodes: usize,
    /// Overrides the scenario's episode length for training.
    pub episode_len: Option<usize>,
    pub stride: usize,
    pub gamma: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub updates_per_episode: usize,
    pub replay_capacity: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub lambda_start: f64,
    pub lambda_end: f64,
    /// Fraction of training over which λ anneals linearly.
    pub lambda_anneal_fraction: f64,
    pub lookahead: usize,
    pub invisible_motion: InvisibleMotion,
    pub tau: f64,
    pub behavior: Behavior,
    /// Emit a checkpoint every this many episodes (0 disables).
    pub checkpoint_every: usize,
    /// Episodes collected in parallel with one network snapshot.
    pub episodes_per_round: usize,
    /// Seed of the network initialization.
    pub init_seed: u64,
    /// Seed of episodes, exploration and minibatch sampling.
    pub seed: u64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            episode_len: Some(1000),
            stride: 50,
            gamma: 0.95,
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-8,
            batch_size: 32,
            updates_per_episode: 64,
            replay_capacity: 20_000,
            epsilon_start: 0.1,
            epsilon_end: 0.0,
            lambda_start: 1.0,
            lambda_end: 0.1,
            lambda_anneal_fraction: 0.5,
            lookahead: 30,
            invisible_motion: InvisibleMotion::Skip,
            tau: DEFAULT_TAU,
            behavior: Behavior::OnPolicy,
            checkpoint_every: 10,
            episodes_per_round: 1,
            init_seed: 0,
            seed: 0,
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        let bad = |m: &str| Err(LearnError::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.stride == 0 || self.replay_capacity == 0 {
            return bad("batch_size, stride and replay_capacity must be positive");
        }
        if self.episodes_per_round == 0 {
            return bad("episodes_per_round must be positive");
        }
        for (name, v) in [
            ("epsilon_start", self.epsilon_start),
            ("epsilon_end", self.epsilon_end),
            ("lambda_start", self.lambda_start),
            ("lambda_end", self.lambda_end),
            ("lambda_anneal_fraction", self.lambda_anneal_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(LearnError::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and >= 0");
        }
        Ok(())
    }

    pub fn lambda_at(&self, episode: usize) -> f64 {
        let span = self.lambda_anneal_fraction * self.episodes as f64;
        let t = if span <= 0.0 {
            1.0
        } else {
            (episode as f64 / span).min(1.0)
        };
        self.lambda_start + (self.lambda_end - self.lambda_start) * t
    }

    pub fn epsilon_at(&self, episode: usize) -> f64 {
        let t = if self.episodes <= 1 {
            0.0
        } else {
            episode as f64 / (self.episodes - 1) as f64
        };
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * t
    }

    pub fn run_options(&self, epsilon: f64) -> RunOptions {
        RunOptions {
            stride: self.stride,
            epsilon,
            collect_labels: true,
            lookahead: self.lookahead,
            invisible_motion: self.invisible_motion,
        }
    }
}

/// One row of the training metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub episode: usize,
    pub mean_reward: f64,
    pub f1: f64,
    /// Mean minibatch loss; absent while the database is smaller than a
    /// batch.
    pub loss: Option<f64>,
    pub epsilon: f64,
    pub lambda: f64,
}

pub fn write_metrics_csv<W: Write>(w: W, rows: &[MetricsRow]) -> Result<(), LearnError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r).map_err(|e| LearnError::Io(std::io::Error::other(e)))?;
    }
    wr.flush()?;
    Ok(())
}

pub enum TrainEvent<'a> {
    Episode(&'a MetricsRow),
    Checkpoint { episode: usize, net: &'a QNet },
}

pub struct TrainOutcome {
    pub net: QNet,
    pub metrics: Vec<MetricsRow>,
    pub replay: ReplayDb,
}

/// Seed of the `e`-th training episode.
pub fn train_episode_seed(seed: u64, e: usize) -> u64 {
    derive_seed(seed, seed_tags::TRAIN, e as u64)
}

/// The streaming train loop: run episodes with the current network, store
/// rewarded tuples, then take minibatch steps on the mixed loss.
pub fn train(
    spec: &ScenarioSpec,
    tracker: &TrackerConfig,
    cfg: &LearnConfig,
    init: Option<QNet>,
    exec: Execution,
    mut on_event: impl FnMut(TrainEvent<'_>),
) -> Result<TrainOutcome, LearnError> {
    cfg.validate()?;
    let mut net = init.unwrap_or_else(|| QNet::init(cfg.init_seed));
    let mut db = ReplayDb::new(cfg.replay_capacity);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, seed_tags::REPLAY, 0));
    let mut metrics = Vec::with_capacity(cfg.episodes);
    let mut e0 = 0;
    while e0 < cfg.episodes {
        let round: Vec<usize> = (e0..(e0 + cfg.episodes_per_round).min(cfg.episodes)).collect();
        let snapshot = &net;
        let runs = par::map(exec, &round, |&e| {
            let seed = train_episode_seed(cfg.seed, e);
            let mut ep_spec = spec.clone().with_seed(seed);
            if let Some(len) = cfg.episode_len {
                ep_spec = ep_spec.with_len(len);
            }
            let policy = match cfg.behavior {
                Behavior::OnPolicy => Policy {
                    tau: cfg.tau,
                    ..Policy::net()
                },
                Behavior::Expert => Policy::expert(),
            };
            let eps = match cfg.behavior {
                Behavior::OnPolicy => cfg.epsilon_at(e),
                Behavior::Expert => 0.0,
            };
            run_episode(
                Some(snapshot),
                simulated_frames(&ep_spec)?,
                &policy,
                &cfg.run_options(eps),
                tracker,
                e as u64,
                derive_seed(cfg.seed, seed_tags::AGENT, e as u64),
            )
        });
        for (e, run) in round.iter().copied().zip(runs) {
            let run = run?;
            for t in run.tuples() {
                db.push(t)?;
            }
            let lambda = cfg.lambda_at(e);
            let mut losses = Vec::new();
            if db.len() >= cfg.batch_size {
                for _ in 0..cfg.updates_per_episode {
                    let batch = db.sample(cfg.batch_size, &mut sample_rng)?;
                    let (loss, grads) = mixed_loss_and_grads(&net, &batch, cfg.gamma, lambda, exec);
                    if !loss.total.is_finite() {
                        return Err(LearnError::Diverged {
                            episode: e,
                            loss: loss.total,
                        });
                    }
                    net.sgd_step(&grads, cfg.lr, cfg.momentum, cfg.weight_decay)?;
                    losses.push(loss.total);
                }
            }
            if !net.is_finite() {
                return Err(LearnError::Diverged {
                    episode: e,
                    loss: f64::NAN,
                });
            }
            let row = MetricsRow {
                episode: e,
                mean_reward: run.mean_reward().unwrap_or(0.0),
                f1: run.f1().unwrap_or(0.0),
                loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
                epsilon: match cfg.behavior {
                    Behavior::OnPolicy => cfg.epsilon_at(e),
                    Behavior::Expert => 0.0,
                },
                lambda,
            };
            log::info!(
                "episode {e}: reward {:.3} f1 {:.3} loss {:?}",
                row.mean_reward,
                row.f1,
                row.loss
            );
            on_event(TrainEvent::Episode(&row));
            metrics.push(row);
            if cfg.checkpoint_every > 0 && (e + 1) % cfg.checkpoint_every == 0 {
                on_event(TrainEvent::Checkpoint { episode: e, net: &net });
            }
        }
        e0 += round.len();
    }
    Ok(TrainOutcome {
        net,
        metrics,
        replay: db,
    })
}

/// Minibatch steps on a fixed replay database; returns the loss of each
/// step.
#[allow(clippy::too_many_arguments)]
pub fn train_on_replay(
    net: &mut QNet,
    db: &ReplayDb,
    steps: usize,
    cfg: &LearnConfig,
    lambda: f64,
    seed: u64,
    exec: Execution,
) -> Result<Vec<f64>, LearnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, seed_tags::REPLAY, 1));
    let k = cfg.batch_size.min(db.len());
    if k == 0 {
        return Err(LearnError::NotEnough { k: 1, size: 0 });
    }
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch = db.sample(k, &mut rng)?;
        let (loss, grads) = mixed_loss_and_grads(net, &batch, cfg.gamma, lambda, exec);
        if !loss.total.is_finite() {
            return Err(LearnError::Diverged {
                episode: 0,
                loss: loss.total,
            });
        }
        net.sgd_step(&grads, cfg.lr, cfg.momentum, cfg.weight_decay)?;
        losses.push(loss.total);
    }
    Ok(losses)
}
