//! Annotation service: plays back recorded tracker runs, collects binary
//! failure marks, turns them into stride rewards for the replay database
//! and retrains the network on request.

pub mod api;
pub mod marks;
pub mod service;

pub use marks::{merge, stride_rewards, Mark};
pub use service::{JobState, JobStatus, NextState, RecordedRun, ServeConfig, Service, Session, SessionStatus};

use ptrack::backend::TrackerConfig;
use ptrack::learn::{run_episode, LearnError, Policy, RunOptions};
use ptrack::qnet::QNet;
use ptrack::sim::{EpisodeStream, ScenarioSpec, SimError};
use std::sync::Arc;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("session {0} is already committed")]
    Committed(String),
    #[error("frames {start}..={end} are outside an episode of {len} frames")]
    OutOfRange { start: usize, end: usize, len: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("the replay database is empty")]
    EmptyReplay,
    #[error("a training job is already running")]
    Busy,
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Runs the tracker over an episode without rewards. Only the first
/// frame's box is taken from ground truth, to initialize the tracker.
pub fn record_run(
    spec: &ScenarioSpec,
    net: Option<&QNet>,
    policy: &Policy,
    stride: usize,
    tracker: &TrackerConfig,
    episode_id: &str,
    seed: u64,
) -> Result<RecordedRun, ServeError> {
    let frames = EpisodeStream::new(spec.clone())?
        .enumerate()
        .map(|(i, (f, g))| (f, (i == 0).then_some(g)));
    let opts = RunOptions {
        stride,
        ..RunOptions::default()
    };
    let mut run = run_episode(net, frames, policy, &opts, tracker, 0, seed)?;
    // the initialization frame carried ground truth; its reward must come
    // from annotation like every other
    for s in &mut run.strides {
        s.reward = None;
    }
    Ok(RecordedRun {
        episode_id: episode_id.into(),
        run,
    })
}

/// Serves the API on an already bound listener until the future is
/// dropped or the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, svc: Arc<Service>) -> std::io::Result<()> {
    axum::serve(listener, api::router(svc)).await
}
