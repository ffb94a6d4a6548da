//! Sessions, replay commits and retraining jobs, independent of transport.

use crate::marks::{merge, stride_rewards, Mark};
use crate::ServeError;
use ptrack::learn::{train_on_replay, EpisodeRun, ExperienceTuple, LearnConfig, ReplayDb};
use ptrack::par::Execution;
use ptrack::qnet::QNet;
use ptrack::sim::ScenarioSpec;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

/// Which state plane a committed tuple uses as its successor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NextState {
    /// The frame right after the stride frame.
    #[default]
    Following,
    /// The next stride frame.
    NextStride,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub bind: String,
    pub stride: usize,
    /// Playback speed of new sessions; frames per second equal the speed
    /// multiplier times [`BASE_FPS`].
    pub default_speed: f64,
    pub next_state: NextState,
    pub replay_capacity: usize,
    /// Minibatch steps per retraining job.
    pub train_steps: usize,
    /// Weight of the supervised term during retraining; annotated tuples
    /// carry no heuristic labels, so this only scales the Q loss.
    pub train_lambda: f64,
    /// Number of recorded runs the CLI prepares for annotation.
    pub episodes: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            stride: 50,
            default_speed: 20.0,
            next_state: NextState::Following,
            replay_capacity: 20_000,
            train_steps: 200,
            train_lambda: 0.0,
            episodes: 4,
        }
    }
}

/// Playback rate at speed multiplier 1.
pub const BASE_FPS: f64 = 1.0;

/// A tracker run recorded without rewards, ready for annotation.
#[derive(Debug, Clone)]
pub struct RecordedRun {
    pub episode_id: String,
    pub run: EpisodeRun,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Streaming,
    Committed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub episode_id: String,
    pub run_id: String,
    pub speed: f64,
    /// Next frame to stream: one past the last acknowledged frame.
    pub cursor: usize,
    pub marks: Vec<Mark>,
    pub status: SessionStatus,
    pub len: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub state: JobState,
    /// Every state the job has been in, in order.
    pub transitions: Vec<JobState>,
    pub replay_size: usize,
    pub steps: usize,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

impl JobStatus {
    fn set(&mut self, s: JobState) {
        self.state = s;
        self.transitions.push(s);
    }

    fn active(&self) -> bool {
        matches!(self.state, JobState::Queued | JobState::Running)
    }
}

/// Shared state behind the HTTP and WebSocket front ends.
pub struct Service {
    pub config: ServeConfig,
    learn: LearnConfig,
    episodes: HashMap<String, ScenarioSpec>,
    runs: HashMap<String, RecordedRun>,
    sessions: Mutex<HashMap<String, Session>>,
    replay: Mutex<ReplayDb>,
    net: RwLock<QNet>,
    jobs: Mutex<Vec<JobStatus>>,
    next_session: Mutex<u64>,
    checkpoint_out: Option<PathBuf>,
}

impl Service {
    pub fn new(config: ServeConfig, learn: LearnConfig, net: QNet) -> Self {
        let replay = ReplayDb::new(config.replay_capacity.max(1));
        Self {
            config,
            learn,
            episodes: HashMap::new(),
            runs: HashMap::new(),
            sessions: Mutex::new(HashMap::new()),
            replay: Mutex::new(replay),
            net: RwLock::new(net),
            jobs: Mutex::new(Vec::new()),
            next_session: Mutex::new(0),
            checkpoint_out: None,
        }
    }

    /// Retrained weights are also written here after each job.
    pub fn with_checkpoint_out(mut self, path: PathBuf) -> Self {
        self.checkpoint_out = Some(path);
        self
    }

    pub fn add_episode(&mut self, id: impl Into<String>, spec: ScenarioSpec) {
        self.episodes.insert(id.into(), spec);
    }

    pub fn add_run(&mut self, id: impl Into<String>, run: RecordedRun) -> Result<(), ServeError> {
        if !self.episodes.contains_key(&run.episode_id) {
            return Err(ServeError::NotFound(format!("episode {}", run.episode_id)));
        }
        if run.run.stride != self.config.stride {
            return Err(ServeError::Invalid(format!(
                "run recorded with stride {}, service uses {}",
                run.run.stride, self.config.stride
            )));
        }
        self.runs.insert(id.into(), run);
        Ok(())
    }

    pub fn episode(&self, id: &str) -> Result<&ScenarioSpec, ServeError> {
        self.episodes.get(id).ok_or_else(|| ServeError::NotFound(format!("episode {id}")))
    }

    pub fn run(&self, id: &str) -> Result<&RecordedRun, ServeError> {
        self.runs.get(id).ok_or_else(|| ServeError::NotFound(format!("run {id}")))
    }

    /// (run id, episode id, frames) of every recorded run, sorted by id.
    pub fn catalog(&self) -> Vec<(String, String, usize)> {
        let mut v: Vec<_> = self
            .runs
            .iter()
            .map(|(id, r)| (id.clone(), r.episode_id.clone(), r.run.len()))
            .collect();
        v.sort();
        v
    }

    pub fn create_session(&self, episode_id: &str, run_id: &str, speed: Option<f64>) -> Result<Session, ServeError> {
        self.episode(episode_id)?;
        let run = self.run(run_id)?;
        if run.episode_id != episode_id {
            return Err(ServeError::Invalid(format!("run {run_id} does not belong to episode {episode_id}")));
        }
        let speed = speed.unwrap_or(self.config.default_speed);
        check_speed(speed)?;
        let id = {
            let mut n = self.next_session.lock().unwrap();
            *n += 1;
            format!("s{}", *n)
        };
        let s = Session {
            id: id.clone(),
            episode_id: episode_id.into(),
            run_id: run_id.into(),
            speed,
            cursor: 0,
            marks: Vec::new(),
            status: SessionStatus::Streaming,
            len: run.run.len(),
            stride: self.config.stride,
        };
        self.sessions.lock().unwrap().insert(id, s.clone());
        Ok(s)
    }

    pub fn session(&self, id: &str) -> Result<Session, ServeError> {
        self.sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ServeError::NotFound(format!("session {id}")))
    }

    fn with_streaming<T>(&self, id: &str, f: impl FnOnce(&mut Session) -> Result<T, ServeError>) -> Result<T, ServeError> {
        let mut sessions = self.sessions.lock().unwrap();
        let s = sessions
            .get_mut(id)
            .ok_or_else(|| ServeError::NotFound(format!("session {id}")))?;
        if s.status == SessionStatus::Committed {
            return Err(ServeError::Committed(id.into()));
        }
        f(s)
    }

    /// Records failure intervals; returns the merged set.
    pub fn submit_marks(&self, id: &str, marks: &[Mark]) -> Result<Vec<Mark>, ServeError> {
        self.with_streaming(id, |s| {
            for m in marks {
                if m.start > m.end {
                    return Err(ServeError::Invalid(format!("mark {}..{} is reversed", m.start, m.end)));
                }
                if m.end >= s.len {
                    return Err(ServeError::OutOfRange {
                        start: m.start,
                        end: m.end,
                        len: s.len,
                    });
                }
            }
            s.marks = merge(s.marks.iter().chain(marks).copied());
            Ok(s.marks.clone())
        })
    }

    pub fn set_speed(&self, id: &str, multiplier: f64) -> Result<(), ServeError> {
        check_speed(multiplier)?;
        self.with_streaming(id, |s| {
            s.speed = multiplier;
            Ok(())
        })
    }

    /// Moves the resume point past an acknowledged frame.
    pub fn acknowledge(&self, id: &str, index: usize) -> Result<(), ServeError> {
        self.with_streaming(id, |s| {
            if index >= s.len {
                return Err(ServeError::OutOfRange {
                    start: index,
                    end: index,
                    len: s.len,
                });
            }
            s.cursor = s.cursor.max(index + 1);
            Ok(())
        })
    }

    /// Tuples the session would append, with mark-derived rewards.
    pub fn session_tuples(&self, s: &Session) -> Result<Vec<ExperienceTuple>, ServeError> {
        let rec = self.run(&s.run_id)?;
        let mut run = rec.run.clone();
        run.set_rewards(&stride_rewards(&s.marks, s.stride, s.len))?;
        if self.config.next_state == NextState::NextStride {
            let states: Vec<_> = run.strides.iter().map(|r| r.state.clone()).collect();
            for (k, r) in run.strides.iter_mut().enumerate() {
                r.next_state = states.get(k + 1).cloned();
            }
        }
        Ok(run.tuples())
    }

    /// Appends the session's tuples to the replay database, once.
    pub fn commit(&self, id: &str) -> Result<usize, ServeError> {
        let mut sessions = self.sessions.lock().unwrap();
        let s = sessions
            .get_mut(id)
            .ok_or_else(|| ServeError::NotFound(format!("session {id}")))?;
        if s.status == SessionStatus::Committed {
            return Err(ServeError::Committed(id.into()));
        }
        let tuples = self.session_tuples(s)?;
        let n = tuples.len();
        {
            let mut db = self.replay.lock().unwrap();
            for t in tuples {
                db.push(t)?;
            }
        }
        s.status = SessionStatus::Committed;
        log::info!("session {id} committed {n} tuples");
        Ok(n)
    }

    pub fn replay_len(&self) -> usize {
        self.replay.lock().unwrap().len()
    }

    pub fn replay_snapshot(&self) -> ReplayDb {
        self.replay.lock().unwrap().clone()
    }

    pub fn net(&self) -> QNet {
        self.net.read().unwrap().clone()
    }

    /// Queues a retraining job on a snapshot of the replay database. Only
    /// one job may be active.
    pub fn trigger_retrain(self: &Arc<Self>) -> Result<String, ServeError> {
        let (job_id, snapshot) = {
            let mut jobs = self.jobs.lock().unwrap();
            if jobs.iter().any(JobStatus::active) {
                return Err(ServeError::Busy);
            }
            let snapshot = self.replay_snapshot();
            if snapshot.is_empty() {
                return Err(ServeError::EmptyReplay);
            }
            let job_id = format!("j{}", jobs.len() + 1);
            jobs.push(JobStatus {
                job_id: job_id.clone(),
                state: JobState::Queued,
                transitions: vec![JobState::Queued],
                replay_size: snapshot.len(),
                steps: 0,
                first_loss: None,
                final_loss: None,
                error: None,
            });
            (job_id, snapshot)
        };
        let svc = Arc::clone(self);
        let id = job_id.clone();
        std::thread::spawn(move || svc.run_job(&id, snapshot));
        Ok(job_id)
    }

    fn update_job(&self, id: &str, f: impl FnOnce(&mut JobStatus)) {
        if let Some(j) = self.jobs.lock().unwrap().iter_mut().find(|j| j.job_id == id) {
            f(j);
        }
    }

    fn run_job(&self, id: &str, snapshot: ReplayDb) {
        self.update_job(id, |j| j.set(JobState::Running));
        let mut net = self.net();
        let seed = self.learn.seed ^ id.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
        let result = train_on_replay(
            &mut net,
            &snapshot,
            self.config.train_steps,
            &self.learn,
            self.config.train_lambda,
            seed,
            Execution::Parallel,
        );
        match result {
            Ok(losses) => {
                if let Some(path) = &self.checkpoint_out {
                    if let Err(e) = std::fs::write(path, net.save_checkpoint()) {
                        log::warn!("could not write checkpoint {}: {e}", path.display());
                    }
                }
                *self.net.write().unwrap() = net;
                self.update_job(id, |j| {
                    j.steps = losses.len();
                    j.first_loss = losses.first().copied();
                    j.final_loss = losses.last().copied();
                    j.set(JobState::Done);
                });
            }
            Err(e) => self.update_job(id, |j| {
                j.error = Some(e.to_string());
                j.set(JobState::Failed);
            }),
        }
    }

    pub fn job(&self, id: &str) -> Result<JobStatus, ServeError> {
        self.jobs
            .lock()
            .unwrap()
            .iter()
            .find(|j| j.job_id == id)
            .cloned()
            .ok_or_else(|| ServeError::NotFound(format!("job {id}")))
    }
}

fn check_speed(s: f64) -> Result<(), ServeError> {
    if s.is_finite() && s > 0.0 {
        Ok(())
    } else {
        Err(ServeError::Invalid(format!("speed must be positive, got {s}")))
    }
}
