//! JSON over HTTP plus a per-session WebSocket for playback and marking.
//! Every message carries `"v": 1`.

use crate::marks::Mark;
use crate::service::{JobStatus, Service, Session, BASE_FPS};
use crate::{ServeError, PROTOCOL_VERSION};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use ptrack::sim::{frame_png, EpisodeStream};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::sync::Arc;
use std::time::Duration;

type Shared = Arc<Service>;

pub fn router(svc: Shared) -> Router {
    Router::new()
        .route("/runs", get(list_runs))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/marks", post(post_marks))
        .route("/sessions/{id}/speed", post(post_speed))
        .route("/sessions/{id}/commit", post(post_commit))
        .route("/sessions/{id}/ws", get(ws_upgrade))
        .route("/train/trigger", post(post_trigger))
        .route("/train/status/{job_id}", get(get_status))
        .with_state(svc)
}

impl ServeError {
    pub fn code(&self) -> &'static str {
        match self {
            ServeError::NotFound(_) => "not_found",
            ServeError::Committed(_) => "committed",
            ServeError::OutOfRange { .. } => "out_of_range",
            ServeError::Invalid(_) => "invalid",
            ServeError::EmptyReplay => "empty_replay",
            ServeError::Busy => "busy",
            ServeError::UnsupportedVersion(_) => "unsupported_version",
            ServeError::Learn(_) | ServeError::Sim(_) => "internal",
        }
    }

    fn status(&self) -> StatusCode {
        match self {
            ServeError::NotFound(_) => StatusCode::NOT_FOUND,
            ServeError::Committed(_) | ServeError::Busy => StatusCode::CONFLICT,
            ServeError::OutOfRange { .. } | ServeError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServeError::EmptyReplay => StatusCode::PRECONDITION_FAILED,
            ServeError::UnsupportedVersion(_) => StatusCode::BAD_REQUEST,
            ServeError::Learn(_) | ServeError::Sim(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn body(&self) -> Value {
        json!({"v": PROTOCOL_VERSION, "type": "error", "code": self.code(), "message": self.to_string()})
    }
}

impl IntoResponse for ServeError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.body())).into_response()
    }
}

fn check_version(v: u32) -> Result<(), ServeError> {
    if v == PROTOCOL_VERSION {
        Ok(())
    } else {
        Err(ServeError::UnsupportedVersion(v))
    }
}

fn ok(body: Value) -> Json<Value> {
    let mut body = body;
    body["v"] = json!(PROTOCOL_VERSION);
    Json(body)
}

fn session_json(s: &Session) -> Value {
    let mut v = serde_json::to_value(s).expect("session serializes");
    v["v"] = json!(PROTOCOL_VERSION);
    v
}

fn job_json(j: &JobStatus) -> Value {
    let mut v = serde_json::to_value(j).expect("job serializes");
    v["v"] = json!(PROTOCOL_VERSION);
    v["type"] = json!("train.status");
    v
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub v: u32,
    pub episode_id: String,
    pub run_id: String,
    #[serde(default)]
    pub speed: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Marks {
    pub v: u32,
    pub marks: Vec<Mark>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Speed {
    pub v: u32,
    pub multiplier: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Versioned {
    pub v: u32,
}

async fn list_runs(State(svc): State<Shared>) -> Json<Value> {
    let runs: Vec<Value> = svc
        .catalog()
        .into_iter()
        .map(|(run_id, episode_id, frames)| json!({"run_id": run_id, "episode_id": episode_id, "frames": frames}))
        .collect();
    ok(json!({"runs": runs, "stride": svc.config.stride}))
}

async fn create_session(State(svc): State<Shared>, Json(req): Json<CreateSession>) -> Result<Response, ServeError> {
    check_version(req.v)?;
    let s = svc.create_session(&req.episode_id, &req.run_id, req.speed)?;
    Ok((StatusCode::CREATED, ok(json!({"session_id": s.id}))).into_response())
}

async fn get_session(State(svc): State<Shared>, Path(id): Path<String>) -> Result<Json<Value>, ServeError> {
    Ok(Json(session_json(&svc.session(&id)?)))
}

async fn post_marks(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<Marks>,
) -> Result<Json<Value>, ServeError> {
    check_version(req.v)?;
    let merged = svc.submit_marks(&id, &req.marks)?;
    Ok(ok(json!({"type": "marks", "marks": merged})))
}

async fn post_speed(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<Speed>,
) -> Result<Json<Value>, ServeError> {
    check_version(req.v)?;
    svc.set_speed(&id, req.multiplier)?;
    Ok(ok(json!({"type": "speed", "multiplier": req.multiplier})))
}

async fn post_commit(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<Versioned>,
) -> Result<Json<Value>, ServeError> {
    check_version(req.v)?;
    let appended = svc.commit(&id)?;
    Ok(ok(json!({"type": "committed", "appended": appended})))
}

async fn post_trigger(State(svc): State<Shared>, Json(req): Json<Versioned>) -> Result<Response, ServeError> {
    check_version(req.v)?;
    let job_id = svc.trigger_retrain()?;
    Ok((StatusCode::ACCEPTED, ok(json!({"type": "train.job", "job_id": job_id}))).into_response())
}

async fn get_status(State(svc): State<Shared>, Path(job_id): Path<String>) -> Result<Json<Value>, ServeError> {
    Ok(Json(job_json(&svc.job(&job_id)?)))
}

/// Client-to-server channel messages.
#[derive(Debug, Deserialize, Serialize, PartialEq)]
#[serde(tag = "type", deny_unknown_fields)]
pub enum ClientMessage {
    #[serde(rename = "mark")]
    Mark { v: u32, start: usize, end: usize },
    #[serde(rename = "speed")]
    Speed { v: u32, multiplier: f64 },
    #[serde(rename = "ack")]
    Ack { v: u32, index: usize },
    #[serde(rename = "pause")]
    Pause { v: u32 },
    #[serde(rename = "resume")]
    Resume { v: u32 },
    #[serde(rename = "commit")]
    Commit { v: u32 },
    #[serde(rename = "train.trigger")]
    TrainTrigger { v: u32 },
    #[serde(rename = "train.status")]
    TrainStatus { v: u32, job_id: String },
}

impl ClientMessage {
    fn version(&self) -> u32 {
        match self {
            ClientMessage::Mark { v, .. }
            | ClientMessage::Speed { v, .. }
            | ClientMessage::Ack { v, .. }
            | ClientMessage::Pause { v }
            | ClientMessage::Resume { v }
            | ClientMessage::Commit { v }
            | ClientMessage::TrainTrigger { v }
            | ClientMessage::TrainStatus { v, .. } => *v,
        }
    }
}

async fn ws_upgrade(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    ws: WebSocketUpgrade,
) -> Result<Response, ServeError> {
    svc.session(&id)?;
    Ok(ws.on_upgrade(move |socket| playback(svc, id, socket)))
}

/// One server-to-client frame message.
pub fn frame_message(svc: &Service, session: &Session, frame: &ptrack::belief::Frame) -> Result<Value, ServeError> {
    let run = &svc.run(&session.run_id)?.run;
    let step = &run.steps[frame.index];
    let png = base64::engine::general_purpose::STANDARD.encode(frame_png(frame)?);
    Ok(json!({
        "v": PROTOCOL_VERSION,
        "type": "frame",
        "index": frame.index,
        "png_base64": png,
        "box": step.report,
        "action": [step.action.motion, step.action.appearance],
    }))
}

fn frame_interval(speed: f64) -> Duration {
    Duration::from_secs_f64(1.0 / (speed * BASE_FPS))
}

/// Streams frames from the session cursor at the session speed while
/// handling marks, speed changes, acknowledgements and commits.
async fn playback(svc: Shared, id: String, mut socket: WebSocket) {
    let session = match svc.session(&id) {
        Ok(s) => s,
        Err(_) => return,
    };
    let spec = match svc.episode(&session.episode_id) {
        Ok(s) => s.clone(),
        Err(_) => return,
    };
    let mut frames = match EpisodeStream::new(spec) {
        Ok(s) => s.map(|(f, _)| f).skip(session.cursor),
        Err(e) => {
            let _ = socket.send(Message::Text(ServeError::from(e).body().to_string().into())).await;
            return;
        }
    };
    let mut paused = false;
    let mut finished = false;
    let mut speed = session.speed;
    let mut ticker = tokio::time::interval(frame_interval(speed));
    loop {
        tokio::select! {
            _ = ticker.tick(), if !paused && !finished => {
                let msg = match frames.next() {
                    Some(frame) => {
                        let current = svc.session(&id).unwrap_or(session.clone());
                        match frame_message(&svc, &current, &frame) {
                            Ok(m) => m,
                            Err(e) => e.body(),
                        }
                    }
                    None => {
                        finished = true;
                        json!({"v": PROTOCOL_VERSION, "type": "end", "frames": session.len})
                    }
                };
                if socket.send(Message::Text(msg.to_string().into())).await.is_err() {
                    return;
                }
            }
            incoming = socket.recv() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                    Some(Ok(_)) => continue,
                };
                let reply = match serde_json::from_str::<ClientMessage>(&text) {
                    Err(e) => Some(ServeError::Invalid(format!("bad message: {e}")).body()),
                    Ok(msg) => {
                        match &msg {
                            ClientMessage::Pause { .. } => paused = true,
                            ClientMessage::Resume { .. } => paused = false,
                            _ => {}
                        }
                        handle_message(&svc, &id, msg)
                    }
                };
                if let Ok(s) = svc.session(&id) {
                    if s.speed != speed {
                        speed = s.speed;
                        ticker = tokio::time::interval(frame_interval(speed));
                        ticker.reset();
                    }
                }
                if let Some(r) = reply {
                    if socket.send(Message::Text(r.to_string().into())).await.is_err() {
                        return;
                    }
                }
            }
        }
    }
}

/// Applies a channel message; returns the reply, if any.
pub fn handle_message(svc: &Arc<Service>, id: &str, msg: ClientMessage) -> Option<Value> {
    if let Err(e) = check_version(msg.version()) {
        return Some(e.body());
    }
    let result = match msg {
        ClientMessage::Mark { start, end, .. } => {
            if start > end {
                Err(ServeError::Invalid(format!("mark {start}..{end} is reversed")))
            } else {
                svc.submit_marks(id, &[Mark::new(start, end)])
                    .map(|m| Some(json!({"type": "marks", "marks": m})))
            }
        }
        ClientMessage::Speed { multiplier, .. } => svc
            .set_speed(id, multiplier)
            .map(|_| Some(json!({"type": "speed", "multiplier": multiplier}))),
        ClientMessage::Ack { index, .. } => svc.acknowledge(id, index).map(|_| None),
        ClientMessage::Pause { .. } => Ok(Some(json!({"type": "paused"}))),
        ClientMessage::Resume { .. } => Ok(Some(json!({"type": "resumed"}))),
        ClientMessage::Commit { .. } => svc.commit(id).map(|n| Some(json!({"type": "committed", "appended": n}))),
        ClientMessage::TrainTrigger { .. } => svc
            .trigger_retrain()
            .map(|job_id| Some(json!({"type": "train.job", "job_id": job_id}))),
        ClientMessage::TrainStatus { job_id, .. } => svc.job(&job_id).map(|j| Some(job_json(&j))),
    };
    match result {
        Ok(Some(mut v)) => {
            v["v"] = json!(PROTOCOL_VERSION);
            Some(v)
        }
        Ok(None) => None,
        Err(e) => Some(e.body()),
    }
}
