//! Scripted live user: replays a recorded session's utterances and frames
//! against a relay as `role=user`, on the recorded schedule scaled by
//! `1/speed`, and collects the messages delivered back.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::time::{sleep_until, Instant};
use tokio_tungstenite::tungstenite::Message;

use crate::library::SessionFiles;
use crate::session::Timecode;

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("speed must be a positive finite number, got {0}")]
    BadSpeed(f64),
    #[error("bad target `{0}`: expected ws://host:port[/ws/<live-session-id>]")]
    BadTarget(String),
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("creating live session failed: {0}")]
    CreateLive(String),
    #[error("frame upload failed for `{name}`: {message}")]
    Upload { name: String, message: String },
    #[error("cannot read frame `{path}`: {source}")]
    ReadFrame {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("connection lost and {0} reconnect attempts failed")]
    Lost(u32),
}

#[derive(Debug, Clone)]
pub struct SimulateOptions {
    pub target: String,
    pub speed: f64,
    /// Once everything is sent, stop after this long without incoming
    /// frames; `None` waits until the server closes the connection.
    pub linger: Option<Duration>,
    pub max_reconnects: u32,
}

#[derive(Debug, Clone, Default)]
pub struct SimulateReport {
    pub live_session_id: String,
    pub utterances_sent: usize,
    pub frames_sent: usize,
    pub delivered: Vec<(String, String)>,
    pub errors: Vec<Value>,
}

#[derive(Debug, Clone)]
enum Scheduled {
    Utterance(Value),
    Frame { name: String, path: std::path::PathBuf },
}

struct Target {
    http_base: String,
    ws_base: String,
    session_id: Option<String>,
}

fn parse_target(target: &str) -> Result<Target, SimulateError> {
    let bad = || SimulateError::BadTarget(target.to_string());
    let (scheme, rest) = target.split_once("://").ok_or_else(bad)?;
    let http_scheme = match scheme {
        "ws" => "http",
        "wss" => "https",
        _ => return Err(bad()),
    };
    let rest = rest.split('?').next().unwrap_or_default().trim_end_matches('/');
    let (host, path) = match rest.split_once('/') {
        Some((h, p)) => (h, Some(p)),
        None => (rest, None),
    };
    if host.is_empty() {
        return Err(bad());
    }
    let session_id = match path {
        None => None,
        Some(p) => Some(p.strip_prefix("ws/").filter(|id| !id.is_empty() && !id.contains('/')).ok_or_else(bad)?.to_string()),
    };
    Ok(Target {
        http_base: format!("{http_scheme}://{host}"),
        ws_base: format!("{scheme}://{host}"),
        session_id,
    })
}

fn schedule(files: &SessionFiles) -> Vec<(Timecode, Scheduled)> {
    let mut out: Vec<(Timecode, u8, Scheduled)> = Vec::new();
    for u in &files.utterances {
        out.push((
            u.start,
            0,
            Scheduled::Utterance(json!({"text": u.text, "end": u.end, "speaker": u.speaker})),
        ));
    }
    for f in files.frames.frames() {
        let name = Path::new(&f.uri).file_name().unwrap_or_default().to_string_lossy().into_owned();
        out.push((
            f.t,
            1,
            Scheduled::Frame {
                name,
                path: files.dir.join(&f.uri),
            },
        ));
    }
    out.sort_by_key(|(t, order, _)| (*t, *order));
    out.into_iter().map(|(t, _, s)| (t, s)).collect()
}

type Socket = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn open(ws_base: &str, session_id: &str, resume: Option<&str>) -> Result<Socket, SimulateError> {
    let mut url = format!("{ws_base}/ws/{session_id}?role=user");
    if let Some(token) = resume {
        url.push_str("&resume=");
        url.push_str(token);
    }
    let (socket, _) = tokio_tungstenite::connect_async(url)
        .await
        .map_err(|e| SimulateError::Connect(e.to_string()))?;
    Ok(socket)
}

/// Runs the simulation. `on_deliver` is called once per distinct message id.
pub async fn simulate(
    files: &SessionFiles,
    options: &SimulateOptions,
    mut on_deliver: impl FnMut(&str, &str),
) -> Result<SimulateReport, SimulateError> {
    if !(options.speed.is_finite() && options.speed > 0.0) {
        return Err(SimulateError::BadSpeed(options.speed));
    }
    let target = parse_target(&options.target)?;
    let http = reqwest::Client::new();
    let session_id = match target.session_id.clone() {
        Some(id) => id,
        None => {
            let resp = http
                .post(format!("{}/api/live", target.http_base))
                .json(&json!({"title": format!("Simulated {}", files.manifest.id), "brief": files.brief}))
                .send()
                .await
                .map_err(|e| SimulateError::CreateLive(e.to_string()))?;
            if !resp.status().is_success() {
                return Err(SimulateError::CreateLive(format!("HTTP {}", resp.status())));
            }
            let body: Value = resp.json().await.map_err(|e| SimulateError::CreateLive(e.to_string()))?;
            body["id"]
                .as_str()
                .ok_or_else(|| SimulateError::CreateLive("response has no id".into()))?
                .to_string()
        }
    };

    let plan = schedule(files);
    let mut report = SimulateReport {
        live_session_id: session_id.clone(),
        ..Default::default()
    };
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut resume: Option<String> = None;
    let mut socket = open(&target.ws_base, &session_id, None).await?;
    let start = Instant::now();
    let mut next = 0usize;
    let mut reconnects = 0u32;

    loop {
        let due = plan
            .get(next)
            .map(|(t, _)| start + Duration::from_secs_f64(t.0 as f64 / 1000.0 / options.speed));
        let linger_deadline = match (due, options.linger) {
            (None, Some(l)) => Some(Instant::now() + l),
            _ => None,
        };
        tokio::select! {
            _ = async { sleep_until(due.expect("guarded")).await }, if due.is_some() => {
                let (t, item) = &plan[next];
                next += 1;
                let frame = match item {
                    Scheduled::Utterance(body) => {
                        report.utterances_sent += 1;
                        json!({"t": t, "kind": "utterance", "body": body})
                    }
                    Scheduled::Frame { name, path } => {
                        let bytes = tokio::fs::read(path).await.map_err(|source| SimulateError::ReadFrame {
                            path: path.display().to_string(),
                            source,
                        })?;
                        let resp = http
                            .put(format!("{}/media/{session_id}/frames/{name}", target.http_base))
                            .body(bytes)
                            .send()
                            .await
                            .map_err(|e| SimulateError::Upload { name: name.clone(), message: e.to_string() })?;
                        if !resp.status().is_success() {
                            return Err(SimulateError::Upload { name: name.clone(), message: format!("HTTP {}", resp.status()) });
                        }
                        report.frames_sent += 1;
                        json!({"t": t, "kind": "frame_notice", "body": {"name": name}})
                    }
                };
                if socket.send(Message::Text(frame.to_string().into())).await.is_err() {
                    // The frame is re-sent after reconnecting.
                    next -= 1;
                    socket = reconnect(&target.ws_base, &session_id, resume.as_deref(), &mut reconnects, options.max_reconnects).await?;
                }
            }
            _ = async { sleep_until(linger_deadline.expect("guarded")).await }, if linger_deadline.is_some() => {
                let _ = socket.close(None).await;
                break;
            }
            incoming = socket.next() => match incoming {
                Some(Ok(Message::Text(text))) => {
                    let Ok(ev) = serde_json::from_str::<Value>(&text) else { continue };
                    match ev["kind"].as_str() {
                        Some("hello") => {
                            if let Some(token) = ev["body"]["resume_token"].as_str() {
                                resume = Some(token.to_string());
                            }
                        }
                        Some("deliver") => {
                            let id = ev["body"]["message_id"].as_str().unwrap_or_default().to_string();
                            let text = ev["body"]["text"].as_str().unwrap_or_default().to_string();
                            let ack = json!({"t": ev["t"], "kind": "deliver", "body": {"message_id": id, "ack": true}});
                            let _ = socket.send(Message::Text(ack.to_string().into())).await;
                            if seen.insert(id.clone()) {
                                on_deliver(&id, &text);
                                report.delivered.push((id, text));
                            }
                        }
                        Some("error") => report.errors.push(ev["body"].clone()),
                        _ => {}
                    }
                }
                Some(Ok(Message::Close(_))) => break,
                Some(Ok(_)) => {}
                Some(Err(_)) | None => {
                    socket = reconnect(&target.ws_base, &session_id, resume.as_deref(), &mut reconnects, options.max_reconnects).await?;
                }
            }
        }
    }
    Ok(report)
}

async fn reconnect(
    ws_base: &str,
    session_id: &str,
    resume: Option<&str>,
    attempts: &mut u32,
    max: u32,
) -> Result<Socket, SimulateError> {
    loop {
        if *attempts >= max {
            return Err(SimulateError::Lost(max));
        }
        *attempts += 1;
        tokio::time::sleep(Duration::from_millis(200 * u64::from(*attempts))).await;
        if let Ok(s) = open(ws_base, session_id, resume).await {
            return Ok(s);
        }
    }
}
