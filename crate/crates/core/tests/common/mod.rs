#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use replaykit::api::{router, ApiOptions};
use replaykit::chain::{Chain, ChainSettings};
use replaykit::context::Budget;
use replaykit::engine::{Engine, TemplateSource};
use replaykit::gateway::Gateway;
use replaykit::relay::{Relay, RelayConfig};
use replaykit::store::Store;
use serde_json::Value;
use tokio_tungstenite::tungstenite::Message;

pub fn fixture_sessions() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/sessions")
}

pub fn copy_dir(src: &Path, dst: &Path) {
    std::fs::create_dir_all(dst).unwrap();
    for entry in std::fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        let target = dst.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            std::fs::copy(entry.path(), &target).unwrap();
        }
    }
}

/// A scratch media root holding copies of the fixture sessions.
pub fn fixture_root() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&fixture_sessions(), dir.path());
    dir
}

pub fn mock_engine(root: &Path) -> Engine {
    let store = Arc::new(Store::open(root).unwrap());
    Engine::new(
        store,
        Chain::new(Gateway::mock(), ChainSettings::default()),
        TemplateSource::Builtin,
        Budget::default(),
    )
}

pub struct Server {
    pub addr: SocketAddr,
    pub relay: Arc<Relay>,
    pub task: tokio::task::JoinHandle<()>,
}

impl Server {
    pub fn http(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }

    pub fn ws(&self, session: &str, role: &str, resume: Option<&str>) -> String {
        match resume {
            Some(t) => format!("ws://{}/ws/{session}?role={role}&resume={t}", self.addr),
            None => format!("ws://{}/ws/{session}?role={role}", self.addr),
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.task.abort();
    }
}

pub async fn start_server(root: &Path) -> Server {
    start_server_with(mock_engine(root)).await
}

pub async fn start_server_with(engine: Engine) -> Server {
    let relay = Relay::new(engine, RelayConfig::default());
    let app = router(relay.clone(), &ApiOptions::default());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let task = tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    Server { addr, relay, task }
}

pub type Socket =
    tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

/// A relay client that records every event it receives.
pub struct Client {
    pub socket: Socket,
    pub received: Vec<Value>,
}

impl Client {
    pub async fn connect(url: &str) -> Client {
        let (socket, _) = tokio_tungstenite::connect_async(url).await.unwrap();
        Client {
            socket,
            received: Vec::new(),
        }
    }

    pub async fn send(&mut self, frame: Value) {
        self.socket.send(Message::Text(frame.to_string().into())).await.unwrap();
    }

    /// Next event, or `None` on close or after `wait` without one.
    pub async fn next_within(&mut self, wait: Duration) -> Option<Value> {
        loop {
            match tokio::time::timeout(wait, self.socket.next()).await {
                Ok(Some(Ok(Message::Text(t)))) => {
                    let v: Value = serde_json::from_str(&t).unwrap();
                    self.received.push(v.clone());
                    return Some(v);
                }
                Ok(Some(Ok(Message::Close(_)))) | Ok(None) | Ok(Some(Err(_))) | Err(_) => return None,
                Ok(Some(Ok(_))) => continue,
            }
        }
    }

    pub async fn next(&mut self) -> Value {
        self.next_within(Duration::from_secs(10))
            .await
            .expect("expected an event from the relay")
    }

    /// Reads until an event of `kind` arrives and returns it.
    pub async fn expect_kind(&mut self, kind: &str) -> Value {
        loop {
            let ev = self.next().await;
            if ev["kind"] == kind {
                return ev;
            }
        }
    }

    pub fn seqs(&self) -> Vec<u64> {
        self.received.iter().filter_map(|e| e["seq"].as_u64()).collect()
    }

    pub async fn close(mut self) {
        let _ = self.socket.close(None).await;
    }
}

pub async fn create_live(server: &Server) -> String {
    let resp = reqwest::Client::new()
        .post(server.http("/api/live"))
        .json(&serde_json::json!({"title": "test"}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 201);
    let v: Value = resp.json().await.unwrap();
    v["id"].as_str().unwrap().to_string()
}

pub async fn upload_frame(server: &Server, session: &str, name: &str, bytes: &[u8]) {
    let resp = reqwest::Client::new()
        .put(server.http(&format!("/media/{session}/frames/{name}")))
        .body(bytes.to_vec())
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 201, "upload {name}");
}
