mod common;

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use common::*;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_replaykit"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn serve_on_empty_root_lists_nothing() {
    let root = tempfile::tempdir().unwrap();
    let mut child = bin()
        .args(["serve", "--media-root", p(root.path()), "--bind", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().strip_prefix("listening on ").unwrap().to_string();
    let body: serde_json::Value = tokio::runtime::Runtime::new()
        .unwrap()
        .block_on(async { reqwest::get(format!("{url}/api/sessions")).await.unwrap().json().await.unwrap() });
    child.kill().unwrap();
    child.wait().unwrap();
    assert_eq!(body["sessions"], serde_json::json!([]));
}

#[test]
fn bad_bind_exits_2() {
    let root = tempfile::tempdir().unwrap();
    let held = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = held.local_addr().unwrap().to_string();
    let out = run(&["serve", "--media-root", p(root.path()), "--bind", &addr]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["serve", "--media-root", p(root.path()), "--bind", "not-an-address"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn http_provider_without_key_is_config_error() {
    let root = tempfile::tempdir().unwrap();
    let out = bin()
        .env_remove("REPLAY_LLM_API_KEY")
        .args(["serve", "--media-root", p(root.path()), "--bind", "127.0.0.1:0", "--provider", "http"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_exits_2() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("bad.toml");
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = run(&["serve", "--media-root", p(root.path()), "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn import_with_frames_dir() {
    let root = tempfile::tempdir().unwrap();
    let src = fixture_sessions().join("p03");
    let out = run(&[
        "import",
        "--media-root",
        p(root.path()),
        "--id",
        "p03-copy",
        "--video",
        p(&src.join("video.mp4")),
        "--srt",
        p(&src.join("transcript.srt")),
        "--brief",
        p(&src.join("brief.txt")),
        "--frames",
        p(&src.join("frames")),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let files = replaykit::library::SessionFiles::load(&root.path().join("p03-copy")).unwrap();
    assert!(files.violations().is_empty());
    assert_eq!(files.frames.len(), 22);
    assert_eq!(files.manifest.duration.0, 630_000);
    assert_eq!(files.manifest.video_uri.as_deref(), Some("video.mp4"));
}

#[test]
fn import_malformed_srt_cites_line() {
    let root = tempfile::tempdir().unwrap();
    let srt = root.path().join("bad.srt");
    std::fs::write(&srt, "1\n00:00:01,000 --> 00:00:02,000\nok\n\n2\n00:00:03,000 -> 00:00:04,000\nbroken\n").unwrap();
    let media = root.path().join("media");
    let out = run(&["import", "--media-root", p(&media), "--id", "bad", "--srt", p(&srt)]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("validation failed"), "{stderr}");
    assert!(stderr.contains("line 6"), "{stderr}");
    assert!(!media.join("bad").exists());
}

#[test]
fn failed_extractor_leaves_nothing() {
    let root = tempfile::tempdir().unwrap();
    let src = fixture_sessions().join("p03");
    let media = root.path().join("media");
    let out = run(&[
        "import",
        "--media-root",
        p(&media),
        "--id",
        "x1",
        "--video",
        p(&src.join("video.mp4")),
        "--srt",
        p(&src.join("transcript.srt")),
        "--extract-cmd",
        "touch {outdir}/frame_0.jpg; exit 1",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("extractor failed"));
    // Rollback oracle: the media root holds no entries at all.
    let leftovers: Vec<_> = std::fs::read_dir(&media).unwrap().collect();
    assert!(leftovers.is_empty());
}

#[test]
fn extractor_populates_frames() {
    let root = tempfile::tempdir().unwrap();
    let src = fixture_sessions().join("p03");
    let out = run(&[
        "import",
        "--media-root",
        p(root.path()),
        "--id",
        "x2",
        "--video",
        p(&src.join("video.mp4")),
        "--srt",
        p(&src.join("transcript.srt")),
        "--stride-ms",
        "250000",
        "--extract-cmd",
        "test -f {video} && for t in 0 {stride_ms} 500000; do echo x > {outdir}/frame_$t.png; done",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let files = replaykit::library::SessionFiles::load(&root.path().join("x2")).unwrap();
    let ts: Vec<u64> = files.frames.frames().iter().map(|f| f.t.0).collect();
    assert_eq!(ts, [0, 250_000, 500_000]);
}

#[test]
fn import_rejects_bad_id_and_existing() {
    let root = fixture_root();
    let srt = fixture_sessions().join("p03/transcript.srt");
    let out = run(&["import", "--media-root", p(root.path()), "--id", "Bad_Id", "--srt", p(&srt)]);
    assert_eq!(out.status.code(), Some(3));
    let out = run(&["import", "--media-root", p(root.path()), "--id", "p03", "--srt", p(&srt)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn simulate_rejects_zero_speed() {
    let root = fixture_root();
    let out = run(&["simulate", "--media-root", p(root.path()), "--session", "live3", "--speed", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn batch_unknown_session_exits_3() {
    let root = fixture_root();
    let refs = root.path().join("p03/refs.csv");
    let out = run(&["batch", "--media-root", p(root.path()), "--session", "nope", "--refs", p(&refs)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown session"));
}

#[test]
fn batch_p03_writes_two_rows() {
    let root = fixture_root();
    let refs = root.path().join("p03/refs.csv");
    let table = root.path().join("table.csv");
    let out = run(&[
        "batch",
        "--media-root",
        p(root.path()),
        "--session",
        "p03",
        "--refs",
        p(&refs),
        "--type",
        "question",
        "--out",
        p(&table),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mut reader = csv::Reader::from_path(&table).unwrap();
    assert_eq!(reader.records().count(), 2);
}

#[test]
fn export_of_empty_session_is_header_only() {
    let root = fixture_root();
    let out = run(&["export", "--media-root", p(root.path()), "--session", "live3"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        "session_id,message_id,t_millis,type,phase,phase_source,decision,denial_reason,score,comment,label,text\r\n"
    );
    let out = run(&["export", "--media-root", p(root.path()), "--session", "ghost"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["batch", "--session", "p03"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}
