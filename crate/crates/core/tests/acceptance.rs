//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line. Child processes for the crash and
//! restart checks re-execute this binary with `ACCEPTANCE_CHILD` set.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use chrono::{TimeZone, Utc};
use common::*;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use replaykit::batch::{parse_refs, rows_to_csv, run_batch};
use replaykit::context::{assemble, Budget, Session};
use replaykit::engine::GenerateParams;
use replaykit::gateway::Part;
use replaykit::library::{write_manifest, SessionFiles};
use replaykit::media::{FrameIndex, SamplingPolicy, sample_frames};
use replaykit::prompt::TemplateSet;
use replaykit::session::{
    Decision, MessageType, Origin, PhaseSource, SessionManifest, Speaker, SupportMessage,
    TaskPhase, Timecode, Utterance,
};
use replaykit::store::{Store, StoreError, MESSAGES_FILE};
use replaykit::transcript::{parse_srt, parse_timecode, serialize_srt, slice_at};
use serde_json::{json, Value};

const CHILD_ENV: &str = "ACCEPTANCE_CHILD";

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap()
}

// ---------------------------------------------------------------- generators

fn text_strategy() -> impl Strategy<Value = String> {
    prop::collection::vec("[A-Za-z0-9,.?!']{1,8}", 1..8).prop_map(|w| w.join(" "))
}

fn speaker_strategy() -> impl Strategy<Value = Speaker> {
    prop_oneof![Just(Speaker::User), Just(Speaker::Wizard), Just(Speaker::Agent)]
}

/// Canonical transcripts: indexed from 0, starts non-decreasing, end ≥ start.
fn transcript_strategy(max_len: usize) -> impl Strategy<Value = Vec<Utterance>> {
    prop::collection::vec((0u64..20_000, 0u64..9_000, speaker_strategy(), text_strategy()), 0..max_len).prop_map(
        |rows| {
            let mut start = 0u64;
            rows.into_iter()
                .enumerate()
                .map(|(index, (gap, dur, speaker, text))| {
                    start += gap;
                    Utterance {
                        index,
                        start: Timecode(start),
                        end: Timecode(start + dur),
                        speaker,
                        text,
                    }
                })
                .collect()
        },
    )
}

fn frame_index(session: &str, times: &BTreeSet<u64>) -> FrameIndex {
    FrameIndex::from_listing(session, "frames", times.iter().map(|t| (format!("frame_{t}.jpg"), Some(10))))
        .unwrap()
        .index
}

fn manifest(id: &str, duration: u64) -> SessionManifest {
    SessionManifest {
        id: id.to_string(),
        title: id.to_string(),
        duration: Timecode(duration),
        video_uri: None,
        transcript_uri: "transcript.srt".into(),
        frames_dir: "frames".into(),
        brief_uri: None,
        origin: Origin::Imported,
        created_at: Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(),
    }
}

fn message(id: &str, session: &str, t: u64, msg_type: MessageType, decision: Decision) -> SupportMessage {
    SupportMessage {
        id: id.to_string(),
        session_id: session.to_string(),
        t: Timecode(t),
        msg_type,
        phase: TaskPhase::Planning,
        phase_source: PhaseSource::Model,
        prompt_version: "0000000000000000".into(),
        classify_version: None,
        classified_phase: None,
        classification_raw: None,
        provider_id: "mock".into(),
        text: format!("message {id}"),
        decision,
        delivered_seq: None,
        created_at: Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(),
    }
}

fn session_strategy() -> impl Strategy<Value = (Session, u64)> {
    let decision = prop_oneof![
        Just(Decision::Pending),
        Just(Decision::Approved),
        Just(Decision::Denied { reason: "no".into() })
    ];
    let msg_type = prop::sample::select(MessageType::ALL.to_vec());
    (
        transcript_strategy(30),
        prop::collection::btree_set(0u64..400_000, 0..30),
        prop::collection::vec((0u64..400_000, msg_type, decision), 0..6),
        prop::option::of(text_strategy()),
        0.0f64..=1.0,
    )
        .prop_map(|(utterances, frames, msgs, brief, frac)| {
            let last = utterances.last().map_or(0, |u| u.end.0);
            let duration = last.max(frames.last().copied().unwrap_or(0)).max(1000);
            let messages = msgs
                .into_iter()
                .enumerate()
                .map(|(k, (t, ty, d))| message(&format!("m{k}"), "s", t.min(duration), ty, d))
                .collect();
            let session = Session {
                manifest: manifest("s", duration),
                utterances,
                frames: frame_index("s", &frames),
                brief,
                messages,
                open_ended: false,
            };
            let t = (duration as f64 * frac) as u64;
            (session, t)
        })
}

// ---------------------------------------------------------------- criteria

fn slice_oracle() -> Outcome {
    let started = Instant::now();
    let strategy = (transcript_strategy(60), 0u64..700_000, 0u64..700_000);
    runner(1000)
        .run(&strategy, |(utts, a, b)| {
            let oracle: Vec<Utterance> = utts.iter().filter(|u| u.start.0 <= a).cloned().collect();
            prop_assert_eq!(slice_at(&utts, Timecode(a)), &oracle[..]);
            let (lo, hi) = (a.min(b), a.max(b));
            let small = slice_at(&utts, Timecode(lo));
            let large = slice_at(&utts, Timecode(hi));
            prop_assert!(large.starts_with(small), "prefix monotonicity");
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    check!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("1000 cases in {:.2}s", elapsed.as_secs_f64()))
}

fn srt_round_trip() -> Outcome {
    check!(parse_timecode("00:08:41") == Ok(Timecode(521_000)), "00:08:41 did not parse to 521000");
    runner(500)
        .run(&transcript_strategy(40), |utts| {
            let text = serialize_srt(&utts).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let back = parse_srt(&text).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(back, utts);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("500 cases; 00:08:41 = 521000".into())
}

/// Backward greedy selection written from the definition: repeatedly take
/// the newest frame at or before the bound, then move the bound one stride
/// before the frame just taken.
fn sampling_oracle(times: &BTreeSet<u64>, playhead: u64, k: usize, stride: u64) -> Vec<u64> {
    let mut taken: Vec<u64> = Vec::new();
    let mut bound = Some(playhead);
    while taken.len() < k {
        let Some(b) = bound else { break };
        let pick = times
            .iter()
            .copied()
            .filter(|&t| t <= b && taken.last().is_none_or(|&last| t < last))
            .max();
        let Some(pick) = pick else { break };
        taken.push(pick);
        bound = pick.checked_sub(stride);
    }
    taken.reverse();
    taken
}

fn frame_sampling() -> Outcome {
    let strategy = (
        prop::collection::btree_set(0u64..600_000, 0..80),
        0u64..650_000,
        0usize..14,
        0u64..30_000,
    );
    runner(500)
        .run(&strategy, |(times, playhead, k, stride)| {
            let index = frame_index("s", &times);
            let policy = SamplingPolicy {
                max_frames: k,
                min_stride: Timecode(stride),
            };
            let got: Vec<u64> = sample_frames(&index, Timecode(playhead), &policy).iter().map(|f| f.t.0).collect();
            prop_assert_eq!(&got, &sampling_oracle(&times, playhead, k, stride));
            prop_assert!(got.len() <= k);
            prop_assert!(got.iter().all(|&t| t <= playhead));
            prop_assert!(got.windows(2).all(|w| w[1] >= w[0] + stride && w[1] > w[0]));
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let example = sampling_oracle(&(0..=21_000).step_by(5000).collect(), 21_000, 3, 5000);
    check!(example == [10_000, 15_000, 20_000], "worked example gave {example:?}");
    Ok("500 cases".into())
}

fn context_determinism() -> Outcome {
    let strategy = (session_strategy(), 1usize..600);
    runner(500)
        .run(&strategy, |((session, t), max_chars)| {
            let budget = Budget {
                max_transcript_chars: max_chars,
                ..Budget::default()
            };
            let unbounded = Budget {
                max_transcript_chars: usize::MAX,
                ..Budget::default()
            };
            let a = assemble(&session, Timecode(t), Some(MessageType::DesignSuggestion), None, "sys", &budget)
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            let b = assemble(&session.clone(), Timecode(t), Some(MessageType::DesignSuggestion), None, "sys", &budget)
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
            prop_assert_eq!(a.digest(), b.digest());

            let full = assemble(&session, Timecode(t), Some(MessageType::DesignSuggestion), None, "sys", &unbounded)
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert!(full.transcript_window.ends_with(&a.transcript_window), "budgeted window is not a suffix");
            let chars = |w: &[replaykit::context::TranscriptLine]| w.iter().map(|l| l.text.chars().count()).sum::<usize>();
            prop_assert!(chars(&a.transcript_window) <= max_chars);
            // Maximal: one more utterance would exceed the budget.
            let kept = a.transcript_window.len();
            if kept < full.transcript_window.len() {
                let next = &full.transcript_window[full.transcript_window.len() - kept - 1..];
                prop_assert!(chars(next) > max_chars);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("500 cases".into())
}

fn chain_child_output(root: &Path) -> Vec<Value> {
    let engine = mock_engine(root);
    let rt = runtime();
    let mut out = Vec::new();
    for (t, ty, ov) in [
        (0u64, MessageType::ReflectiveQuestion, None),
        (521_000, MessageType::ReflectiveQuestion, None),
        (588_000, MessageType::DesignSuggestion, Some(TaskPhase::Simulation)),
        (300_000, MessageType::SoftwareTip, Some(TaskPhase::ObstacleGeometry)),
    ] {
        let params = GenerateParams {
            t: Timecode(t),
            msg_type: ty,
            phase_override: ov,
            system_prompt_override: None,
        };
        let g = rt.block_on(engine.generate("p03", &params)).unwrap();
        out.push(json!({
            "text": g.message.text,
            "phase": g.message.phase,
            "classified": g.chain.classified_phase,
            "versions": g.chain.prompt_versions,
            "digest": g.payload_digest,
        }));
    }
    out
}

fn chain_override_dominance() -> Outcome {
    let rt = runtime();
    let root = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(root.path().join("s")).unwrap();
    write_manifest(&root.path().join("s"), &manifest("s", 1)).unwrap();
    let engine = mock_engine(root.path());
    let templates = TemplateSet::builtin();
    let strategy = (
        session_strategy(),
        prop::sample::select(MessageType::ALL.to_vec()),
        prop::sample::select(TaskPhase::ALL.to_vec()),
    );
    runner(200)
        .run(&strategy, |((session, t), ty, phase)| {
            let params = GenerateParams {
                t: Timecode(t),
                msg_type: ty,
                phase_override: Some(phase),
                system_prompt_override: None,
            };
            let payload = engine
                .payload(&session, &params, &templates)
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            let run = rt
                .block_on(engine.chain.run_chain(&payload, &templates, Some(phase), None))
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(run.generate_request.meta.phase, Some(phase));
            prop_assert_eq!(run.generation_payload.phase, Some(phase));
            let instruction = match run.generate_request.messages.last().and_then(|m| m.parts.last()) {
                Some(Part::Text { text }) => text.clone(),
                other => return Err(TestCaseError::fail(format!("no instruction part: {other:?}"))),
            };
            prop_assert!(instruction.contains(phase.name()), "instruction lacks {}", phase.name());

            let g = rt
                .block_on(engine.generate_on(&session, root.path(), 0, &params, false))
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            let stored = engine.store.message(&g.message.id).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(stored.message.phase, phase);
            prop_assert_eq!(stored.message.phase_source, PhaseSource::WizardOverride);
            prop_assert!(stored.message.classified_phase.is_some(), "classification not persisted");
            prop_assert_eq!(stored.message.classified_phase, run.result.classified_phase);
            prop_assert!(stored.message.classification_raw.as_deref().is_some_and(|r| r.starts_with("PHASE:")));
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    // Determinism across process restarts.
    let fixtures = fixture_root();
    let local = chain_child_output(fixtures.path());
    let mut runs = Vec::new();
    for _ in 0..2 {
        let out = Command::new(std::env::current_exe().unwrap())
            .env(CHILD_ENV, "chain")
            .output()
            .map_err(|e| e.to_string())?;
        check!(out.status.success(), "chain child failed: {}", String::from_utf8_lossy(&out.stderr));
        let v: Vec<Value> = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
        runs.push(v);
    }
    check!(runs[0] == runs[1], "chain output differs between processes");
    check!(runs[0] == local, "chain output differs from in-process run");
    Ok("200 cases; identical across 3 processes".into())
}

const P03_REFERENCES: [(&str, &str); 2] = [
    (
        "00:08:41,000",
        "How will the bracket be connected to other parts, and will these move in any way?",
    ),
    ("00:09:48,000", "What are the structural constraints of your load cases?"),
];

fn batch_reproduction() -> Outcome {
    let started = Instant::now();
    let root = fixture_root();
    let engine = mock_engine(root.path());
    let refs = parse_refs(&std::fs::read_to_string(root.path().join("p03/refs.csv")).unwrap()).map_err(|e| e.to_string())?;
    let rt = runtime();
    let mut tables = Vec::new();
    for _ in 0..2 {
        let rows = rt
            .block_on(run_batch(&engine, "p03", &refs, MessageType::ReflectiveQuestion))
            .map_err(|e| e.to_string())?;
        tables.push(rows_to_csv(&rows));
    }
    let parse = |csv: &str| -> Vec<csv::StringRecord> {
        csv::Reader::from_reader(csv.as_bytes()).records().map(|r| r.unwrap()).collect()
    };
    let (a, b) = (parse(&tables[0]), parse(&tables[1]));
    check!(a.len() == 2, "expected 2 rows, got {}", a.len());
    for (row, (ts, human)) in a.iter().zip(P03_REFERENCES) {
        check!(&row[0] == "p03", "session column {}", &row[0]);
        check!(&row[1] == ts, "timestamp {} != {ts}", &row[1]);
        check!(&row[2] == human, "human_text {:?}", &row[2]);
        check!(!row[3].is_empty(), "empty generated_text");
        check!(row[7].is_empty(), "row error {}", &row[7]);
    }
    let generated = |rows: &[csv::StringRecord]| rows.iter().map(|r| r[3].to_string()).collect::<Vec<_>>();
    check!(generated(&a) == generated(&b), "generated_text changed between runs");
    check!(tables[0] == tables[1], "CSV not byte-identical between runs");
    let elapsed = started.elapsed();
    check!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("2 rows, stable, {:.2}s", elapsed.as_secs_f64()))
}

// Store durability --------------------------------------------------------

const WRITER_OPS: usize = 9;

fn prepare_store_root(root: &Path) {
    std::fs::create_dir_all(root.join("s")).unwrap();
    write_manifest(&root.join("s"), &manifest("s", 100_000)).unwrap();
}

/// Child: performs the scripted operations, acknowledging each on stdout
/// after it returns, then blocks until killed once `stop_after` are done.
fn writer_child(root: &Path, stop_after: usize) {
    let store = Store::open(root).unwrap();
    let mut stdout = std::io::stdout().lock();
    for op in 0..WRITER_OPS {
        if op == stop_after {
            break;
        }
        let ids = |k: usize| format!("m-{k}");
        match op {
            0 => drop(store.record_message(message(&ids(0), "s", 1000, MessageType::ReflectiveQuestion, Decision::Pending), Default::default()).unwrap()),
            1 => drop(store.record_message(message(&ids(1), "s", 2000, MessageType::SoftwareTip, Decision::Pending), Default::default()).unwrap()),
            2 => drop(store.set_decision(&ids(0), Decision::Approved).unwrap()),
            3 => drop(store.rate(&ids(0), 4, Some("useful".into()), "r1").unwrap()),
            4 => drop(store.annotate(&ids(0), "timely", None).unwrap()),
            5 => drop(store.record_message(message(&ids(2), "s", 3000, MessageType::DesignSuggestion, Decision::Pending), Default::default()).unwrap()),
            6 => drop(store.set_decision(&ids(1), Decision::Denied { reason: "off topic".into() }).unwrap()),
            7 => drop(store.rate(&ids(1), 2, None, "r2").unwrap()),
            8 => drop(store.mark_delivered(&ids(0), 7).unwrap()),
            _ => unreachable!(),
        }
        writeln!(stdout, "ACK {op}").unwrap();
        stdout.flush().unwrap();
    }
    writeln!(stdout, "READY").unwrap();
    stdout.flush().unwrap();
    std::thread::sleep(Duration::from_secs(600));
}

fn verify_acked(store: &Store, acked: usize) -> Result<(), String> {
    let msgs: BTreeMap<String, SupportMessage> =
        store.messages("s").map_err(|e| e.to_string())?.into_iter().map(|m| (m.id.clone(), m)).collect();
    let ratings = store.ratings("s").map_err(|e| e.to_string())?;
    let annotations = store.annotations("s").map_err(|e| e.to_string())?;
    for op in 0..acked {
        let ok = match op {
            0 => msgs.contains_key("m-0"),
            1 => msgs.contains_key("m-1"),
            2 => msgs.get("m-0").is_some_and(|m| m.decision == Decision::Approved),
            3 => ratings.iter().any(|r| r.message_id == "m-0" && r.score == 4 && r.rater == "r1"),
            4 => annotations.iter().any(|a| a.message_id == "m-0" && a.label == "timely"),
            5 => msgs.contains_key("m-2"),
            6 => msgs.get("m-1").is_some_and(|m| m.decision.denial_reason() == Some("off topic")),
            7 => ratings.iter().any(|r| r.message_id == "m-1" && r.score == 2),
            8 => msgs.get("m-0").is_some_and(|m| m.delivered_seq == Some(7)),
            _ => unreachable!(),
        };
        check!(ok, "acknowledged op {op} missing after reopen (acked {acked})");
    }
    Ok(())
}

fn kill_after_ack(stop_after: usize, torn: bool) -> Result<(), String> {
    let root = tempfile::tempdir().unwrap();
    prepare_store_root(root.path());
    let mut child = Command::new(std::env::current_exe().unwrap())
        .env(CHILD_ENV, format!("writer:{}:{stop_after}", root.path().display()))
        .stdout(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut acked = 0;
    for line in BufReader::new(child.stdout.take().unwrap()).lines() {
        let line = line.map_err(|e| e.to_string())?;
        if line.starts_with("ACK") {
            acked += 1;
        }
        if line == "READY" {
            break;
        }
    }
    child.kill().map_err(|e| e.to_string())?;
    let _ = child.wait();
    check!(acked == stop_after, "child acknowledged {acked} of {stop_after}");

    let log = root.path().join("s").join(MESSAGES_FILE);
    if torn {
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&log).unwrap();
        f.write_all(br#"{"kind":"message","id":"m-torn","sess"#).unwrap();
    }
    let store = Store::open(root.path()).map_err(|e| e.to_string())?;
    verify_acked(&store, acked)?;
    if torn {
        check!(store.warnings().iter().any(|w| w.contains("torn")), "torn line not reported");
        // The next append trims the torn bytes and the log stays readable.
        store
            .record_message(message("m-after", "s", 5000, MessageType::SoftwareTip, Decision::Pending), Default::default())
            .map_err(|e| e.to_string())?;
        drop(store);
        let reopened = Store::open(root.path()).map_err(|e| e.to_string())?;
        check!(reopened.warnings().is_empty(), "warnings after repair: {:?}", reopened.warnings());
        check!(reopened.message("m-after").is_ok(), "post-repair append lost");
        verify_acked(&reopened, acked)?;
    }
    Ok(())
}

fn api_generate_crash() -> Result<usize, String> {
    let root = fixture_root();
    let mut child = Command::new(env!("CARGO_BIN_EXE_replaykit"))
        .args(["serve", "--media-root", root.path().to_str().unwrap(), "--bind", "127.0.0.1:0"])
        .env("RUST_LOG", "warn")
        .stdout(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).map_err(|e| e.to_string())?;
    let url = line.trim().strip_prefix("listening on ").ok_or("no listen line")?.to_string();
    let rt = runtime();
    let acked: Vec<(String, String)> = rt.block_on(async {
        let client = reqwest::Client::new();
        let mut acked = Vec::new();
        for t in [60_000u64, 120_000, 521_000, 588_000, 600_000] {
            let resp = client
                .post(format!("{url}/api/sessions/p03/generate"))
                .json(&json!({"t": t, "msg_type": "ReflectiveQuestion"}))
                .send()
                .await
                .unwrap();
            assert!(resp.status().is_success());
            let v: Value = resp.json().await.unwrap();
            acked.push((v["message"]["id"].as_str().unwrap().to_string(), v["message"]["text"].as_str().unwrap().to_string()));
        }
        acked
    });
    child.kill().map_err(|e| e.to_string())?;
    let _ = child.wait();
    let store = Store::open(root.path()).map_err(|e| e.to_string())?;
    for (id, text) in &acked {
        let m = store.message(id).map_err(|e| format!("acknowledged {id} missing: {e}"))?;
        check!(&m.message.text == text, "text of {id} changed");
    }
    Ok(acked.len())
}

fn store_durability() -> Outcome {
    for k in 0..=WRITER_OPS {
        kill_after_ack(k, false)?;
        kill_after_ack(k, true)?;
    }
    let generated = api_generate_crash()?;

    // Denial without a reason, store layer.
    let root = tempfile::tempdir().unwrap();
    prepare_store_root(root.path());
    let store = Store::open(root.path()).unwrap();
    store
        .record_message(message("m-d", "s", 1000, MessageType::SoftwareTip, Decision::Pending), Default::default())
        .unwrap();
    for reason in ["", "   "] {
        let r = store.set_decision("m-d", Decision::Denied { reason: reason.into() });
        check!(matches!(r, Err(StoreError::EmptyDenialReason)), "store accepted denial reason {reason:?}");
    }
    check!(store.message("m-d").unwrap().message.decision == Decision::Pending, "decision changed");

    // API layer.
    let fixtures = fixture_root();
    let rt = runtime();
    rt.block_on(async {
        let server = start_server(fixtures.path()).await;
        let client = reqwest::Client::new();
        let g: Value = client
            .post(server.http("/api/sessions/p03/generate"))
            .json(&json!({"t": 1000, "msg_type": "SoftwareTip"}))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        let id = g["message"]["id"].as_str().unwrap().to_string();
        for body in [json!({"decision": "denied"}), json!({"decision": "denied", "reason": " "})] {
            let resp = client
                .post(server.http(&format!("/api/messages/{id}/decision")))
                .json(&body)
                .send()
                .await
                .unwrap();
            check!(resp.status() == 400, "API accepted {body}: {}", resp.status());
            let v: Value = resp.json().await.unwrap();
            check!(v["code"] == "DenyWithoutReason", "code {}", v["code"]);
        }
        let pending = server.relay.engine().store.message(&id).unwrap().message.decision;
        check!(pending == Decision::Pending, "API denial changed state");
        Ok(())
    })?;
    Ok(format!(
        "kill at {} boundaries (clean and torn); {generated} API acks survived SIGKILL",
        WRITER_OPS + 1
    ))
}

// Live ---------------------------------------------------------------------

fn live_replay_equivalence() -> Outcome {
    let started = Instant::now();
    let root = fixture_root();
    let rt = runtime();
    let (message_id, recorded_digest, live_id, delivered_line) = rt.block_on(async {
        let server = start_server(root.path()).await;
        let live_id = create_live(&server).await;
        let mut wizard = Client::connect(&server.ws(&live_id, "wizard", None)).await;
        wizard.expect_kind("hello").await;

        let sim = tokio::process::Command::new(env!("CARGO_BIN_EXE_replaykit"))
            .args([
                "simulate",
                "--media-root",
                root.path().to_str().unwrap(),
                "--session",
                "live3",
                "--speed",
                "100",
                "--target",
                &format!("ws://{}/ws/{live_id}", server.addr),
            ])
            .env("RUST_LOG", "warn")
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .kill_on_drop(true)
            .spawn()
            .map_err(|e| e.to_string())?;

        let mut utterances = 0;
        let mut frames = 0;
        let mut latest = 0u64;
        while utterances < 3 || frames < 2 {
            let ev = wizard.next().await;
            match ev["kind"].as_str() {
                Some("utterance") => {
                    utterances += 1;
                    latest = latest.max(ev["t"].as_u64().unwrap());
                }
                Some("frame_notice") => frames += 1,
                Some("error") => return Err(format!("relay error {ev}")),
                _ => {}
            }
        }
        wizard
            .send(json!({"t": latest, "kind": "generate_request", "body": {"msg_type": "ReflectiveQuestion"}}))
            .await;
        let result = wizard.expect_kind("chain_result").await;
        let id = result["body"]["message"]["id"].as_str().unwrap().to_string();
        let digest = result["body"]["payload_digest"].as_str().unwrap().to_string();
        wizard
            .send(json!({"t": latest, "kind": "decision", "body": {"message_id": id, "decision": "approved"}}))
            .await;
        wizard.expect_kind("deliver").await;

        let mut sim = sim;
        let mut lines = tokio::io::BufReader::new(sim.stdout.take().unwrap());
        let mut delivered = String::new();
        tokio::time::timeout(
            Duration::from_secs(10),
            tokio::io::AsyncBufReadExt::read_line(&mut lines, &mut delivered),
        )
        .await
        .map_err(|_| "simulate printed no delivery".to_string())?
        .map_err(|e| e.to_string())?;

        let close: Value = reqwest::Client::new()
            .post(server.http(&format!("/api/live/{live_id}/close")))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        check!(close["origin"] == "live_recorded", "origin {}", close["origin"]);
        let status = tokio::time::timeout(Duration::from_secs(10), sim.wait())
            .await
            .map_err(|_| "simulate did not exit after close".to_string())?
            .map_err(|e| e.to_string())?;
        check!(status.success(), "simulate exited with {status}");
        Ok((id, digest, live_id, delivered))
    })?;

    check!(
        delivered_line.trim_end().starts_with(&format!("delivered {message_id}: ")),
        "simulate printed {delivered_line:?}"
    );
    let dir = root.path().join(&live_id);
    let files = SessionFiles::load(&dir).map_err(|e| e.to_string())?;
    let violations = files.violations();
    check!(violations.is_empty(), "closed session violations: {violations:?}");
    check!(files.utterances.len() == 3 && files.frames.len() == 2, "closed session content differs");

    // Fresh process state: reopen the store from disk and re-assemble.
    let engine = mock_engine(root.path());
    let stored = engine.store.message(&message_id).map_err(|e| e.to_string())?;
    check!(stored.message.decision == Decision::Approved, "message not approved");
    let (recorded, replayed) = engine.replay_digest(&message_id).map_err(|e| e.to_string())?;
    check!(recorded == recorded_digest, "stored digest differs from live chain_result");
    check!(replayed == recorded, "replayed digest {replayed} != recorded {recorded}");

    // Independent re-assembly from the closed files.
    let session = files.into_session(engine.store.context_messages(&live_id, stored.meta.context_cursor.unwrap()).unwrap());
    let payload = assemble(
        &session,
        stored.message.t,
        Some(stored.message.msg_type),
        Some(stored.message.phase),
        &TemplateSet::builtin().generator(stored.message.msg_type).system_segment,
        &Budget::default(),
    )
    .map_err(|e| e.to_string())?;
    check!(payload.digest() == recorded, "direct assemble digest differs");
    let elapsed = started.elapsed();
    check!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!("digest {}… reproduced, {:.2}s", &recorded[..12], elapsed.as_secs_f64()))
}

fn strictly_increasing(seqs: &[u64]) -> bool {
    seqs.windows(2).all(|w| w[0] < w[1])
}

/// User-side display model: each message id is shown once however many
/// times it arrives on the wire.
#[derive(Default)]
struct Tally {
    shown: Vec<String>,
    wire: BTreeMap<String, usize>,
}

impl Tally {
    fn absorb(&mut self, client: &Client, from: usize) -> Vec<String> {
        let mut fresh = Vec::new();
        for e in client.received[from..].iter().filter(|e| e["kind"] == "deliver") {
            let m = e["body"]["message_id"].as_str().unwrap().to_string();
            *self.wire.entry(m.clone()).or_default() += 1;
            if !self.shown.contains(&m) {
                self.shown.push(m.clone());
                fresh.push(m);
            }
        }
        fresh
    }
}

async fn drain(client: &mut Client) {
    while client.next_within(Duration::from_millis(300)).await.is_some() {}
}

fn relay_ordering_delivery() -> Outcome {
    let rt = runtime();
    rt.block_on(async {
        let root = tempfile::tempdir().unwrap();
        let server = start_server(root.path()).await;
        let id = create_live(&server).await;
        let mut user = Client::connect(&server.ws(&id, "user", None)).await;
        let token = user.expect_kind("hello").await["body"]["resume_token"].as_str().unwrap().to_string();
        let mut wizard = Client::connect(&server.ws(&id, "wizard", None)).await;
        wizard.expect_kind("hello").await;
        user.send(json!({"t": 0, "kind": "utterance", "body": {"text": "hello there"}})).await;
        wizard.expect_kind("utterance").await;

        let mut ids = Vec::new();
        for _ in 0..5 {
            wizard
                .send(json!({"t": 0, "kind": "generate_request", "body": {"msg_type": "SoftwareTip"}}))
                .await;
            let r = wizard.expect_kind("chain_result").await;
            ids.push(r["body"]["message"]["id"].as_str().unwrap().to_string());
        }
        for k in 0..10u64 {
            upload_frame(&server, &id, &format!("frame_{}.jpg", 500 + k * 1000), b"x").await;
        }

        // Interleaved: the user streams utterances and frame notices while the
        // wizard approves three messages.
        let user_events: Vec<Value> = (0..20u64)
            .map(|k| {
                if k % 2 == 0 {
                    json!({"t": 500 + (k / 2) * 1000, "kind": "frame_notice", "body": {"name": format!("frame_{}.jpg", 500 + (k / 2) * 1000)}})
                } else {
                    json!({"t": 1000 + k * 500, "kind": "utterance", "body": {"text": format!("step {k}")}})
                }
            })
            .collect();
        let approvals: Vec<Value> = ids[..3]
            .iter()
            .map(|m| json!({"t": 5000, "kind": "decision", "body": {"message_id": m, "decision": "approved"}}))
            .collect();
        let (u, w) = (&mut user, &mut wizard);
        tokio::join!(
            async {
                for e in user_events {
                    u.send(e).await;
                }
            },
            async {
                for e in approvals {
                    w.send(e).await;
                }
            }
        );
        drain(&mut user).await;
        drain(&mut wizard).await;
        check!(strictly_increasing(&user.seqs()), "user saw {:?}", user.seqs());
        check!(strictly_increasing(&wizard.seqs()), "wizard saw {:?}", wizard.seqs());
        let errors: Vec<&Value> = wizard.received.iter().filter(|e| e["kind"] == "error").collect();
        check!(errors.is_empty(), "unexpected errors {errors:?}");
        let log = server.relay.handle(&id).unwrap().events().await.unwrap();
        let log_seqs: Vec<u64> = log.iter().map(|e| e.seq).collect();
        check!(log_seqs == (1..=log.len() as u64).collect::<Vec<_>>(), "log has gaps");

        // The user client shows each delivery once, deduplicating by id.
        let mut tally = Tally::default();
        let fresh = tally.absorb(&user, 0);
        check!(fresh.len() == 3, "expected 3 deliveries, got {fresh:?}");
        for m in &fresh {
            user.send(json!({"t": 5000, "kind": "deliver", "body": {"message_id": m, "ack": true}})).await;
        }

        // Mid-delivery disconnect: m4 arrives but is not acknowledged.
        wizard
            .send(json!({"t": 6000, "kind": "decision", "body": {"message_id": ids[3], "decision": "approved"}}))
            .await;
        let d = user.expect_kind("deliver").await;
        check!(d["body"]["message_id"] == ids[3].as_str(), "wrong delivery {d}");
        tally.absorb(&user, user.received.len() - 1);
        user.close().await;
        tokio::time::sleep(Duration::from_millis(100)).await;

        // Approved while the user is away.
        wizard
            .send(json!({"t": 6000, "kind": "decision", "body": {"message_id": ids[4], "decision": "approved"}}))
            .await;
        wizard.expect_kind("deliver").await;

        let mut user = Client::connect(&server.ws(&id, "user", Some(&token))).await;
        user.expect_kind("hello").await;
        check!(strictly_increasing(&user.seqs()), "reconnected user saw {:?}", user.seqs());
        let fresh = tally.absorb(&user, 0);
        check!(fresh == [ids[4].clone()], "after reconnect fresh deliveries were {fresh:?}");
        check!(tally.wire.get(&ids[3]) == Some(&2), "unacked delivery was not re-sent");
        for m in [&ids[3], &ids[4]] {
            user.send(json!({"t": 6000, "kind": "deliver", "body": {"message_id": m, "ack": true}})).await;
        }
        user.close().await;
        tokio::time::sleep(Duration::from_millis(100)).await;

        // Everything acknowledged: nothing is re-sent.
        let mut user = Client::connect(&server.ws(&id, "user", Some(&token))).await;
        user.expect_kind("hello").await;
        drain(&mut user).await;
        check!(tally.absorb(&user, 0).is_empty(), "acknowledged deliveries re-sent");
        let distinct: BTreeSet<&String> = tally.shown.iter().collect();
        check!(tally.shown.len() == 5 && distinct.len() == 5, "shown {:?}", tally.shown);
        Ok(format!("{} events, 5 deliveries shown once each", log.len()))
    })
}

fn child(mode: &str) {
    if mode == "chain" {
        let root = fixture_root();
        println!("{}", serde_json::to_string(&chain_child_output(root.path())).unwrap());
        return;
    }
    if let Some(rest) = mode.strip_prefix("writer:") {
        let (root, k) = rest.rsplit_once(':').unwrap();
        writer_child(&PathBuf::from(root), k.parse().unwrap());
        return;
    }
    panic!("unknown child mode {mode}");
}

fn main() {
    if let Ok(mode) = std::env::var(CHILD_ENV) {
        child(&mode);
        return;
    }
    // Let the libtest-style `--list` probe succeed quietly.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("slice oracle", slice_oracle),
        ("SRT round-trip", srt_round_trip),
        ("frame sampling", frame_sampling),
        ("context determinism & suffix", context_determinism),
        ("chain override dominance", chain_override_dominance),
        ("batch workflow reproduction (p03)", batch_reproduction),
        ("store durability", store_durability),
        ("live/replay equivalence", live_replay_equivalence),
        ("relay ordering & delivery", relay_ordering_delivery),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, f) in criteria {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(note) => println!("PASS  {name}: {note}"),
            Err(e) => {
                failed += 1;
                println!("FAIL  {name}: {e} ({:.2}s)", started.elapsed().as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
