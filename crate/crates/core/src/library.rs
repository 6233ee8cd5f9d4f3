//! Session directories on disk: `session.json`, `transcript.srt`, `frames/`
//! and the optional brief and video.

use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::context::Session;
use crate::media::{FrameIndex, MediaError};
use crate::session::{validate_session, SessionManifest, Timecode, Violation};
use crate::store::{write_atomic, Store, StoreError, SESSION_FILE};
use crate::transcript::{parse_srt, TranscriptError};

pub const TRANSCRIPT_FILE: &str = "transcript.srt";
pub const FRAMES_DIR: &str = "frames";
pub const BRIEF_FILE: &str = "brief.txt";

#[derive(Debug, Error)]
pub enum LibraryError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("{path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("transcript: {0}")]
    Transcript(#[from] TranscriptError),
    #[error("frames: {0}")]
    Media(#[from] MediaError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> LibraryError + '_ {
    move |source| LibraryError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_manifest(dir: &Path) -> Result<SessionManifest, LibraryError> {
    let path = dir.join(SESSION_FILE);
    let bytes = std::fs::read(&path).map_err(io_err(&path))?;
    serde_json::from_slice(&bytes).map_err(|source| LibraryError::Manifest { path, source })
}

pub fn write_manifest(dir: &Path, manifest: &SessionManifest) -> Result<(), LibraryError> {
    let path = dir.join(SESSION_FILE);
    let bytes = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    write_atomic(&path, &bytes).map_err(io_err(&path))
}

/// Session content read from disk, without messages.
#[derive(Debug, Clone)]
pub struct SessionFiles {
    pub dir: PathBuf,
    pub manifest: SessionManifest,
    pub utterances: Vec<crate::session::Utterance>,
    pub frames: FrameIndex,
    pub frame_warnings: Vec<String>,
    pub brief: Option<String>,
}

impl SessionFiles {
    pub fn load(dir: &Path) -> Result<Self, LibraryError> {
        let manifest = read_manifest(dir)?;
        let srt_path = dir.join(&manifest.transcript_uri);
        let utterances = match std::fs::read_to_string(&srt_path) {
            Ok(text) => parse_srt(&text)?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_err(&srt_path)(e)),
        };
        let build = FrameIndex::scan(&manifest.id, dir, &manifest.frames_dir)?;
        let brief = match &manifest.brief_uri {
            Some(uri) => {
                let p = dir.join(uri);
                Some(std::fs::read_to_string(&p).map_err(io_err(&p))?.trim().to_string())
            }
            None => None,
        };
        Ok(SessionFiles {
            dir: dir.to_path_buf(),
            manifest,
            utterances,
            frames: build.index,
            frame_warnings: build.warnings,
            brief,
        })
    }

    pub fn violations(&self) -> Vec<Violation> {
        validate_session(&self.manifest, &self.utterances, self.frames.frames())
    }

    pub fn into_session(self, messages: Vec<crate::session::SupportMessage>) -> Session {
        Session {
            manifest: self.manifest,
            utterances: self.utterances,
            frames: self.frames,
            brief: self.brief,
            messages,
            open_ended: false,
        }
    }
}

/// Loads a stored session with its current messages.
pub fn load_session(store: &Store, session_id: &str) -> Result<Session, LibraryError> {
    if !store.has_session(session_id) {
        return Err(LibraryError::UnknownSession(session_id.to_string()));
    }
    let files = SessionFiles::load(&store.session_dir(session_id))?;
    let messages = store.messages(session_id)?;
    Ok(files.into_session(messages))
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionSummary {
    pub id: String,
    pub title: String,
    pub duration: Timecode,
    pub origin: crate::session::Origin,
    pub created_at: chrono::DateTime<chrono::Utc>,
    pub has_video: bool,
    pub utterance_count: usize,
    pub frame_count: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SessionListing {
    pub sessions: Vec<SessionSummary>,
    pub warnings: Vec<String>,
}

/// Scans every subdirectory of `root`. Directories that fail to load or
/// validate are reported in `warnings`.
pub fn list_sessions(root: &Path) -> io::Result<SessionListing> {
    let mut listing = SessionListing::default();
    let mut dirs: Vec<PathBuf> = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if entry.file_type()?.is_dir() && !name.starts_with('.') {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    for dir in dirs {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        if !dir.join(SESSION_FILE).is_file() {
            listing.warnings.push(format!("{name}: no {SESSION_FILE}"));
            continue;
        }
        match SessionFiles::load(&dir) {
            Ok(files) => {
                let violations = files.violations();
                if !violations.is_empty() {
                    let v: Vec<String> = violations.iter().map(ToString::to_string).collect();
                    listing.warnings.push(format!("{name}: {}", v.join("; ")));
                    continue;
                }
                if files.manifest.id != name {
                    listing
                        .warnings
                        .push(format!("{name}: manifest id `{}` differs from directory", files.manifest.id));
                    continue;
                }
                listing.sessions.push(SessionSummary {
                    id: files.manifest.id.clone(),
                    title: files.manifest.title.clone(),
                    duration: files.manifest.duration,
                    origin: files.manifest.origin,
                    created_at: files.manifest.created_at,
                    has_video: files.manifest.video_uri.is_some(),
                    utterance_count: files.utterances.len(),
                    frame_count: files.frames.len(),
                });
            }
            Err(e) => listing.warnings.push(format!("{name}: {e}")),
        }
    }
    listing.sessions.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(listing)
}
