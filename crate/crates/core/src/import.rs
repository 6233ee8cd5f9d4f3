//! Builds a session directory from a video, an SRT transcript, a brief and
//! frames. The directory is assembled under a hidden staging name and renamed
//! into place only after it validates, so a failed import leaves nothing.

use std::path::{Path, PathBuf};
use std::process::Command;

use chrono::Utc;
use thiserror::Error;

use crate::library::{write_manifest, LibraryError, SessionFiles, BRIEF_FILE, FRAMES_DIR, TRANSCRIPT_FILE};
use crate::media::parse_frame_name;
use crate::session::{is_valid_session_id, Origin, SessionManifest, Timecode, Violation};
use crate::transcript::{parse_srt, TranscriptError};

#[derive(Debug, Error)]
pub enum ImportError {
    #[error("invalid session id `{0}`: use 1-64 of [a-z0-9-]")]
    InvalidId(String),
    #[error("session `{0}` already exists")]
    AlreadyExists(String),
    #[error("input `{0}` does not exist")]
    MissingInput(PathBuf),
    #[error("--extract-cmd needs --video")]
    ExtractWithoutVideo,
    #[error("validation failed: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    ValidationFailed(Vec<Violation>),
    #[error("validation failed: transcript {0}")]
    Transcript(#[from] TranscriptError),
    #[error("validation failed: {0}")]
    Library(#[from] LibraryError),
    #[error("frame extractor failed: {0}")]
    ExtractorFailed(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ImportError {
    /// I/O failures are not domain errors.
    pub fn is_io(&self) -> bool {
        matches!(self, ImportError::Io { .. } | ImportError::MissingInput(_))
    }
}

#[derive(Debug, Clone)]
pub enum FrameSource {
    None,
    Dir(PathBuf),
    Extract { command: String, stride_ms: u64 },
}

#[derive(Debug, Clone)]
pub struct ImportRequest {
    pub media_root: PathBuf,
    pub id: String,
    pub title: Option<String>,
    pub video: Option<PathBuf>,
    pub srt: PathBuf,
    pub brief: Option<PathBuf>,
    pub frames: FrameSource,
}

#[derive(Debug, Clone)]
pub struct Imported {
    pub manifest: SessionManifest,
    pub dir: PathBuf,
    pub warnings: Vec<String>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ImportError + '_ {
    move |source| ImportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Fills `{video}`, `{outdir}` and `{stride_ms}` in an extractor template.
/// Paths are single-quoted for `sh`.
pub fn render_extract_cmd(template: &str, video: &Path, outdir: &Path, stride_ms: u64) -> String {
    let quote = |p: &Path| format!("'{}'", p.display().to_string().replace('\'', r"'\''"));
    template
        .replace("{video}", &quote(video))
        .replace("{outdir}", &quote(outdir))
        .replace("{stride_ms}", &stride_ms.to_string())
}

pub fn import_session(req: &ImportRequest) -> Result<Imported, ImportError> {
    if !is_valid_session_id(&req.id) {
        return Err(ImportError::InvalidId(req.id.clone()));
    }
    let inputs = [Some(&req.srt), req.video.as_ref(), req.brief.as_ref()];
    for p in inputs.into_iter().flatten() {
        if !p.is_file() {
            return Err(ImportError::MissingInput(p.clone()));
        }
    }
    if let FrameSource::Dir(d) = &req.frames {
        if !d.is_dir() {
            return Err(ImportError::MissingInput(d.clone()));
        }
    }
    if matches!(req.frames, FrameSource::Extract { .. }) && req.video.is_none() {
        return Err(ImportError::ExtractWithoutVideo);
    }
    let target = req.media_root.join(&req.id);
    if target.exists() {
        return Err(ImportError::AlreadyExists(req.id.clone()));
    }
    std::fs::create_dir_all(&req.media_root).map_err(io(&req.media_root))?;

    let staging = tempfile::Builder::new()
        .prefix(&format!(".import-{}-", req.id))
        .tempdir_in(&req.media_root)
        .map_err(io(&req.media_root))?;
    let (manifest, warnings) = stage(req, staging.path())?;
    std::fs::rename(staging.path(), &target).map_err(io(&target))?;
    // The staging path no longer exists; nothing left to clean up.
    let _ = staging.keep();
    Ok(Imported {
        manifest,
        dir: target,
        warnings,
    })
}

fn stage(req: &ImportRequest, dir: &Path) -> Result<(SessionManifest, Vec<String>), ImportError> {
    let srt_text = std::fs::read_to_string(&req.srt).map_err(io(&req.srt))?;
    let utterances = parse_srt(&srt_text)?;
    let srt_out = dir.join(TRANSCRIPT_FILE);
    std::fs::write(&srt_out, &srt_text).map_err(io(&srt_out))?;

    let video_uri = match &req.video {
        Some(v) => {
            let ext = v.extension().and_then(|e| e.to_str()).unwrap_or("mp4").to_ascii_lowercase();
            let name = format!("video.{ext}");
            let out = dir.join(&name);
            std::fs::copy(v, &out).map_err(io(&out))?;
            Some(name)
        }
        None => None,
    };
    let brief_uri = match &req.brief {
        Some(b) => {
            let out = dir.join(BRIEF_FILE);
            std::fs::copy(b, &out).map_err(io(&out))?;
            Some(BRIEF_FILE.to_string())
        }
        None => None,
    };

    let frames_dir = dir.join(FRAMES_DIR);
    std::fs::create_dir_all(&frames_dir).map_err(io(&frames_dir))?;
    let mut warnings = Vec::new();
    match &req.frames {
        FrameSource::None => {}
        FrameSource::Dir(src) => {
            let mut entries: Vec<_> = std::fs::read_dir(src)
                .map_err(io(src))?
                .collect::<Result<_, _>>()
                .map_err(io(src))?;
            entries.sort_by_key(|e| e.file_name());
            for e in entries {
                let name = e.file_name().to_string_lossy().into_owned();
                if parse_frame_name(&name).is_none() {
                    warnings.push(format!("skipped `{name}`: not frame_<millis>.jpg|png"));
                    continue;
                }
                let out = frames_dir.join(&name);
                std::fs::copy(e.path(), &out).map_err(io(&out))?;
            }
        }
        FrameSource::Extract { command, stride_ms } => {
            let video = dir.join(video_uri.as_deref().expect("checked above"));
            let cmd = render_extract_cmd(command, &video, &frames_dir, *stride_ms);
            let out = Command::new("sh")
                .arg("-c")
                .arg(&cmd)
                .output()
                .map_err(|e| ImportError::ExtractorFailed(e.to_string()))?;
            if !out.status.success() {
                let stderr = String::from_utf8_lossy(&out.stderr);
                return Err(ImportError::ExtractorFailed(format!(
                    "{} {}",
                    out.status,
                    stderr.trim()
                )));
            }
        }
    }

    let mut manifest = SessionManifest {
        id: req.id.clone(),
        title: req.title.clone().unwrap_or_else(|| req.id.clone()),
        duration: Timecode::ZERO,
        video_uri,
        transcript_uri: TRANSCRIPT_FILE.to_string(),
        frames_dir: FRAMES_DIR.to_string(),
        brief_uri,
        origin: Origin::Imported,
        created_at: Utc::now(),
    };
    write_manifest(dir, &manifest)?;
    let files = SessionFiles::load(dir)?;
    manifest.duration = utterances
        .iter()
        .map(|u| u.end)
        .chain(files.frames.frames().last().map(|f| f.t))
        .max()
        .unwrap_or_default();
    write_manifest(dir, &manifest)?;
    let files = SessionFiles::load(dir)?;
    warnings.extend(files.frame_warnings.iter().cloned());
    let violations = files.violations();
    if !violations.is_empty() {
        return Err(ImportError::ValidationFailed(violations));
    }
    Ok((manifest, warnings))
}
