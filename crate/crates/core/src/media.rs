//! Frame index over a session's pre-extracted `frames/frame_<millis>.<jpg|png>`
//! files, and recency-biased frame sampling.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::{FrameRef, Timecode};

#[derive(Debug, Error)]
pub enum MediaError {
    #[error("two frames map to timestamp {0}")]
    DuplicateTimestamp(u64),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameIndex {
    pub session_id: String,
    frames: Vec<FrameRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPolicy {
    pub max_frames: usize,
    pub min_stride: Timecode,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        SamplingPolicy {
            max_frames: 10,
            min_stride: Timecode(5000),
        }
    }
}

/// Result of indexing a directory listing; names that don't follow the frame
/// convention end up in `warnings`.
#[derive(Debug, Clone, Default)]
pub struct IndexBuild {
    pub index: FrameIndex,
    pub warnings: Vec<String>,
}

/// `frame_<millis>.jpg` / `frame_<millis>.png` → millis.
pub fn parse_frame_name(name: &str) -> Option<Timecode> {
    let stem = name
        .strip_suffix(".jpg")
        .or_else(|| name.strip_suffix(".png"))?;
    let digits = stem.strip_prefix("frame_")?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok().map(Timecode)
}

pub fn frame_name(t: Timecode, ext: &str) -> String {
    format!("frame_{}.{ext}", t.0)
}

pub fn media_type_for(name: &str) -> &'static str {
    if name.ends_with(".png") {
        "image/png"
    } else {
        "image/jpeg"
    }
}

impl FrameIndex {
    pub fn empty(session_id: impl Into<String>) -> Self {
        FrameIndex {
            session_id: session_id.into(),
            frames: Vec::new(),
        }
    }

    /// Builds an index from `(file name, byte length)` pairs found in
    /// `frames_dir` (relative to the session directory).
    pub fn from_listing<I, S>(
        session_id: &str,
        frames_dir: &str,
        listing: I,
    ) -> Result<IndexBuild, MediaError>
    where
        I: IntoIterator<Item = (S, Option<u64>)>,
        S: AsRef<str>,
    {
        let mut frames = Vec::new();
        let mut warnings = Vec::new();
        for (name, len) in listing {
            let name = name.as_ref();
            match parse_frame_name(name) {
                Some(t) => frames.push(FrameRef {
                    t,
                    uri: format!("{}/{name}", frames_dir.trim_end_matches('/')),
                    byte_len: len,
                }),
                None => warnings.push(format!("ignored `{name}`: not frame_<millis>.jpg|png")),
            }
        }
        frames.sort_by_key(|f| f.t);
        if let Some(w) = frames.windows(2).find(|w| w[0].t == w[1].t) {
            return Err(MediaError::DuplicateTimestamp(w[0].t.0));
        }
        Ok(IndexBuild {
            index: FrameIndex {
                session_id: session_id.to_string(),
                frames,
            },
            warnings,
        })
    }

    /// Scans `session_dir/frames_dir`. A missing directory is an empty index.
    pub fn scan(session_id: &str, session_dir: &Path, frames_dir: &str) -> Result<IndexBuild, MediaError> {
        let dir = session_dir.join(frames_dir);
        let mut listing = Vec::new();
        match std::fs::read_dir(&dir) {
            Ok(rd) => {
                for entry in rd {
                    let entry = entry?;
                    let meta = entry.metadata()?;
                    if !meta.is_file() {
                        continue;
                    }
                    listing.push((entry.file_name().to_string_lossy().into_owned(), Some(meta.len())));
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        Self::from_listing(session_id, frames_dir, listing)
    }

    pub fn frames(&self) -> &[FrameRef] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Inserts keeping the index strictly ascending.
    pub fn insert(&mut self, frame: FrameRef) -> Result<(), MediaError> {
        match self.frames.binary_search_by_key(&frame.t, |f| f.t) {
            Ok(_) => Err(MediaError::DuplicateTimestamp(frame.t.0)),
            Err(pos) => {
                self.frames.insert(pos, frame);
                Ok(())
            }
        }
    }

    /// Number of frames with `t' <= t`.
    pub fn count_until(&self, t: Timecode) -> usize {
        self.frames.partition_point(|f| f.t <= t)
    }

    /// Walks backward from the newest frame at or before `t`, keeping a frame
    /// only when it is at least `min_stride` older than the last kept one,
    /// until `max_frames` are kept. Output is ascending by `t`.
    pub fn sample(&self, t: Timecode, policy: &SamplingPolicy) -> Vec<FrameRef> {
        let mut kept: Vec<FrameRef> = Vec::new();
        if policy.max_frames == 0 {
            return kept;
        }
        let eligible = &self.frames[..self.count_until(t)];
        for f in eligible.iter().rev() {
            if let Some(last) = kept.last() {
                if last.t.0 - f.t.0 < policy.min_stride.0 {
                    continue;
                }
            }
            kept.push(f.clone());
            if kept.len() == policy.max_frames {
                break;
            }
        }
        kept.reverse();
        kept
    }
}

pub fn sample_frames(index: &FrameIndex, t: Timecode, policy: &SamplingPolicy) -> Vec<FrameRef> {
    index.sample(t, policy)
}
