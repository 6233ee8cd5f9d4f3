//! SRT transcripts: timecode conversion, parsing, canonical serialization and
//! slicing the utterance stream at a timestamp.
//!
//! Canonical form emitted by [`serialize_srt`]:
//!
//! ```text
//! 1
//! 00:08:41,000 --> 00:08:43,000
//! text on one line
//!
//! 2
//! ...
//! ```
//!
//! Non-user speakers are tagged with a leading `[wizard] ` / `[agent] ` on the
//! text line; untagged cues are read as user speech.

use std::fmt::Write as _;

use thiserror::Error;

use crate::session::{Speaker, Timecode, Utterance};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TranscriptError {
    #[error("malformed timecode `{0}`")]
    MalformedTimecode(String),
    #[error("malformed cue at line {0}")]
    MalformedCue(usize),
    #[error("utterances not sorted by start at position {0}")]
    Unsorted(usize),
}

/// Parses `HH:MM:SS,mmm` or `HH:MM:SS`. Hours take two or more digits.
pub fn parse_timecode(s: &str) -> Result<Timecode, TranscriptError> {
    let bad = || TranscriptError::MalformedTimecode(s.to_string());
    let (hms, millis) = match s.split_once(',') {
        Some((hms, ms)) => {
            if ms.len() != 3 || !ms.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad());
            }
            (hms, ms.parse::<u64>().map_err(|_| bad())?)
        }
        None => (s, 0),
    };
    let mut parts = hms.split(':');
    let (Some(h), Some(m), Some(sec), None) = (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(bad());
    };
    let digits = |p: &str, min: usize, max: usize| {
        p.len() >= min && p.len() <= max && p.bytes().all(|b| b.is_ascii_digit())
    };
    if !digits(h, 2, 9) || !digits(m, 2, 2) || !digits(sec, 2, 2) {
        return Err(bad());
    }
    let h: u64 = h.parse().map_err(|_| bad())?;
    let m: u64 = m.parse().map_err(|_| bad())?;
    let sec: u64 = sec.parse().map_err(|_| bad())?;
    if m >= 60 || sec >= 60 {
        return Err(bad());
    }
    Ok(Timecode(((h * 60 + m) * 60 + sec) * 1000 + millis))
}

/// `HH:MM:SS,mmm`
pub fn format_timecode(t: Timecode) -> String {
    let ms = t.0 % 1000;
    let total = t.0 / 1000;
    format!(
        "{:02}:{:02}:{:02},{:03}",
        total / 3600,
        (total / 60) % 60,
        total % 60,
        ms
    )
}

/// `HH:MM:SS`, used in prompt transcript lines.
pub fn format_clock(t: Timecode) -> String {
    let total = t.0 / 1000;
    format!("{:02}:{:02}:{:02}", total / 3600, (total / 60) % 60, total % 60)
}

fn parse_arrow_line(line: &str, line_no: usize) -> Result<(Timecode, Timecode), TranscriptError> {
    let mut it = line.split_whitespace();
    let (Some(a), Some("-->"), Some(b)) = (it.next(), it.next(), it.next()) else {
        return Err(TranscriptError::MalformedCue(line_no));
    };
    let start = parse_timecode(a).map_err(|_| TranscriptError::MalformedCue(line_no))?;
    let end = parse_timecode(b).map_err(|_| TranscriptError::MalformedCue(line_no))?;
    Ok((start, end))
}

fn split_speaker(text: &str) -> (Speaker, String) {
    for sp in [Speaker::Wizard, Speaker::Agent, Speaker::User] {
        let tag = format!("[{}] ", sp.as_str());
        if let Some(rest) = text.strip_prefix(&tag) {
            return (sp, rest.trim().to_string());
        }
    }
    (Speaker::User, text.to_string())
}

/// Parses SRT text into utterances indexed from 0. Input cue numbers are
/// ignored. Accepts a UTF-8 BOM, CRLF line endings and trailing whitespace.
pub fn parse_srt(input: &str) -> Result<Vec<Utterance>, TranscriptError> {
    let input = input.strip_prefix('\u{feff}').unwrap_or(input);
    let lines: Vec<&str> = input.lines().map(|l| l.trim_end()).collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let block_start = i;
        while i < lines.len() && !lines[i].trim().is_empty() {
            i += 1;
        }
        let block = &lines[block_start..i];
        // Optional cue-number line; anything else must be the arrow line.
        let (arrow_idx, text_from) = if block[0].contains("-->") {
            (0, 1)
        } else if block.len() >= 2 {
            (1, 2)
        } else {
            return Err(TranscriptError::MalformedCue(block_start + 2));
        };
        let (start, end) = parse_arrow_line(block[arrow_idx], block_start + arrow_idx + 1)?;
        let joined = block[text_from..]
            .iter()
            .map(|l| l.trim())
            .collect::<Vec<_>>()
            .join(" ");
        let (speaker, text) = split_speaker(&joined);
        out.push(Utterance {
            index: out.len(),
            start,
            end,
            speaker,
            text,
        });
    }
    Ok(out)
}

/// Flattens text to the single-line form used in canonical SRT.
pub fn normalize_text(text: &str) -> String {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Writes canonical SRT. Fails if `utterances` is not sorted by start.
pub fn serialize_srt(utterances: &[Utterance]) -> Result<String, TranscriptError> {
    if let Some(k) = utterances.windows(2).position(|w| w[0].start > w[1].start) {
        return Err(TranscriptError::Unsorted(k + 1));
    }
    let mut out = String::new();
    for (k, u) in utterances.iter().enumerate() {
        if k > 0 {
            out.push('\n');
        }
        let text = normalize_text(&u.text);
        let _ = writeln!(out, "{}", k + 1);
        let _ = writeln!(
            out,
            "{} --> {}",
            format_timecode(u.start),
            format_timecode(u.end)
        );
        match u.speaker {
            Speaker::User => {
                let _ = writeln!(out, "{text}");
            }
            other => {
                let _ = writeln!(out, "[{}] {text}", other.as_str());
            }
        }
    }
    Ok(out)
}

/// Number of utterances with `start <= t` in a start-sorted list.
pub fn slice_len(utterances: &[Utterance], t: Timecode) -> usize {
    utterances.partition_point(|u| u.start <= t)
}

/// Utterances with `start <= t`, in order. An utterance still in progress at
/// `t` is included.
pub fn slice_at(utterances: &[Utterance], t: Timecode) -> &[Utterance] {
    &utterances[..slice_len(utterances, t)]
}
