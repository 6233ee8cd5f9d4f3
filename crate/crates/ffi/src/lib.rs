//! C ABI over the replaykit core: timecodes, transcripts, frame sampling and
//! the evaluation store.
//!
//! Conventions:
//! - Functions that can fail return an [`RkStatus`]; on failure the message is
//!   available from [`rk_last_error`] on the same thread.
//! - Handles are opaque and freed with their matching `*_free` function.
//! - Strings returned through `out` pointers are owned by the caller and
//!   released with [`rk_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use replaykit::hash::fnv1a64;
use replaykit::media::{FrameIndex, MediaError, SamplingPolicy};
use replaykit::session::{Decision, Timecode, Utterance};
use replaykit::store::{Store, StoreError};
use replaykit::transcript::{format_timecode, parse_srt, parse_timecode, serialize_srt, slice_len};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RkStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    NotFound = 4,
    InvalidInput = 5,
    Conflict = 6,
    Io = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Parsed transcript.
pub struct RkTranscript {
    utterances: Vec<Utterance>,
}

/// Frame index for one session.
pub struct RkFrameIndex {
    index: FrameIndex,
}

/// Open evaluation store over a media root.
pub struct RkStore {
    store: Store,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(RkStatus, String);

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        let status = match e {
            StoreError::UnknownSession(_) | StoreError::UnknownMessage(_) => RkStatus::NotFound,
            StoreError::EmptyDenialReason
            | StoreError::ScoreOutOfRange(_)
            | StoreError::EmptyLabel
            | StoreError::InvalidMessage(_) => RkStatus::InvalidInput,
            StoreError::AlreadyDecided { .. } | StoreError::NotApproved(_) | StoreError::DuplicateMessage(_) => {
                RkStatus::Conflict
            }
            StoreError::Corrupt { .. } => RkStatus::Parse,
            StoreError::Io(_) => RkStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

impl From<MediaError> for Failure {
    fn from(e: MediaError) -> Self {
        let status = match e {
            MediaError::DuplicateTimestamp(_) => RkStatus::InvalidInput,
            MediaError::Io(_) => RkStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            RkStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            RkStatus::Panic
        }
    }
}

unsafe fn arg_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(RkStatus::NullArgument, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(RkStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

unsafe fn opt_str<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        arg_str(p, name).map(Some)
    }
}

unsafe fn arg_ref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(RkStatus::NullArgument, format!("`{name}` is null")))
}

unsafe fn write_out<T>(out: *mut T, value: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(RkStatus::NullArgument, format!("`{name}` is null")));
    }
    out.write(value);
    Ok(())
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| Failure(RkStatus::InvalidInput, "string contains a nul byte".into()))?;
    write_out(out, c.into_raw(), "out")
}

/// Message of the most recent failure on this thread, or null. The pointer
/// stays valid until the next replaykit call on the same thread.
#[no_mangle]
pub extern "C" fn rk_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn rk_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses `HH:MM:SS,mmm` or `HH:MM:SS` into milliseconds.
///
/// # Safety
/// `text` must be a valid C string; `out_ms` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rk_timecode_parse(text: *const c_char, out_ms: *mut u64) -> RkStatus {
    guard(|| {
        let text = arg_str(text, "text")?;
        let t = parse_timecode(text).map_err(|e| Failure(RkStatus::Parse, e.to_string()))?;
        write_out(out_ms, t.0, "out_ms")
    })
}

/// Formats milliseconds as `HH:MM:SS,mmm`. Free with [`rk_string_free`].
#[no_mangle]
pub extern "C" fn rk_timecode_format(ms: u64) -> *mut c_char {
    CString::new(format_timecode(Timecode(ms)))
        .expect("timecodes are ASCII")
        .into_raw()
}

/// FNV-1a 64 over `len` bytes at `data`. A null `data` hashes the empty input.
///
/// # Safety
/// `data` must point to `len` readable bytes when non-null.
#[no_mangle]
pub unsafe extern "C" fn rk_fnv1a64(data: *const u8, len: usize) -> u64 {
    if data.is_null() {
        return fnv1a64(&[]);
    }
    fnv1a64(std::slice::from_raw_parts(data, len))
}

/// Parses SRT text.
///
/// # Safety
/// `srt` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rk_transcript_parse(srt: *const c_char, out: *mut *mut RkTranscript) -> RkStatus {
    guard(|| {
        let srt = arg_str(srt, "srt")?;
        let utterances = parse_srt(srt).map_err(|e| Failure(RkStatus::Parse, e.to_string()))?;
        write_out(out, Box::into_raw(Box::new(RkTranscript { utterances })), "out")
    })
}

/// # Safety
/// `t` must come from [`rk_transcript_parse`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn rk_transcript_free(t: *mut RkTranscript) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Number of utterances; 0 for null.
///
/// # Safety
/// `t` must be null or a live transcript handle.
#[no_mangle]
pub unsafe extern "C" fn rk_transcript_len(t: *const RkTranscript) -> usize {
    t.as_ref().map_or(0, |t| t.utterances.len())
}

/// Number of utterances whose start is at or before `t_ms`; 0 for null.
///
/// # Safety
/// `t` must be null or a live transcript handle.
#[no_mangle]
pub unsafe extern "C" fn rk_transcript_slice_len(t: *const RkTranscript, t_ms: u64) -> usize {
    t.as_ref().map_or(0, |t| slice_len(&t.utterances, Timecode(t_ms)))
}

/// Serializes back to SRT.
///
/// # Safety
/// `t` must be a live transcript handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rk_transcript_to_srt(t: *const RkTranscript, out: *mut *mut c_char) -> RkStatus {
    guard(|| {
        let t = arg_ref(t, "transcript")?;
        let text = serialize_srt(&t.utterances).map_err(|e| Failure(RkStatus::InvalidInput, e.to_string()))?;
        write_string(out, text)
    })
}

/// Utterances as a JSON array.
///
/// # Safety
/// `t` must be a live transcript handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rk_transcript_to_json(t: *const RkTranscript, out: *mut *mut c_char) -> RkStatus {
    guard(|| {
        let t = arg_ref(t, "transcript")?;
        write_string(out, serde_json::to_string(&t.utterances).expect("utterances serialize"))
    })
}

/// Builds a frame index from `count` file names. Names that are not
/// `frame_<millis>.jpg|png` are skipped.
///
/// # Safety
/// `session_id` must be a valid C string, `names` must point to `count`
/// valid C strings, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rk_frames_from_names(
    session_id: *const c_char,
    names: *const *const c_char,
    count: usize,
    out: *mut *mut RkFrameIndex,
) -> RkStatus {
    guard(|| {
        let session_id = arg_str(session_id, "session_id")?;
        let mut listing = Vec::with_capacity(count);
        if count > 0 {
            if names.is_null() {
                return Err(Failure(RkStatus::NullArgument, "`names` is null".into()));
            }
            for (i, p) in std::slice::from_raw_parts(names, count).iter().enumerate() {
                listing.push((arg_str(*p, &format!("names[{i}]"))?, None));
            }
        }
        let build = FrameIndex::from_listing(session_id, "frames", listing)?;
        write_out(out, Box::into_raw(Box::new(RkFrameIndex { index: build.index })), "out")
    })
}

/// # Safety
/// `f` must come from [`rk_frames_from_names`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn rk_frames_free(f: *mut RkFrameIndex) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// # Safety
/// `f` must be null or a live frame index handle.
#[no_mangle]
pub unsafe extern "C" fn rk_frames_len(f: *const RkFrameIndex) -> usize {
    f.as_ref().map_or(0, |f| f.index.len())
}

/// Samples at most `max_frames` frames at or before `t_ms`, at least
/// `min_stride_ms` apart, newest first selection, written oldest first into
/// `out_times`. `out_count` receives the number selected; if it exceeds
/// `capacity` nothing is written and `BufferTooSmall` is returned.
///
/// # Safety
/// `f` must be a live handle; `out_times` must hold `capacity` values;
/// `out_count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rk_frames_sample(
    f: *const RkFrameIndex,
    t_ms: u64,
    max_frames: usize,
    min_stride_ms: u64,
    out_times: *mut u64,
    capacity: usize,
    out_count: *mut usize,
) -> RkStatus {
    guard(|| {
        let f = arg_ref(f, "frames")?;
        let policy = SamplingPolicy {
            max_frames,
            min_stride: Timecode(min_stride_ms),
        };
        let picked = f.index.sample(Timecode(t_ms), &policy);
        write_out(out_count, picked.len(), "out_count")?;
        if picked.len() > capacity {
            return Err(Failure(
                RkStatus::BufferTooSmall,
                format!("{} frames selected, capacity {capacity}", picked.len()),
            ));
        }
        if !picked.is_empty() {
            if out_times.is_null() {
                return Err(Failure(RkStatus::NullArgument, "`out_times` is null".into()));
            }
            for (i, frame) in picked.iter().enumerate() {
                out_times.add(i).write(frame.t.0);
            }
        }
        Ok(())
    })
}

/// Opens the store rooted at `media_root`.
///
/// # Safety
/// `media_root` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rk_store_open(media_root: *const c_char, out: *mut *mut RkStore) -> RkStatus {
    guard(|| {
        let root = arg_str(media_root, "media_root")?;
        let store = Store::open(root)?;
        write_out(out, Box::into_raw(Box::new(RkStore { store })), "out")
    })
}

/// # Safety
/// `s` must come from [`rk_store_open`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn rk_store_free(s: *mut RkStore) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Upserts a 1..=5 rating. `comment` may be null; a null `rater` means
/// `"console"`.
///
/// # Safety
/// `s` must be a live handle; string arguments must be valid C strings or
/// null where allowed.
#[no_mangle]
pub unsafe extern "C" fn rk_store_rate(
    s: *const RkStore,
    message_id: *const c_char,
    score: i64,
    comment: *const c_char,
    rater: *const c_char,
) -> RkStatus {
    guard(|| {
        let s = arg_ref(s, "store")?;
        let id = arg_str(message_id, "message_id")?;
        let comment = opt_str(comment, "comment")?.map(str::to_string);
        let rater = opt_str(rater, "rater")?.unwrap_or("console");
        s.store.rate(id, score, comment, rater)?;
        Ok(())
    })
}

/// Records approval (`approved != 0`) or denial with `reason`.
///
/// # Safety
/// `s` must be a live handle; `message_id` must be a valid C string;
/// `reason` must be a valid C string or null.
#[no_mangle]
pub unsafe extern "C" fn rk_store_set_decision(
    s: *const RkStore,
    message_id: *const c_char,
    approved: i32,
    reason: *const c_char,
) -> RkStatus {
    guard(|| {
        let s = arg_ref(s, "store")?;
        let id = arg_str(message_id, "message_id")?;
        let decision = if approved != 0 {
            Decision::Approved
        } else {
            Decision::Denied {
                reason: opt_str(reason, "reason")?.unwrap_or("").to_string(),
            }
        };
        s.store.set_decision(id, decision)?;
        Ok(())
    })
}

/// Evaluation CSV for one session.
///
/// # Safety
/// `s` must be a live handle; `session_id` a valid C string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rk_store_export_csv(
    s: *const RkStore,
    session_id: *const c_char,
    out: *mut *mut c_char,
) -> RkStatus {
    guard(|| {
        let s = arg_ref(s, "store")?;
        let id = arg_str(session_id, "session_id")?;
        let csv = s.store.export_csv(id)?;
        write_string(out, csv)
    })
}

/// Coding view (messages with ratings and annotations, ordered by t) as JSON.
///
/// # Safety
/// `s` must be a live handle; `session_id` a valid C string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rk_store_coding_view_json(
    s: *const RkStore,
    session_id: *const c_char,
    out: *mut *mut c_char,
) -> RkStatus {
    guard(|| {
        let s = arg_ref(s, "store")?;
        let id = arg_str(session_id, "session_id")?;
        let rows = s.store.coding_view(id)?;
        write_string(out, serde_json::to_string(&rows).expect("coding rows serialize"))
    })
}
