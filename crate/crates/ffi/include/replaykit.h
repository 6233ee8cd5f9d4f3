#ifndef REPLAYKIT_H
#define REPLAYKIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RkStatus {
  RK_STATUS_OK = 0,
  RK_STATUS_NULL_ARGUMENT = 1,
  RK_STATUS_INVALID_UTF8 = 2,
  RK_STATUS_PARSE = 3,
  RK_STATUS_NOT_FOUND = 4,
  RK_STATUS_INVALID_INPUT = 5,
  RK_STATUS_CONFLICT = 6,
  RK_STATUS_IO = 7,
  RK_STATUS_BUFFER_TOO_SMALL = 8,
  RK_STATUS_PANIC = 9,
} RkStatus;

/**
 * Frame index for one session.
 */
typedef struct RkFrameIndex RkFrameIndex;

/**
 * Open evaluation store over a media root.
 */
typedef struct RkStore RkStore;

/**
 * Parsed transcript.
 */
typedef struct RkTranscript RkTranscript;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or null. The pointer
 * stays valid until the next replaykit call on the same thread.
 */
const char *rk_last_error(void);

/**
 * Frees a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void rk_string_free(char *s);

/**
 * Parses `HH:MM:SS,mmm` or `HH:MM:SS` into milliseconds.
 *
 * # Safety
 * `text` must be a valid C string; `out_ms` must be writable.
 */
enum RkStatus rk_timecode_parse(const char *text, uint64_t *out_ms);

/**
 * Formats milliseconds as `HH:MM:SS,mmm`. Free with [`rk_string_free`].
 */
char *rk_timecode_format(uint64_t ms);

/**
 * FNV-1a 64 over `len` bytes at `data`. A null `data` hashes the empty input.
 *
 * # Safety
 * `data` must point to `len` readable bytes when non-null.
 */
uint64_t rk_fnv1a64(const uint8_t *data, size_t len);

/**
 * Parses SRT text.
 *
 * # Safety
 * `srt` must be a valid C string; `out` must be writable.
 */
enum RkStatus rk_transcript_parse(const char *srt, struct RkTranscript **out);

/**
 * # Safety
 * `t` must come from [`rk_transcript_parse`] and not have been freed.
 */
void rk_transcript_free(struct RkTranscript *t);

/**
 * Number of utterances; 0 for null.
 *
 * # Safety
 * `t` must be null or a live transcript handle.
 */
size_t rk_transcript_len(const struct RkTranscript *t);

/**
 * Number of utterances whose start is at or before `t_ms`; 0 for null.
 *
 * # Safety
 * `t` must be null or a live transcript handle.
 */
size_t rk_transcript_slice_len(const struct RkTranscript *t, uint64_t t_ms);

/**
 * Serializes back to SRT.
 *
 * # Safety
 * `t` must be a live transcript handle; `out` must be writable.
 */
enum RkStatus rk_transcript_to_srt(const struct RkTranscript *t, char **out);

/**
 * Utterances as a JSON array.
 *
 * # Safety
 * `t` must be a live transcript handle; `out` must be writable.
 */
enum RkStatus rk_transcript_to_json(const struct RkTranscript *t, char **out);

/**
 * Builds a frame index from `count` file names. Names that are not
 * `frame_<millis>.jpg|png` are skipped.
 *
 * # Safety
 * `session_id` must be a valid C string, `names` must point to `count`
 * valid C strings, and `out` must be writable.
 */
enum RkStatus rk_frames_from_names(const char *session_id,
                                   const char *const *names,
                                   size_t count,
                                   struct RkFrameIndex **out);

/**
 * # Safety
 * `f` must come from [`rk_frames_from_names`] and not have been freed.
 */
void rk_frames_free(struct RkFrameIndex *f);

/**
 * # Safety
 * `f` must be null or a live frame index handle.
 */
size_t rk_frames_len(const struct RkFrameIndex *f);

/**
 * Samples at most `max_frames` frames at or before `t_ms`, at least
 * `min_stride_ms` apart, newest first selection, written oldest first into
 * `out_times`. `out_count` receives the number selected; if it exceeds
 * `capacity` nothing is written and `BufferTooSmall` is returned.
 *
 * # Safety
 * `f` must be a live handle; `out_times` must hold `capacity` values;
 * `out_count` must be writable.
 */
enum RkStatus rk_frames_sample(const struct RkFrameIndex *f,
                               uint64_t t_ms,
                               size_t max_frames,
                               uint64_t min_stride_ms,
                               uint64_t *out_times,
                               size_t capacity,
                               size_t *out_count);

/**
 * Opens the store rooted at `media_root`.
 *
 * # Safety
 * `media_root` must be a valid C string; `out` must be writable.
 */
enum RkStatus rk_store_open(const char *media_root, struct RkStore **out);

/**
 * # Safety
 * `s` must come from [`rk_store_open`] and not have been freed.
 */
void rk_store_free(struct RkStore *s);

/**
 * Upserts a 1..=5 rating. `comment` may be null; a null `rater` means
 * `"console"`.
 *
 * # Safety
 * `s` must be a live handle; string arguments must be valid C strings or
 * null where allowed.
 */
enum RkStatus rk_store_rate(const struct RkStore *s,
                            const char *message_id,
                            int64_t score,
                            const char *comment,
                            const char *rater);

/**
 * Records approval (`approved != 0`) or denial with `reason`.
 *
 * # Safety
 * `s` must be a live handle; `message_id` must be a valid C string;
 * `reason` must be a valid C string or null.
 */
enum RkStatus rk_store_set_decision(const struct RkStore *s,
                                    const char *message_id,
                                    int32_t approved,
                                    const char *reason);

/**
 * Evaluation CSV for one session.
 *
 * # Safety
 * `s` must be a live handle; `session_id` a valid C string; `out` writable.
 */
enum RkStatus rk_store_export_csv(const struct RkStore *s, const char *session_id, char **out);

/**
 * Coding view (messages with ratings and annotations, ordered by t) as JSON.
 *
 * # Safety
 * `s` must be a live handle; `session_id` a valid C string; `out` writable.
 */
enum RkStatus rk_store_coding_view_json(const struct RkStore *s,
                                        const char *session_id,
                                        char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REPLAYKIT_H */
