#ifndef ACCOMP_H
#define ACCOMP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AccompAddress {
  ACCOMP_ADDRESS_CONTEXT = 0,
  ACCOMP_ADDRESS_PREDICTION = 1,
} AccompAddress;

typedef enum AccompFeed {
  ACCOMP_FEED_INCOMPLETE = 0,
  ACCOMP_FEED_COMPLETE = 1,
  ACCOMP_FEED_STALE_DROPPED = 2,
  ACCOMP_FEED_DUPLICATE_DROPPED = 3,
} AccompFeed;

typedef enum AccompStatus {
  ACCOMP_STATUS_OK = 0,
  ACCOMP_STATUS_NULL_POINTER = 1,
  ACCOMP_STATUS_INVALID_CONFIG = 2,
  ACCOMP_STATUS_BUFFER_TOO_SMALL = 3,
  ACCOMP_STATUS_ENCODE = 4,
  ACCOMP_STATUS_DECODE = 5,
  ACCOMP_STATUS_PROTOCOL = 6,
  ACCOMP_STATUS_NO_FEASIBLE_RATIO = 7,
  ACCOMP_STATUS_EMPTY = 8,
  ACCOMP_STATUS_PANIC = 9,
} AccompStatus;

// Opaque window configuration.
typedef struct AccompConfig AccompConfig;

// Opaque chunk reassembler. Holds the samples of the last completed step.
typedef struct AccompReassembler AccompReassembler;

// Half-open sample interval `[start, end)`.
typedef struct AccompSpan {
  int64_t start;
  int64_t end;
} AccompSpan;

typedef struct AccompStageTimings {
  double client_to_server_ms;
  double encode_ms;
  double sampling_ms;
  double decode_ms;
  double server_to_client_ms;
} AccompStageTimings;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Creates a configuration on the default 6 s, 44.1 kHz, 64x64 grid.
//
// # Safety
// `out` must be valid for writes.
enum AccompStatus accomp_config_new(uint32_t step_frames,
                                    int32_t lookahead,
                                    uint32_t fade,
                                    struct AccompConfig **out);

// # Safety
// `out` must be valid for writes.
enum AccompStatus accomp_config_new_full(uint64_t window_samples,
                                         uint32_t sample_rate,
                                         uint32_t latent_frames,
                                         uint32_t latent_bins,
                                         uint32_t step_frames,
                                         int32_t lookahead,
                                         uint32_t fade,
                                         struct AccompConfig **out);

// # Safety
// `cfg` must come from `accomp_config_new*` and not be used afterwards.
void accomp_config_free(struct AccompConfig *cfg);

// Samples per step; 0 for a null handle.
//
// # Safety
// `cfg` must be null or a live handle.
uint64_t accomp_config_step_samples(const struct AccompConfig *cfg);

// Fade prelude plus one step; 0 for a null handle.
//
// # Safety
// `cfg` must be null or a live handle.
uint64_t accomp_config_response_samples(const struct AccompConfig *cfg);

// Real-time budget in milliseconds; 0 for a null handle.
//
// # Safety
// `cfg` must be null or a live handle.
double accomp_config_step_ms(const struct AccompConfig *cfg);

// Writes one byte per latent frame: 1 where the context is visible.
//
// # Safety
// `cfg` must be a live handle; `out` must be valid for `len` bytes.
enum AccompStatus accomp_context_mask(const struct AccompConfig *cfg, uint8_t *out, size_t len);

// Writes one byte per latent frame: 1 where the target is fixed.
//
// # Safety
// `cfg` must be a live handle; `out` must be valid for `len` bytes.
enum AccompStatus accomp_target_mask(const struct AccompConfig *cfg, uint8_t *out, size_t len);

// # Safety
// `cfg` must be a live handle; `out` must be valid for writes.
enum AccompStatus accomp_read_interval(const struct AccompConfig *cfg,
                                       int64_t curr,
                                       struct AccompSpan *out);

// # Safety
// `cfg` must be a live handle; `out` must be valid for writes.
enum AccompStatus accomp_write_interval(const struct AccompConfig *cfg,
                                        int64_t curr,
                                        struct AccompSpan *out);

// The fade prelude preceding the write interval.
//
// # Safety
// `cfg` must be a live handle; `out` must be valid for writes.
enum AccompStatus accomp_fade_interval(const struct AccompConfig *cfg,
                                       int64_t curr,
                                       struct AccompSpan *out);

// Sum of the five stages; NaN for a null pointer.
//
// # Safety
// `t` must be null or valid for reads.
double accomp_full_cycle(const struct AccompStageTimings *t);

bool accomp_rt_feasible(double d_total_ms, double budget_ms);

// Minimum feasible step ratio and its latent-grid snap (frames out of
// `latent_frames`).
//
// # Safety
// `r_star` and `snapped_frames` must be valid for writes.
enum AccompStatus accomp_min_step_ratio(double d_compute_ms,
                                        double c_ms,
                                        double receptive_field_ms,
                                        uint32_t latent_frames,
                                        double *r_star,
                                        uint32_t *snapped_frames);

// Number of chunks a payload of `samples` splits into.
uint64_t accomp_chunk_count(uint64_t samples, uint64_t packet_size);

// Encodes one chunk. `written` receives the datagram length; when
// `capacity` is too small it still receives the required length.
//
// # Safety
// `samples` must be valid for `n` floats, `out` for `capacity` bytes and
// `written` for writes.
enum AccompStatus accomp_encode_chunk(enum AccompAddress address,
                                      uint32_t step_id,
                                      uint32_t chunk_index,
                                      uint32_t chunk_total,
                                      const float *samples,
                                      size_t n,
                                      size_t packet_size,
                                      uint8_t *out,
                                      size_t capacity,
                                      size_t *written);

// Encoded size of a chunk carrying `n` samples.
size_t accomp_chunk_datagram_len(enum AccompAddress address, size_t n);

// # Safety
// `out` must be valid for writes.
enum AccompStatus accomp_reassembler_new(size_t packet_size, struct AccompReassembler **out);

// # Safety
// `r` must come from `accomp_reassembler_new` and not be used afterwards.
void accomp_reassembler_free(struct AccompReassembler *r);

// Feeds one datagram. On `ACCOMP_FEED_COMPLETE` the step's samples are
// held until the next completion; fetch them with
// `accomp_reassembler_take`.
//
// # Safety
// `r` must be a live handle, `bytes` valid for `len` bytes, `outcome`
// and `step_id` valid for writes.
enum AccompStatus accomp_reassembler_feed(struct AccompReassembler *r,
                                          const uint8_t *bytes,
                                          size_t len,
                                          enum AccompFeed *outcome,
                                          uint32_t *step_id);

// Copies out the last completed step. `written` receives the sample
// count, also when `capacity` is too small.
//
// # Safety
// `r` must be a live handle, `out` valid for `capacity` floats and
// `written` for writes.
enum AccompStatus accomp_reassembler_take(struct AccompReassembler *r,
                                          float *out,
                                          size_t capacity,
                                          size_t *written);

// Splits `n` samples into chunk datagrams written back to back into
// `out`; `lengths` receives each datagram's size. Returns the chunk count
// through `count`.
//
// # Safety
// `samples` valid for `n` floats, `out` for `capacity` bytes, `lengths`
// for `max_chunks` entries, `count` for writes.
enum AccompStatus accomp_encode_step(enum AccompAddress address,
                                     uint32_t step_id,
                                     const float *samples,
                                     size_t n,
                                     size_t packet_size,
                                     uint8_t *out,
                                     size_t capacity,
                                     size_t *lengths,
                                     size_t max_chunks,
                                     size_t *count);

const char *accomp_status_str(enum AccompStatus status);

const char *accomp_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ACCOMP_H */
