#ifndef CTVAE_H
#define CTVAE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CtvaeStatus {
  CTVAE_STATUS_OK = 0,
  CTVAE_STATUS_NULL_ARGUMENT = 1,
  CTVAE_STATUS_INVALID_UTF8 = 2,
  CTVAE_STATUS_IO = 3,
  // Unreadable, corrupt or wrong-version checkpoint.
  CTVAE_STATUS_CHECKPOINT = 4,
  // The checkpoint holds a different kind of network.
  CTVAE_STATUS_KIND_MISMATCH = 5,
  CTVAE_STATUS_INVALID_ARGUMENT = 6,
  // Generation or scoring failed for the given input.
  CTVAE_STATUS_RUNTIME = 7,
  CTVAE_STATUS_PANIC = 8,
} CtvaeStatus;

typedef struct CtvaeGenerator CtvaeGenerator;

typedef struct CtvaeResponses CtvaeResponses;

typedef struct CtvaeTcd CtvaeTcd;

// Decoding and reranking settings of [`ctvae_respond`].
typedef struct CtvaeRespondOptions {
  // Latent samples for the variational models.
  size_t n_samples;
  // Beam width per latent sample.
  size_t beam;
  // Beam width of the Seq2Seq search.
  size_t seq2seq_beam;
  size_t top_k;
  // Weight of the log coherence probability in the ranking score.
  double lambda;
  uint64_t seed;
} CtvaeRespondOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on this thread (empty after a
// success). Valid until the next call on the same thread.
const char *ctvae_last_error(void);

// Library version, static storage.
const char *ctvae_version(void);

// Loads a generator checkpoint (any of the four kinds).
//
// # Safety
// `path` must be a valid string; `out` must point to writable storage.
enum CtvaeStatus ctvae_generator_load(const char *path, struct CtvaeGenerator **out);

// Model kind of a loaded generator (`seq2seq`, `cvae`, `cvae-simple` or
// `ctvae`); owned by the handle.
//
// # Safety
// `gen` must be null or a live handle.
const char *ctvae_generator_kind(const struct CtvaeGenerator *gen);

// # Safety
// `gen` must be null or a handle from [`ctvae_generator_load`] not yet freed.
void ctvae_generator_free(struct CtvaeGenerator *gen);

// Loads a coherence-discriminator checkpoint.
//
// # Safety
// `path` must be a valid string; `out` must point to writable storage.
enum CtvaeStatus ctvae_tcd_load(const char *path, struct CtvaeTcd **out);

// # Safety
// `tcd` must be null or a handle from [`ctvae_tcd_load`] not yet freed.
void ctvae_tcd_free(struct CtvaeTcd *tcd);

// Probability that `response` is a coherent reply to `post`.
//
// # Safety
// Handles and strings must be valid; `out_p` must be writable.
enum CtvaeStatus ctvae_tcd_score(const struct CtvaeTcd *tcd,
                                 const char *post,
                                 const char *response,
                                 double *out_p);

// Defaults: 50 samples, beam 20, Seq2Seq beam 50, top 5, λ = 5, seed 0.
struct CtvaeRespondOptions ctvae_respond_options_default(void);

// Generates candidates for `post`, reranks them with `tcd` and stores the
// top-k in a new responses handle.
//
// # Safety
// Handles and strings must be valid; `opts` may be null for the defaults;
// `out` must be writable.
enum CtvaeStatus ctvae_respond(const struct CtvaeGenerator *gen,
                               const struct CtvaeTcd *tcd,
                               const char *post,
                               const struct CtvaeRespondOptions *opts,
                               struct CtvaeResponses **out);

// Number of responses held; 0 for a null handle.
//
// # Safety
// `r` must be null or a live handle.
size_t ctvae_responses_len(const struct CtvaeResponses *r);

// Response `i` (best first). `text` stays valid until the handle is freed;
// `score` and `tcd_prob` may be null.
//
// # Safety
// `r` must be a live handle and `text` writable.
enum CtvaeStatus ctvae_responses_get(const struct CtvaeResponses *r,
                                     size_t i,
                                     const char **text,
                                     double *score,
                                     double *tcd_prob);

// # Safety
// `r` must be null or a handle from [`ctvae_respond`] not yet freed.
void ctvae_responses_free(struct CtvaeResponses *r);

// Distinct n-gram ratio (in [0, 1]) over `n` whitespace-tokenized responses.
//
// # Safety
// `responses` must point to `n` valid strings; `out` must be writable.
enum CtvaeStatus ctvae_distinct_n(const char *const *responses,
                                  size_t n,
                                  size_t order,
                                  double *out);

// Fraction of distinct responses (in [0, 1]).
//
// # Safety
// `responses` must point to `n` valid strings; `out` must be writable.
enum CtvaeStatus ctvae_unique_ratio(const char *const *responses, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CTVAE_H */
