#ifndef SEQKV_H
#define SEQKV_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdint.h>
#include <stddef.h>

// Result code of every fallible call.
typedef enum SeqkvStatus {
  SEQKV_STATUS_OK = 0,
  SEQKV_STATUS_NULL_POINTER = 1,
  SEQKV_STATUS_INVALID_ARGUMENT = 2,
  SEQKV_STATUS_INVALID_CONFIG = 3,
  SEQKV_STATUS_OUT_OF_RANGE = 4,
  SEQKV_STATUS_NOT_FOUND = 5,
  SEQKV_STATUS_BUFFER_TOO_SMALL = 6,
  SEQKV_STATUS_CORRUPTED = 7,
  SEQKV_STATUS_FINGERPRINT_MISMATCH = 8,
  SEQKV_STATUS_UNRECOVERABLE = 9,
  SEQKV_STATUS_IO = 10,
  SEQKV_STATUS_PANIC = 11,
} SeqkvStatus;

// An owned byte buffer returned by the library.
typedef struct SeqkvBuffer SeqkvBuffer;

// Decoded contents of a container file.
typedef struct SeqkvCache SeqkvCache;

// Trie over stored sessions.
typedef struct SeqkvIndex SeqkvIndex;

// A built toy decoder.
typedef struct SeqkvModel SeqkvModel;

// Toy decoder configuration.
typedef struct SeqkvModelConfig {
  size_t vocab_size;
  size_t num_layers;
  size_t num_heads;
  size_t head_dim;
  uint64_t seed;
  size_t max_context;
} SeqkvModelConfig;

// Result of [`seqkv_index_best_match`].
typedef struct SeqkvMatch {
  uint32_t session;
  size_t shared_prefix_len;
  // `-log2 P(shared prefix)` in bits.
  double metric;
} SeqkvMatch;

// Closed-form storage figures for a transformer KV cache.
typedef struct SeqkvRatio {
  double bits_per_token;
  double fp16_bits_per_token;
  double vs_fp16;
  double vs_quantized;
} SeqkvRatio;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call on the same thread.
const char *seqkv_last_error(void);

// The default toy model configuration.
struct SeqkvModelConfig seqkv_model_config_default(void);

// Builds a model. `*out` receives the handle on success and is untouched otherwise.
//
// # Safety
// `out` must be a valid pointer to a handle slot.
enum SeqkvStatus seqkv_model_new(struct SeqkvModelConfig config, struct SeqkvModel **out);

// # Safety
// `model` must be null or a handle from [`seqkv_model_new`] not yet freed.
void seqkv_model_free(struct SeqkvModel *model);

// Weight fingerprint, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uint64_t seqkv_model_fingerprint(const struct SeqkvModel *model);

// Scalars per cached position, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t seqkv_model_kv_stride(const struct SeqkvModel *model);

// Runs the decoder over `tokens` and writes `len · kv_stride` values to
// `kv_out`, position-major. `kv_capacity` is the length of `kv_out`.
//
// # Safety
// `tokens` must be valid for `len` reads and `kv_out` for `kv_capacity` writes.
enum SeqkvStatus seqkv_model_forward(const struct SeqkvModel *model,
                                     const uint32_t *tokens,
                                     size_t len,
                                     double *kv_out,
                                     size_t kv_capacity);

// # Safety
// `model` must be a live handle and `out` a valid handle slot.
enum SeqkvStatus seqkv_index_new(const struct SeqkvModel *model, struct SeqkvIndex **out);

// # Safety
// `index` must be null or a handle from [`seqkv_index_new`] not yet freed.
void seqkv_index_free(struct SeqkvIndex *index);

// # Safety
// `index` must be a live handle and `tokens` valid for `len` reads.
enum SeqkvStatus seqkv_index_insert(struct SeqkvIndex *index,
                                    uint32_t session,
                                    const uint32_t *tokens,
                                    size_t len);

// # Safety
// `index` must be a live handle.
enum SeqkvStatus seqkv_index_evict(struct SeqkvIndex *index, uint32_t session);

// Finds the stored session sharing the most informative prefix with the
// query. Returns `NotFound` on an empty index.
//
// # Safety
// `index` must be a live handle, `query` valid for `len` reads, `out` valid.
enum SeqkvStatus seqkv_index_best_match(const struct SeqkvIndex *index,
                                        const uint32_t *query,
                                        size_t len,
                                        struct SeqkvMatch *out);

// # Safety
// `buffer` must be null or a live buffer handle.
const uint8_t *seqkv_buffer_data(const struct SeqkvBuffer *buffer);

// # Safety
// `buffer` must be null or a live buffer handle.
size_t seqkv_buffer_len(const struct SeqkvBuffer *buffer);

// # Safety
// `buffer` must be null or a buffer handle not yet freed.
void seqkv_buffer_free(struct SeqkvBuffer *buffer);

// Clusters and compresses `count` sessions at a uniform depth of `bits`.
// Session `i` has id `i` and tokens `tokens[offsets[i]..offsets[i + 1]]`,
// so `offsets` holds `count + 1` entries. Sessions whose shared prefix
// carries at least `threshold_bits` of information share a centroid.
//
// # Safety
// `tokens` must be valid for `offsets[count]` reads, `offsets` for
// `count + 1` reads, and `out` must be a valid handle slot.
enum SeqkvStatus seqkv_compress(const struct SeqkvModel *model,
                                const uint32_t *tokens,
                                const size_t *offsets,
                                size_t count,
                                uint8_t bits,
                                double threshold_bits,
                                struct SeqkvBuffer **out);

// Parses and decodes a container file produced for `model`.
//
// # Safety
// `bytes` must be valid for `len` reads and `out` a valid handle slot.
enum SeqkvStatus seqkv_decompress(const struct SeqkvModel *model,
                                  const uint8_t *bytes,
                                  size_t len,
                                  struct SeqkvCache **out);

// # Safety
// `cache` must be null or a handle from [`seqkv_decompress`] not yet freed.
void seqkv_cache_free(struct SeqkvCache *cache);

// Number of decoded sessions, or 0 for a null handle.
//
// # Safety
// `cache` must be null or a live handle.
size_t seqkv_cache_session_count(const struct SeqkvCache *cache);

// Token count of `session`, written to `*len`.
//
// # Safety
// `cache` must be a live handle and `len` valid.
enum SeqkvStatus seqkv_cache_session_len(const struct SeqkvCache *cache,
                                         uint32_t session,
                                         size_t *len);

// Copies the recovered tokens and KV of `session`. Either output may be
// null to skip it; capacities are element counts.
//
// # Safety
// `cache` must be a live handle; non-null outputs must be valid for their
// capacities.
enum SeqkvStatus seqkv_cache_session(const struct SeqkvCache *cache,
                                     uint32_t session,
                                     uint32_t *tokens_out,
                                     size_t tokens_capacity,
                                     double *kv_out,
                                     size_t kv_capacity);

// # Safety
// `out` must be valid.
enum SeqkvStatus seqkv_theoretical_ratio(double layers,
                                         double heads,
                                         double head_dim,
                                         double bits,
                                         double mean_surprisal,
                                         double overhead,
                                         struct SeqkvRatio *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEQKV_H */
