#ifndef SKILLMEM_H
#define SKILLMEM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SmStatus {
  SM_OK = 0,
  SM_ERR_NULL_POINTER = 1,
  SM_ERR_UTF8 = 2,
  SM_ERR_INVALID_ARGUMENT = 3,
  SM_ERR_CONFIG = 4,
  SM_ERR_RUNTIME = 5,
  SM_ERR_PANIC = 6,
} SmStatus;

/**
 * Opaque memory bank with its own hashing embedder.
 */
typedef struct SmMemoryBank SmMemoryBank;

/**
 * Opaque skill bank.
 */
typedef struct SmSkillBank SmSkillBank;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread; do not free.
 */
const char *sm_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void sm_string_free(char *s);

/**
 * Bank holding the four primitive skills (version 0).
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum SmStatus sm_skill_bank_new_primitives(struct SmSkillBank **out);

/**
 * # Safety
 * `json` must be a NUL-terminated string; `out` a valid pointer.
 */
enum SmStatus sm_skill_bank_from_json(const char *json, struct SmSkillBank **out);

/**
 * # Safety
 * `bank` must be a live handle; `out` a valid pointer.
 */
enum SmStatus sm_skill_bank_to_json(const struct SmSkillBank *bank, char **out);

/**
 * Number of skills, or 0 for a null handle.
 *
 * # Safety
 * `bank` must be null or a live handle.
 */
size_t sm_skill_bank_len(const struct SmSkillBank *bank);

/**
 * # Safety
 * `bank` must be null or a live handle.
 */
uint64_t sm_skill_bank_version(const struct SmSkillBank *bank);

/**
 * # Safety
 * `bank` must be null or a handle not yet freed.
 */
void sm_skill_bank_free(struct SmSkillBank *bank);

/**
 * Empty memory bank embedding with feature hashing into `dim` dimensions.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum SmStatus sm_memory_bank_new(size_t dim, struct SmMemoryBank **out);

/**
 * # Safety
 * `bank` must be a live handle; `text` NUL-terminated; `out_id` valid or null.
 */
enum SmStatus sm_memory_bank_insert(struct SmMemoryBank *bank,
                                    const char *text,
                                    uint64_t step,
                                    uint64_t *out_id);

/**
 * Top-`r` memories for `query` as a JSON array of
 * `{"index","id","text","score"}`.
 *
 * # Safety
 * `bank` must be a live handle; `query` NUL-terminated; `out` valid.
 */
enum SmStatus sm_memory_bank_retrieve_json(const struct SmMemoryBank *bank,
                                           const char *query,
                                           size_t r,
                                           char **out);

/**
 * # Safety
 * `bank` must be a live handle; `out` valid.
 */
enum SmStatus sm_memory_bank_to_jsonl(const struct SmMemoryBank *bank, char **out);

/**
 * # Safety
 * `bank` must be null or a live handle.
 */
size_t sm_memory_bank_len(const struct SmMemoryBank *bank);

/**
 * # Safety
 * `bank` must be null or a handle not yet freed.
 */
void sm_memory_bank_free(struct SmMemoryBank *bank);

/**
 * Parses executor output into `{"actions":[...],"warnings":[...]}`.
 *
 * # Safety
 * `text` NUL-terminated; `out` valid.
 */
enum SmStatus sm_parse_actions_json(const char *text, char **out);

/**
 * # Safety
 * Both strings NUL-terminated; `out` valid.
 */
enum SmStatus sm_token_f1(const char *prediction, const char *gold, double *out);

/**
 * Trains with the TOML config at `config_path` and returns a JSON summary.
 * Artifacts go to the config's `output_dir`.
 *
 * # Safety
 * `config_path` NUL-terminated; `out` valid.
 */
enum SmStatus sm_train(const char *config_path, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SKILLMEM_H */
