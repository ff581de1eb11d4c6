/*
 * dafedit -- sequential knowledge-editing engine, C interface.
 *
 * All engine functionality sits behind this header: pipeline commands that
 * read a JSON configuration and write artifacts into an output directory,
 * plus opaque handles for loading a checkpointed model and running an
 * interactive editing session. Every function returns a status code; on
 * failure dafedit_last_error() describes what went wrong (thread-local).
 */
#ifndef DAFEDIT_H
#define DAFEDIT_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum dafedit_status {
  DAFEDIT_OK = 0,
  DAFEDIT_ERR_INVALID_ARG = 1, /* bad pointer, malformed config, unknown name */
  DAFEDIT_ERR_IO = 2,          /* missing or unreadable artifact */
  DAFEDIT_ERR_SHAPE = 3,       /* tensor shape mismatch */
  DAFEDIT_ERR_RUNTIME = 4      /* anything else the engine rejected */
} dafedit_status;

const char* dafedit_version(void);

/* Message for the most recent failure on this thread; never NULL. */
const char* dafedit_last_error(void);

/* ---- pipeline commands ----
 * config_json is the merged configuration text (file contents plus any
 * overrides already applied). Outputs land in out_dir:
 *   pretrain -> lm.ckpt, pretrain_log.jsonl
 *   datagen  -> dataset.jsonl, stats.csv          (needs lm.ckpt)
 *   train    -> dafnet.ckpt, dafnet_iter*.ckpt, train_log.jsonl
 *   eval     -> metrics.csv, metrics.json, journal.jsonl, attn.csv
 */
dafedit_status dafedit_pretrain(const char* config_json, const char* out_dir);
dafedit_status dafedit_datagen(const char* config_json, const char* out_dir);
dafedit_status dafedit_train(const char* config_json, const char* out_dir);
dafedit_status dafedit_eval(const char* config_json, const char* out_dir);

/* Rebuilds the attention-score CSV from an edit journal. */
dafedit_status dafedit_export_attention(const char* journal_path, const char* out_csv);

/* ---- model handle ---- */
typedef struct dafedit_model dafedit_model;

dafedit_status dafedit_model_open(const char* lm_ckpt_path, dafedit_model** out_model);
void dafedit_model_close(dafedit_model* model);

/* Greedy continuation of a whitespace-tokenized prompt. Writes a
 * NUL-terminated string into buf; fails with DAFEDIT_ERR_INVALID_ARG when the
 * buffer is too small or the prompt contains out-of-vocabulary words. */
dafedit_status dafedit_model_decode(dafedit_model* model, const char* prompt, int max_new_tokens,
                                    char* buf, size_t buf_len);

/* ---- sequential editing session ----
 * A session owns a model plus a trained editing network and applies edits one
 * by one; the model inside the session accumulates the weight overlays.
 */
typedef struct dafedit_session dafedit_session;

dafedit_status dafedit_session_open(const char* lm_ckpt_path, const char* dafnet_ckpt_path,
                                    dafedit_session** out_session);
void dafedit_session_close(dafedit_session* session);

/* Applies the edit (prompt -> target) to the session model. */
dafedit_status dafedit_session_edit(dafedit_session* session, const char* prompt,
                                    const char* target);
dafedit_status dafedit_session_edit_count(dafedit_session* session, int* out_count);

/* Greedy decode against the session's edited model. */
dafedit_status dafedit_session_decode(dafedit_session* session, const char* prompt,
                                      int max_new_tokens, char* buf, size_t buf_len);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* DAFEDIT_H */
