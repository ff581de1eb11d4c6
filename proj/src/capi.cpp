#include "dafedit.h"

#include <cstring>
#include <string>

#include "dafedit/editor.hpp"
#include "dafedit/pipeline.hpp"
#include "dafedit/serialize.hpp"

namespace {

thread_local std::string g_last_error;

dafedit_status fail(dafedit_status code, const std::string& message) {
  g_last_error = message;
  return code;
}

template <typename Fn>
dafedit_status guarded(Fn&& fn) {
  try {
    fn();
    return DAFEDIT_OK;
  } catch (const dafedit::ShapeError& e) {
    return fail(DAFEDIT_ERR_SHAPE, e.what());
  } catch (const std::exception& e) {
    const std::string what = e.what();
    const bool io = what.find("cannot open") != std::string::npos ||
                    what.find("truncated") != std::string::npos;
    return fail(io ? DAFEDIT_ERR_IO : DAFEDIT_ERR_RUNTIME, what);
  }
}

dafedit_status copy_out(const std::string& text, char* buf, size_t buf_len) {
  if (buf == nullptr || buf_len == 0 || text.size() + 1 > buf_len) {
    return fail(DAFEDIT_ERR_INVALID_ARG,
                "output buffer too small: need " + std::to_string(text.size() + 1) + " bytes");
  }
  std::memcpy(buf, text.c_str(), text.size() + 1);
  return DAFEDIT_OK;
}

}  // namespace

struct dafedit_model {
  dafedit::EditableLM lm;
};

struct dafedit_session {
  dafedit::EditableLM lm;
  dafedit::DafnetEditor editor;
};

extern "C" {

const char* dafedit_version(void) { return "0.1.0"; }

const char* dafedit_last_error(void) { return g_last_error.c_str(); }

dafedit_status dafedit_pretrain(const char* config_json, const char* out_dir) {
  if (config_json == nullptr || out_dir == nullptr) {
    return fail(DAFEDIT_ERR_INVALID_ARG, "pretrain: null argument");
  }
  return guarded([&] { dafedit::run_pretrain(config_json, out_dir); });
}

dafedit_status dafedit_datagen(const char* config_json, const char* out_dir) {
  if (config_json == nullptr || out_dir == nullptr) {
    return fail(DAFEDIT_ERR_INVALID_ARG, "datagen: null argument");
  }
  return guarded([&] { dafedit::run_datagen(config_json, out_dir); });
}

dafedit_status dafedit_train(const char* config_json, const char* out_dir) {
  if (config_json == nullptr || out_dir == nullptr) {
    return fail(DAFEDIT_ERR_INVALID_ARG, "train: null argument");
  }
  return guarded([&] { dafedit::run_train(config_json, out_dir); });
}

dafedit_status dafedit_eval(const char* config_json, const char* out_dir) {
  if (config_json == nullptr || out_dir == nullptr) {
    return fail(DAFEDIT_ERR_INVALID_ARG, "eval: null argument");
  }
  return guarded([&] { dafedit::run_eval(config_json, out_dir); });
}

dafedit_status dafedit_export_attention(const char* journal_path, const char* out_csv) {
  if (journal_path == nullptr || out_csv == nullptr) {
    return fail(DAFEDIT_ERR_INVALID_ARG, "export-attn: null argument");
  }
  return guarded([&] { dafedit::export_attention(journal_path, out_csv); });
}

dafedit_status dafedit_model_open(const char* lm_ckpt_path, dafedit_model** out_model) {
  if (lm_ckpt_path == nullptr || out_model == nullptr) {
    return fail(DAFEDIT_ERR_INVALID_ARG, "model_open: null argument");
  }
  *out_model = nullptr;
  return guarded([&] {
    auto lm = dafedit::EditableLM::from_checkpoint(dafedit::Checkpoint::load(lm_ckpt_path));
    *out_model = new dafedit_model{std::move(lm)};
  });
}

void dafedit_model_close(dafedit_model* model) { delete model; }

static dafedit_status decode_into(const dafedit::EditableLM& lm, const char* prompt,
                                  int max_new_tokens, char* buf, size_t buf_len) {
  if (prompt == nullptr) return fail(DAFEDIT_ERR_INVALID_ARG, "decode: null prompt");
  std::string text;
  const dafedit_status st = guarded([&] {
    const std::vector<int> ids = lm.vocab().encode(prompt);
    text = lm.vocab().decode(lm.greedy_decode(ids, max_new_tokens));
  });
  if (st != DAFEDIT_OK) return st;
  return copy_out(text, buf, buf_len);
}

dafedit_status dafedit_model_decode(dafedit_model* model, const char* prompt, int max_new_tokens,
                                    char* buf, size_t buf_len) {
  if (model == nullptr) return fail(DAFEDIT_ERR_INVALID_ARG, "decode: null model");
  return decode_into(model->lm, prompt, max_new_tokens, buf, buf_len);
}

dafedit_status dafedit_session_open(const char* lm_ckpt_path, const char* dafnet_ckpt_path,
                                    dafedit_session** out_session) {
  if (lm_ckpt_path == nullptr || dafnet_ckpt_path == nullptr || out_session == nullptr) {
    return fail(DAFEDIT_ERR_INVALID_ARG, "session_open: null argument");
  }
  *out_session = nullptr;
  return guarded([&] {
    auto lm = dafedit::EditableLM::from_checkpoint(dafedit::Checkpoint::load(lm_ckpt_path));
    auto net = dafedit::Dafnet::from_checkpoint(dafedit::Checkpoint::load(dafnet_ckpt_path));
    *out_session = new dafedit_session{std::move(lm), dafedit::DafnetEditor(std::move(net))};
  });
}

void dafedit_session_close(dafedit_session* session) { delete session; }

dafedit_status dafedit_session_edit(dafedit_session* session, const char* prompt,
                                    const char* target) {
  if (session == nullptr || prompt == nullptr || target == nullptr) {
    return fail(DAFEDIT_ERR_INVALID_ARG, "session_edit: null argument");
  }
  return guarded([&] {
    const dafedit::TokenSeq seq = dafedit::make_token_seq(session->lm.vocab(), prompt, target);
    session->editor.edit(session->lm, seq,
                         "api_" + std::to_string(session->editor.edit_count() + 1));
  });
}

dafedit_status dafedit_session_edit_count(dafedit_session* session, int* out_count) {
  if (session == nullptr || out_count == nullptr) {
    return fail(DAFEDIT_ERR_INVALID_ARG, "session_edit_count: null argument");
  }
  *out_count = session->editor.edit_count();
  return DAFEDIT_OK;
}

dafedit_status dafedit_session_decode(dafedit_session* session, const char* prompt,
                                      int max_new_tokens, char* buf, size_t buf_len) {
  if (session == nullptr) return fail(DAFEDIT_ERR_INVALID_ARG, "decode: null session");
  return decode_into(session->lm, prompt, max_new_tokens, buf, buf_len);
}

}  // extern "C"
