#include "dafedit/lm.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace dafedit {

// ---- Vocab -------------------------------------------------------------------

Vocab::Vocab(std::vector<std::string> words) : words_(std::move(words)) {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    auto [it, inserted] = index_.emplace(words_[i], int(i));
    if (!inserted) throw std::runtime_error("vocab: duplicate word '" + words_[i] + "'");
  }
}

int Vocab::id(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) throw std::runtime_error("vocab: unknown word '" + word + "'");
  return it->second;
}

std::vector<int> Vocab::encode(const std::string& text) const {
  std::vector<int> ids;
  std::istringstream is(text);
  std::string word;
  while (is >> word) ids.push_back(id(word));
  return ids;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += word(ids[i]);
  }
  return out;
}

// ---- config ------------------------------------------------------------------

void LmConfig::validate() const {
  if (vocab_size <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 ||
      max_seq_len <= 0 || edit_layer_count <= 0) {
    throw std::runtime_error("lm config: all dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw std::runtime_error("lm config: d_model " + std::to_string(d_model) +
                             " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (edit_layer_count > n_layers) {
    throw std::runtime_error("lm config: edit_layer_count " + std::to_string(edit_layer_count) +
                             " exceeds n_layers " + std::to_string(n_layers));
  }
}

nlohmann::ordered_json LmConfig::to_json() const {
  return {{"vocab_size", vocab_size}, {"d_model", d_model},       {"n_layers", n_layers},
          {"n_heads", n_heads},       {"d_ff", d_ff},             {"max_seq_len", max_seq_len},
          {"edit_layer_count", edit_layer_count}};
}

LmConfig LmConfig::from_json(const nlohmann::json& j) {
  LmConfig c;
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.d_model = j.value("d_model", c.d_model);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.edit_layer_count = j.value("edit_layer_count", c.edit_layer_count);
  c.validate();
  return c;
}

// ---- TokenSeq ----------------------------------------------------------------

std::vector<int> TokenSeq::full() const {
  std::vector<int> ids = prompt;
  ids.insert(ids.end(), target.begin(), target.end());
  return ids;
}

TokenSeq make_token_seq(const Vocab& vocab, const std::string& prompt_text,
                        const std::string& target_text) {
  TokenSeq seq;
  seq.prompt = vocab.encode(prompt_text);
  seq.target = vocab.encode(target_text);
  seq.text = prompt_text + " " + target_text;
  if (seq.target.empty()) throw std::runtime_error("token seq: empty target in '" + target_text + "'");
  return seq;
}

// ---- EditableLM --------------------------------------------------------------

namespace {

Tensor init_weights(Rng& rng, int r, int c, double stddev) {
  Tensor t = Tensor::zeros(r, c);
  for (double& v : t.mutable_data()) v = rng.normal(0.0, stddev);
  return t;
}

Tensor causal_mask(int len) {
  Tensor m = Tensor::zeros(len, len);
  for (int i = 0; i < len; ++i)
    for (int j = i + 1; j < len; ++j) m.at(i, j) = -1e30;
  return m;
}

constexpr double kInitStd = 0.02;

}  // namespace

EditableLM::EditableLM(LmConfig config, Vocab vocab)
    : config_(std::move(config)), vocab_(std::move(vocab)) {
  config_.validate();
  if (vocab_.size() != config_.vocab_size) {
    throw std::runtime_error("lm: vocab size " + std::to_string(vocab_.size()) +
                             " does not match config " + std::to_string(config_.vocab_size));
  }
  layers_.resize(std::size_t(config_.n_layers));
  overlays_.resize(std::size_t(config_.edit_layer_count));
}

EditableLM::EditableLM(LmConfig config, Vocab vocab, Rng& rng)
    : EditableLM(std::move(config), std::move(vocab)) {
  const int d = config_.d_model, ff = config_.d_ff, v = config_.vocab_size;
  embed_ = init_weights(rng, v, d, kInitStd);
  pos_ = init_weights(rng, config_.max_seq_len, d, kInitStd);
  for (Layer& l : layers_) {
    l.wq = init_weights(rng, d, d, kInitStd);
    l.wk = init_weights(rng, d, d, kInitStd);
    l.wv = init_weights(rng, d, d, kInitStd);
    l.wo = init_weights(rng, d, d, kInitStd);
    l.rms1 = Tensor::full(1, d, 1.0);
    l.rms2 = Tensor::full(1, d, 1.0);
    l.ffn_w_in = init_weights(rng, d, ff, kInitStd);
    l.ffn_b_in = Tensor::zeros(1, ff);
    l.ffn_w_out = init_weights(rng, ff, d, kInitStd);
    l.ffn_b_out = Tensor::zeros(1, d);
  }
  final_rms_ = Tensor::full(1, d, 1.0);
  head_w_ = init_weights(rng, d, v, kInitStd);
  head_b_ = Tensor::zeros(1, v);
}

std::vector<EditableMatrixInfo> EditableLM::editable_matrices() const {
  std::vector<EditableMatrixInfo> out;
  const int first = config_.n_layers - config_.edit_layer_count;
  for (int layer = first; layer < config_.n_layers; ++layer) {
    out.push_back({layer, config_.d_ff, config_.d_model});
  }
  return out;
}

int EditableLM::editable_id_for_layer(int layer) const {
  const int first = config_.n_layers - config_.edit_layer_count;
  if (layer < first) return -1;
  return layer - first;
}

Tensor EditableLM::forward_logits(const std::vector<int>& ids,
                                  const std::map<int, Tensor>* editable_override,
                                  ForwardTrace* trace) const {
  const int len = int(ids.size());
  if (len == 0) throw std::runtime_error("lm forward: empty token sequence");
  if (len > config_.max_seq_len) {
    throw std::runtime_error("lm forward: sequence length " + std::to_string(len) +
                             " exceeds max_seq_len " + std::to_string(config_.max_seq_len));
  }
  for (int id : ids) {
    if (id < 0 || id >= config_.vocab_size) {
      throw std::runtime_error("lm forward: token id " + std::to_string(id) + " out of range");
    }
  }

  const int d = config_.d_model, heads = config_.n_heads, dh = d / heads;
  const double attn_scale = 1.0 / std::sqrt(double(dh));
  const Tensor mask = causal_mask(len);

  Tensor x = add(gather_rows(embed_, ids), slice_rows(pos_, 0, len));
  for (int li = 0; li < config_.n_layers; ++li) {
    const Layer& l = layers_[std::size_t(li)];

    Tensor h = rmsnorm_rows(x, l.rms1);
    Tensor q = matmul(h, l.wq);
    Tensor k = matmul(h, l.wk);
    Tensor v = matmul(h, l.wv);
    std::vector<Tensor> head_ctx;
    head_ctx.reserve(std::size_t(heads));
    for (int hd = 0; hd < heads; ++hd) {
      Tensor qh = slice_cols(q, hd * dh, (hd + 1) * dh);
      Tensor kh = slice_cols(k, hd * dh, (hd + 1) * dh);
      Tensor vh = slice_cols(v, hd * dh, (hd + 1) * dh);
      Tensor probs = softmax_rows(add(scale(matmul(qh, transpose(kh)), attn_scale), mask));
      head_ctx.push_back(matmul(probs, vh));
    }
    x = add(x, matmul(concat_cols(head_ctx), l.wo));

    Tensor h2 = rmsnorm_rows(x, l.rms2);
    Tensor u_act = relu(add_row(matmul(h2, l.ffn_w_in), l.ffn_b_in));

    const int edit_id = editable_id_for_layer(li);
    Tensor w_out = l.ffn_w_out;
    if (edit_id >= 0) {
      if (editable_override != nullptr) {
        auto it = editable_override->find(edit_id);
        if (it != editable_override->end()) w_out = it->second;
      }
      if (w_out.node() == l.ffn_w_out.node() && overlays_[std::size_t(edit_id)].has_value()) {
        w_out = add(l.ffn_w_out, *overlays_[std::size_t(edit_id)]);
      }
    }

    Tensor z = matmul(u_act, w_out);
    if (trace != nullptr && edit_id >= 0) {
      z.set_retain_grad();
      trace->ffn_input.emplace(edit_id, u_act);
      trace->ffn_preact.emplace(edit_id, z);
    }
    x = add(x, add_row(z, l.ffn_b_out));
  }

  return add_row(matmul(rmsnorm_rows(x, final_rms_), head_w_), head_b_);
}

double EditableLM::log_likelihood(const TokenSeq& seq) const {
  if (seq.target.empty()) throw std::runtime_error("log_likelihood: empty target");
  return -nll_loss(seq, /*mean_per_token=*/false).value();
}

Tensor EditableLM::nll_loss(const TokenSeq& seq, bool mean_per_token,
                            const std::map<int, Tensor>* editable_override) const {
  if (seq.target.empty()) throw std::runtime_error("nll_loss: empty target");
  if (seq.prompt.empty()) throw std::runtime_error("nll_loss: empty prompt");
  const std::vector<int> ids = seq.full();
  Tensor logp = log_softmax_rows(forward_logits(ids, editable_override));
  // Row j predicts token j+1; target tokens sit at positions |prompt|..L-1.
  std::vector<std::pair<int, int>> coords;
  coords.reserve(seq.target.size());
  const int p = int(seq.prompt.size());
  for (std::size_t i = 0; i < seq.target.size(); ++i) {
    coords.emplace_back(p - 1 + int(i), seq.target[i]);
  }
  Tensor nll = neg(select_sum(logp, coords));
  if (mean_per_token) nll = scale(nll, 1.0 / double(seq.target.size()));
  return nll;
}

Tensor EditableLM::log_probs(const std::vector<int>& ids,
                             const std::map<int, Tensor>* editable_override) const {
  return log_softmax_rows(forward_logits(ids, editable_override));
}

std::vector<int> EditableLM::greedy_decode(const std::vector<int>& prompt, int max_new) const {
  if (prompt.empty()) throw std::runtime_error("greedy_decode: empty prompt");
  std::vector<int> ids = prompt;
  std::vector<int> out;
  for (int step = 0; step < max_new && int(ids.size()) < config_.max_seq_len; ++step) {
    Tensor logits = forward_logits(ids);
    const int last = logits.rows() - 1;
    int best = 0;
    for (int j = 1; j < logits.cols(); ++j) {
      if (logits.at(last, j) > logits.at(last, best)) best = j;  // ties keep lowest id
    }
    out.push_back(best);
    ids.push_back(best);
  }
  return out;
}

std::vector<int> EditableLM::teacher_forced_argmax(const std::vector<int>& ids) const {
  Tensor logits = forward_logits(ids);
  std::vector<int> out(std::size_t(logits.rows()));
  for (int i = 0; i < logits.rows(); ++i) {
    int best = 0;
    for (int j = 1; j < logits.cols(); ++j) {
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    }
    out[std::size_t(i)] = best;
  }
  return out;
}

void EditableLM::set_overlay(int matrix_id, const Tensor& delta) {
  const auto mats = editable_matrices();
  const auto& info = mats.at(std::size_t(matrix_id));
  if (delta.rows() != info.d_in || delta.cols() != info.d_out) {
    throw ShapeError("set_overlay: delta [" + std::to_string(delta.rows()) + "," +
                     std::to_string(delta.cols()) + "] vs editable [" + std::to_string(info.d_in) +
                     "," + std::to_string(info.d_out) + "]");
  }
  overlays_[std::size_t(matrix_id)] = delta.detach();
}

void EditableLM::add_overlay(int matrix_id, const Tensor& delta) {
  if (!overlays_[std::size_t(matrix_id)].has_value()) {
    set_overlay(matrix_id, delta);
    return;
  }
  set_overlay(matrix_id, add(*overlays_[std::size_t(matrix_id)], delta));
}

void EditableLM::clear_overlays() {
  for (auto& o : overlays_) o.reset();
}

Tensor EditableLM::overlay(int matrix_id) const {
  const auto& slot = overlays_.at(std::size_t(matrix_id));
  if (slot.has_value()) return slot->detach();
  const auto info = editable_matrices().at(std::size_t(matrix_id));
  return Tensor::zeros(info.d_in, info.d_out);
}

bool EditableLM::has_overlay(int matrix_id) const {
  return overlays_.at(std::size_t(matrix_id)).has_value();
}

const Tensor& EditableLM::base_weight(int matrix_id) const {
  const auto info = editable_matrices().at(std::size_t(matrix_id));
  return layers_[std::size_t(info.layer)].ffn_w_out;
}

std::vector<std::pair<std::string, Tensor>> EditableLM::parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("embed", embed_);
  out.emplace_back("pos", pos_);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string p = "layer." + std::to_string(i) + ".";
    const Layer& l = layers_[i];
    out.emplace_back(p + "attn.wq", l.wq);
    out.emplace_back(p + "attn.wk", l.wk);
    out.emplace_back(p + "attn.wv", l.wv);
    out.emplace_back(p + "attn.wo", l.wo);
    out.emplace_back(p + "rms1", l.rms1);
    out.emplace_back(p + "rms2", l.rms2);
    out.emplace_back(p + "ffn.w_in", l.ffn_w_in);
    out.emplace_back(p + "ffn.b_in", l.ffn_b_in);
    out.emplace_back(p + "ffn.w_out", l.ffn_w_out);
    out.emplace_back(p + "ffn.b_out", l.ffn_b_out);
  }
  out.emplace_back("final.rms", final_rms_);
  out.emplace_back("head.w", head_w_);
  out.emplace_back("head.b", head_b_);
  return out;
}

void EditableLM::set_trainable(bool on) {
  for (auto& [name, t] : parameters()) t.set_requires_grad(on);
}

Checkpoint EditableLM::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.meta["kind"] = "lm";
  ckpt.meta["format_version"] = int(Checkpoint::kFormatVersion);
  ckpt.meta["config"] = config_.to_json();
  ckpt.meta["vocab"] = vocab_.words();
  for (const auto& [name, t] : parameters()) ckpt.add(name, t);
  return ckpt;
}

EditableLM EditableLM::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.meta.value("kind", "") != "lm") {
    throw std::runtime_error("lm checkpoint: wrong kind '" + ckpt.meta.value("kind", "") + "'");
  }
  LmConfig config = LmConfig::from_json(ckpt.meta.at("config"));
  Vocab vocab(ckpt.meta.at("vocab").get<std::vector<std::string>>());
  EditableLM lm(std::move(config), std::move(vocab));
  lm.embed_ = ckpt.get("embed").clone();
  lm.pos_ = ckpt.get("pos").clone();
  for (std::size_t i = 0; i < lm.layers_.size(); ++i) {
    const std::string p = "layer." + std::to_string(i) + ".";
    Layer& l = lm.layers_[i];
    l.wq = ckpt.get(p + "attn.wq").clone();
    l.wk = ckpt.get(p + "attn.wk").clone();
    l.wv = ckpt.get(p + "attn.wv").clone();
    l.wo = ckpt.get(p + "attn.wo").clone();
    l.rms1 = ckpt.get(p + "rms1").clone();
    l.rms2 = ckpt.get(p + "rms2").clone();
    l.ffn_w_in = ckpt.get(p + "ffn.w_in").clone();
    l.ffn_b_in = ckpt.get(p + "ffn.b_in").clone();
    l.ffn_w_out = ckpt.get(p + "ffn.w_out").clone();
    l.ffn_b_out = ckpt.get(p + "ffn.b_out").clone();
  }
  lm.final_rms_ = ckpt.get("final.rms").clone();
  lm.head_w_ = ckpt.get("head.w").clone();
  lm.head_b_ = ckpt.get("head.b").clone();
  return lm;
}

}  // namespace dafedit
