#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dafedit/rng.hpp"
#include "dafedit/serialize.hpp"
#include "dafedit/tensor.hpp"

namespace dafedit {

// Whitespace word-level tokenizer over a closed vocabulary. Token ids are
// indices into the word list; unknown words are an error.
class Vocab {
 public:
  Vocab() = default;
  explicit Vocab(std::vector<std::string> words);

  int id(const std::string& word) const;
  const std::string& word(int id) const { return words_.at(std::size_t(id)); }
  int size() const { return int(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

struct LmConfig {
  int vocab_size = 128;
  int d_model = 48;
  int n_layers = 3;
  int n_heads = 4;
  int d_ff = 96;
  int max_seq_len = 32;
  int edit_layer_count = 3;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static LmConfig from_json(const nlohmann::json& j);
};

// One edit example: prompt tokens, nonempty target tokens, and the rendered
// text they came from.
struct TokenSeq {
  std::vector<int> prompt;
  std::vector<int> target;
  std::string text;

  std::vector<int> full() const;
  int length() const { return int(prompt.size() + target.size()); }
};

TokenSeq make_token_seq(const Vocab& vocab, const std::string& prompt_text,
                        const std::string& target_text);

struct EditableMatrixInfo {
  int layer = 0;  // transformer block index
  int d_in = 0;   // FFN hidden width
  int d_out = 0;  // model width
};

// Captures the FFN down-projection input rows and pre-bias output node of
// each editable matrix during a forward pass.
struct ForwardTrace {
  std::map<int, Tensor> ffn_input;
  std::map<int, Tensor> ffn_preact;
};

// Decoder-only autoregressive transformer with a strict causal mask. The FFN
// down-projection matrices of the deepest `edit_layer_count` blocks are the
// designated editable weights; edits live in an additive overlay so the base
// weights are never touched.
class EditableLM {
 public:
  EditableLM(LmConfig config, Vocab vocab, Rng& init_rng);

  const LmConfig& config() const { return config_; }
  const Vocab& vocab() const { return vocab_; }

  // Ordered deepest-layers list; index in the returned vector is the
  // editable-matrix id used everywhere else.
  std::vector<EditableMatrixInfo> editable_matrices() const;

  // Logits [len(ids), vocab]. `editable_override`, when given, replaces the
  // full effective weight of the listed editable matrices (graph tensors
  // allowed); otherwise base + overlay is used.
  Tensor forward_logits(const std::vector<int>& ids,
                        const std::map<int, Tensor>* editable_override = nullptr,
                        ForwardTrace* trace = nullptr) const;

  // Sum over target positions of log p(token | prefix); always <= 0.
  double log_likelihood(const TokenSeq& seq) const;

  // Teacher-forced NLL as a graph tensor. mean_per_token averages over the
  // target positions of this sequence.
  Tensor nll_loss(const TokenSeq& seq, bool mean_per_token,
                  const std::map<int, Tensor>* editable_override = nullptr) const;

  // Row-wise log-softmax of the logits over `ids`; numeric (no graph) unless
  // an override carries grad.
  Tensor log_probs(const std::vector<int>& ids,
                   const std::map<int, Tensor>* editable_override = nullptr) const;

  // Greedy argmax continuation; ties resolve to the lowest token id.
  std::vector<int> greedy_decode(const std::vector<int>& prompt, int max_new) const;

  // Argmax next-token id at every position of `ids`.
  std::vector<int> teacher_forced_argmax(const std::vector<int>& ids) const;

  // ---- delta overlay (Gamma) ----
  void set_overlay(int matrix_id, const Tensor& delta);
  void add_overlay(int matrix_id, const Tensor& delta);
  void clear_overlays();
  Tensor overlay(int matrix_id) const;  // zeros when unset
  bool has_overlay(int matrix_id) const;
  // Base weight of an editable matrix (no overlay applied).
  const Tensor& base_weight(int matrix_id) const;

  std::vector<std::pair<std::string, Tensor>> parameters() const;
  void set_trainable(bool on);

  Checkpoint to_checkpoint() const;
  static EditableLM from_checkpoint(const Checkpoint& ckpt);

 private:
  struct Layer {
    Tensor wq, wk, wv, wo;
    Tensor rms1, rms2;
    Tensor ffn_w_in, ffn_b_in, ffn_w_out, ffn_b_out;
  };

  EditableLM(LmConfig config, Vocab vocab);  // uninitialized weights
  int editable_id_for_layer(int layer) const;

  LmConfig config_;
  Vocab vocab_;
  Tensor embed_, pos_;
  std::vector<Layer> layers_;
  Tensor final_rms_, head_w_, head_b_;
  std::vector<std::optional<Tensor>> overlays_;  // per editable id
};

}  // namespace dafedit
