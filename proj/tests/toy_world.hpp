// Shared fixtures: a small vocabulary, a toy model, and hand-built edit
// records for the editor/evaluator/trainer suites.
#pragma once

#include <string>
#include <vector>

#include "dafedit/dafnet.hpp"
#include "dafedit/lm.hpp"
#include "dafedit/records.hpp"

namespace toyworld {

using namespace dafedit;

inline Vocab small_vocab() {
  std::vector<std::string> words = {"the",  "capital", "of",    "is",   "city", "leader",
                                    "ruled", "by",      "speaks", "alpha", "beta", "gamma",
                                    "delta", "omega",   "kappa",  "sigma", "tau",  "zeta",
                                    "iota",  "nu"};
  return Vocab(std::move(words));
}

inline EditableLM small_model(uint64_t seed, const Vocab& vocab, int n_layers = 3,
                              int edit_layers = 3) {
  LmConfig cfg;
  cfg.vocab_size = vocab.size();
  cfg.d_model = 16;
  cfg.n_layers = n_layers;
  cfg.n_heads = 2;
  cfg.d_ff = 24;
  cfg.max_seq_len = 16;
  cfg.edit_layer_count = edit_layers;
  Rng rng(seed);
  return EditableLM(cfg, vocab, rng);
}

inline DafnetConfig small_net_config() {
  DafnetConfig cfg;
  cfg.k_layers = 2;
  cfg.d_down = 8;
  cfg.d_attn = 8;
  cfg.n_heads = 2;
  cfg.init_std = 0.05;
  return cfg;
}

inline Dafnet small_net(uint64_t seed, const EditableLM& model) {
  std::vector<MatrixShape> shapes;
  for (const auto& m : model.editable_matrices()) shapes.push_back({m.d_in, m.d_out});
  Rng rng(seed);
  return Dafnet(small_net_config(), shapes, rng);
}

// n records of the form "the capital of <head> is -> <target>", one rephrase
// and one locality probe each.
inline std::vector<EditRecord> small_records(const Vocab& vocab, int n) {
  const std::vector<std::string> heads = {"alpha", "beta", "gamma", "delta", "omega",
                                          "kappa", "sigma", "tau",   "zeta",  "iota"};
  std::vector<EditRecord> out;
  for (int i = 0; i < n; ++i) {
    const std::string& head = heads[std::size_t(i) % heads.size()];
    const std::string& target = heads[std::size_t(i + 3) % heads.size()];
    const std::string& probe_head = heads[std::size_t(i + 1) % heads.size()];
    EditRecord r;
    r.id = "rec_" + std::to_string(i);
    r.property = "eval";
    r.edit = make_token_seq(vocab, "the capital of " + head + " is", target);
    r.generality.push_back(make_token_seq(vocab, head + " city is", target));
    r.locality.push_back(vocab.encode("the leader of " + probe_head + " is nu"));
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace toyworld
