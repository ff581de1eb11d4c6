#pragma once

#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dafedit/datagen.hpp"
#include "dafedit/lm.hpp"
#include "dafedit/trainer.hpp"

namespace dafedit {

// One JSON config drives the whole pipeline; each command reads its section.
// Artifacts live under a single output directory:
//   lm.ckpt, dataset.jsonl, stats.csv, dafnet.ckpt, dafnet_iter*.ckpt,
//   train_log.jsonl, pretrain_log.jsonl, metrics.csv, metrics.json,
//   journal.jsonl, attn.csv

struct PretrainConfig {
  double lr = 2e-3;
  int batch = 24;
  int max_iters = 6000;
  double target_acc = 0.97;
  int check_every = 250;

  static PretrainConfig from_json(const nlohmann::json& j);
  nlohmann::ordered_json to_json() const;
};

struct PretrainStats {
  int64_t iterations = 0;
  double final_loss = 0.0;
  double final_acc = 0.0;
};

// Ordinary language-model training on the weighted corpus until the known
// facts are memorized (frequency-weighted exact-match accuracy reaches
// target_acc) or the iteration cap hits.
PretrainStats pretrain_lm(EditableLM& model, const std::vector<WeightedSentence>& corpus,
                          const PretrainConfig& config, Rng& rng,
                          const std::function<void(const std::string&)>& log_sink = nullptr);

// Command entry points. `config_json` is the merged configuration text (file
// plus CLI overrides); every command is deterministic in (config, seed) and
// removes its partial outputs on failure. Each returns the files written.
std::vector<std::string> run_pretrain(const std::string& config_json, const std::string& out_dir);
std::vector<std::string> run_datagen(const std::string& config_json, const std::string& out_dir);
std::vector<std::string> run_train(const std::string& config_json, const std::string& out_dir);
std::vector<std::string> run_eval(const std::string& config_json, const std::string& out_dir);
std::vector<std::string> export_attention(const std::string& journal_path,
                                          const std::string& out_csv);

}  // namespace dafedit
