#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dafedit/dafnet.hpp"
#include "dafedit/lm.hpp"
#include "dafedit/records.hpp"

namespace dafedit {

struct TrainConfig {
  int t_max = 50;
  double ema_alpha = 0.01;
  double l_ini = -1.0;  // < 0 resolves to ln(vocab_size) + 1 at runtime
  int i_inc = 100;
  double growth_gamma = 0.25;
  int i_max = 4000;
  int post_tmax_iters = 300;  // extra iterations once t_now reaches t_max
  int checkpoint_interval = 200;
  double lr = 1e-3;
  // Signals are hooked against the progressively edited model by default;
  // batch_capture hooks every signal against the unedited model instead.
  bool batch_capture = false;
  bool mean_per_token = true;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct CurriculumState {
  int t_now = 1;
  double l_ema = 0.0;
  double l_min = 0.0;
  int64_t i_min = 1;
  int64_t iteration = 0;

  nlohmann::ordered_json to_json() const;
  static CurriculumState from_json(const nlohmann::json& j);
};

// EMA tracking and sequence-length growth, exactly the curriculum recurrence:
// grow t_now by max(10, floor(gamma*t_now)) when the EMA loss has not
// improved for i_inc iterations, then reset the trackers to l_ini.
void curriculum_update(CurriculumState& state, double l_total, const TrainConfig& config,
                       double l_ini);

// ---- losses (graph-capable via the editable-weight override) ----

Tensor loss_reliability(const EditableLM& model, const std::vector<const EditRecord*>& batch,
                        const std::map<int, Tensor>* override_weights, bool mean_per_token);
Tensor loss_generality(const EditableLM& model, const std::vector<const EditRecord*>& batch,
                       const std::map<int, Tensor>* override_weights, bool mean_per_token);
// Position-averaged KL between the pre-edit and edited next-token
// distributions over each locality probe, summed over probes.
Tensor loss_locality(const EditableLM& model, const std::vector<const EditRecord*>& batch,
                     const std::map<int, Tensor>* override_weights);

struct IterationStats {
  int64_t iteration = 0;
  int t = 0;
  double l_rel = 0.0;
  double l_gen = 0.0;
  double l_loc = 0.0;
  double l_total = 0.0;
  double l_ema = 0.0;
  // EMA of l_total / T; unlike the raw EMA this is comparable across
  // curriculum stages and drives checkpoint selection.
  double l_ema_norm = 0.0;
  int t_now = 0;
};

struct TrainResult {
  CurriculumState curriculum;
  std::vector<IterationStats> log;
  std::string best_checkpoint_path;
  double best_l_ema = 0.0;
};

// Meta-trains the fusion network against a frozen language model.
class Trainer {
 public:
  Trainer(EditableLM& model, Dafnet& net, std::vector<EditRecord> records, TrainConfig config,
          uint64_t seed);

  // One optimizer step on a sequence of exactly `t` sampled edits. The base
  // LM is bit-identical before and after; only the fusion network moves.
  IterationStats train_iteration(int t);

  // Full curriculum loop. checkpoint_dir may be empty to skip persistence;
  // log_sink, when set, receives one JSON line per iteration.
  TrainResult train(const std::string& checkpoint_dir,
                    const std::function<void(const std::string&)>& log_sink = nullptr);

  // Resumable state: network, optimizer moments, curriculum, RNG stream.
  void save_state(const std::string& path) const;
  void load_state(const std::string& path);

  const CurriculumState& curriculum() const { return curriculum_; }
  CurriculumState& curriculum() { return curriculum_; }
  double l_ini() const { return l_ini_; }

 private:
  std::vector<const EditRecord*> sample_batch(int t);

  EditableLM& model_;
  Dafnet& net_;
  std::vector<EditRecord> records_;
  TrainConfig config_;
  Rng rng_;
  Adam opt_;
  CurriculumState curriculum_;
  double l_ini_ = 0.0;
  int64_t tmax_reached_at_ = -1;
};

}  // namespace dafedit
