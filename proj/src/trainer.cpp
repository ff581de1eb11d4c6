#include "dafedit/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <limits>
#include <stdexcept>

#include "dafedit/signal.hpp"

namespace dafedit {

// ---- config / state ------------------------------------------------------------

void TrainConfig::validate() const {
  if (t_max < 1) throw std::runtime_error("train config: t_max must be >= 1");
  if (ema_alpha <= 0.0 || ema_alpha > 1.0) {
    throw std::runtime_error("train config: ema_alpha must lie in (0,1]");
  }
  if (growth_gamma <= 0.0) throw std::runtime_error("train config: growth_gamma must be > 0");
  if (i_inc < 1 || i_max < 1) throw std::runtime_error("train config: iteration counts must be >= 1");
  if (lr < 0.0) throw std::runtime_error("train config: negative learning rate");
}

nlohmann::ordered_json TrainConfig::to_json() const {
  return {{"t_max", t_max},
          {"ema_alpha", ema_alpha},
          {"l_ini", l_ini},
          {"i_inc", i_inc},
          {"growth_gamma", growth_gamma},
          {"i_max", i_max},
          {"post_tmax_iters", post_tmax_iters},
          {"checkpoint_interval", checkpoint_interval},
          {"lr", lr},
          {"batch_capture", batch_capture},
          {"mean_per_token", mean_per_token}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.t_max = j.value("t_max", c.t_max);
  c.ema_alpha = j.value("ema_alpha", c.ema_alpha);
  c.l_ini = j.value("l_ini", c.l_ini);
  c.i_inc = j.value("i_inc", c.i_inc);
  c.growth_gamma = j.value("growth_gamma", c.growth_gamma);
  c.i_max = j.value("i_max", c.i_max);
  c.post_tmax_iters = j.value("post_tmax_iters", c.post_tmax_iters);
  c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
  c.lr = j.value("lr", c.lr);
  c.batch_capture = j.value("batch_capture", c.batch_capture);
  c.mean_per_token = j.value("mean_per_token", c.mean_per_token);
  c.validate();
  return c;
}

nlohmann::ordered_json CurriculumState::to_json() const {
  return {{"t_now", t_now},
          {"l_ema", l_ema},
          {"l_min", l_min},
          {"i_min", i_min},
          {"iteration", iteration}};
}

CurriculumState CurriculumState::from_json(const nlohmann::json& j) {
  CurriculumState s;
  s.t_now = j.at("t_now").get<int>();
  s.l_ema = j.at("l_ema").get<double>();
  s.l_min = j.at("l_min").get<double>();
  s.i_min = j.at("i_min").get<int64_t>();
  s.iteration = j.at("iteration").get<int64_t>();
  return s;
}

void curriculum_update(CurriculumState& state, double l_total, const TrainConfig& config,
                       double l_ini) {
  state.l_ema = (1.0 - config.ema_alpha) * state.l_ema + config.ema_alpha * l_total;
  if (state.l_ema < state.l_min) {
    state.l_min = state.l_ema;
    state.i_min = state.iteration;
  }
  if (state.iteration - state.i_min > config.i_inc && state.t_now < config.t_max) {
    state.t_now += std::max(10, int(std::floor(config.growth_gamma * double(state.t_now))));
    state.t_now = std::min(state.t_now, config.t_max);
    state.l_min = state.l_ema = l_ini;
    state.i_min = state.iteration;
  }
}

// ---- losses ---------------------------------------------------------------------

Tensor loss_reliability(const EditableLM& model, const std::vector<const EditRecord*>& batch,
                        const std::map<int, Tensor>* override_weights, bool mean_per_token) {
  Tensor total = Tensor::scalar(0.0);
  for (const EditRecord* r : batch) {
    total = add(total, model.nll_loss(r->edit, mean_per_token, override_weights));
  }
  return total;
}

Tensor loss_generality(const EditableLM& model, const std::vector<const EditRecord*>& batch,
                       const std::map<int, Tensor>* override_weights, bool mean_per_token) {
  Tensor total = Tensor::scalar(0.0);
  for (const EditRecord* r : batch) {
    for (const TokenSeq& g : r->generality) {
      total = add(total, model.nll_loss(g, mean_per_token, override_weights));
    }
  }
  return total;
}

Tensor loss_locality(const EditableLM& model, const std::vector<const EditRecord*>& batch,
                     const std::map<int, Tensor>* override_weights) {
  Tensor total = Tensor::scalar(0.0);
  for (const EditRecord* r : batch) {
    for (const std::vector<int>& ids : r->locality) {
      // Reference distribution of the pre-edit model: a constant.
      Tensor base_logp = model.log_probs(ids).detach();
      Tensor p = Tensor::zeros(base_logp.rows(), base_logp.cols());
      for (std::size_t i = 0; i < p.numel(); ++i) {
        p.mutable_data()[i] = std::exp(base_logp.data()[i]);
      }
      Tensor edited_logp = model.log_probs(ids, override_weights);
      Tensor kl = sum_all(mul(p, sub(base_logp, edited_logp)));
      total = add(total, scale(kl, 1.0 / double(base_logp.rows())));
    }
  }
  return total;
}

// ---- trainer ---------------------------------------------------------------------

namespace {

std::vector<Tensor> tensors_only(const std::vector<std::pair<std::string, Tensor>>& named) {
  std::vector<Tensor> out;
  out.reserve(named.size());
  for (const auto& [name, t] : named) out.push_back(t);
  return out;
}

}  // namespace

Trainer::Trainer(EditableLM& model, Dafnet& net, std::vector<EditRecord> records,
                 TrainConfig config, uint64_t seed)
    : model_(model),
      net_(net),
      records_(std::move(records)),
      config_(config),
      rng_(seed ^ 0x7a11e4a1ULL),
      opt_(tensors_only(net.parameters()), AdamConfig{config.lr, 0.9, 0.999, 1e-8}) {
  config_.validate();
  if (records_.empty()) throw std::runtime_error("trainer: empty training set");
  for (const EditRecord& r : records_) {
    if (r.generality.empty() || r.locality.empty()) {
      throw std::runtime_error("trainer: record " + r.id +
                               " is missing generality or locality samples");
    }
  }
  if (int(model_.editable_matrices().size()) != net_.matrix_count()) {
    throw std::runtime_error("trainer: model and network disagree on editable matrices");
  }
  l_ini_ = config_.l_ini >= 0.0 ? config_.l_ini
                                : std::log(double(model_.config().vocab_size)) + 1.0;
  curriculum_.l_ema = curriculum_.l_min = l_ini_;
}

std::vector<const EditRecord*> Trainer::sample_batch(int t) {
  if (t > int(records_.size())) {
    throw std::runtime_error("trainer: batch size " + std::to_string(t) +
                             " exceeds training set size " + std::to_string(records_.size()));
  }
  std::vector<int> idx = rng_.sample_without_replacement(int(records_.size()), t);
  std::vector<const EditRecord*> batch;
  batch.reserve(std::size_t(t));
  for (int i : idx) batch.push_back(&records_[std::size_t(i)]);
  return batch;
}

IterationStats Trainer::train_iteration(int t) {
  if (t > curriculum_.t_now) {
    throw std::runtime_error("trainer: requested T " + std::to_string(t) + " exceeds t_now " +
                             std::to_string(curriculum_.t_now));
  }
  const std::vector<const EditRecord*> batch = sample_batch(t);
  const int n_matrices = net_.matrix_count();

  // Collect per-fact signals. The progressive convention hooks each sample
  // against the model carrying the accumulated deltas of the previous ones,
  // mirroring the serving loop; batch_capture hooks everything against the
  // unedited model. Captured signals are constants either way.
  std::vector<std::vector<EditSignal>> signals(static_cast<std::size_t>(n_matrices));
  model_.clear_overlays();
  if (config_.batch_capture) {
    for (int i = 0; i < t; ++i) {
      SignalMap m = capture_signal(model_, batch[std::size_t(i)]->edit);
      for (int id = 0; id < n_matrices; ++id) signals[std::size_t(id)].push_back(m.at(id));
    }
  } else {
    std::vector<std::vector<FactCache>> history(static_cast<std::size_t>(n_matrices));
    std::vector<Tensor> accum(static_cast<std::size_t>(n_matrices));
    for (int i = 0; i < t; ++i) {
      SignalMap m = capture_signal(model_, batch[std::size_t(i)]->edit);
      for (int id = 0; id < n_matrices; ++id) {
        Dafnet::EditStep step = net_.edit_step(id, m.at(id), history[std::size_t(id)]);
        if (!accum[std::size_t(id)].defined()) {
          accum[std::size_t(id)] = Tensor::zeros(step.delta.rows(), step.delta.cols());
        }
        accum[std::size_t(id)] =
            accumulate_recursive(accum[std::size_t(id)], step.delta, step.beta_bar.back());
        history[std::size_t(id)].push_back(std::move(step.cache));
        model_.set_overlay(id, accum[std::size_t(id)]);
        signals[std::size_t(id)].push_back(m.at(id));
      }
    }
    model_.clear_overlays();
  }

  // Joint differentiable forward reproduces the same accumulated deltas as a
  // graph over the network parameters.
  std::map<int, Tensor> override_weights;
  for (int id = 0; id < n_matrices; ++id) {
    Dafnet::SequenceForward fwd = net_.forward_sequence(id, signals[std::size_t(id)]);
    override_weights.emplace(id, add(model_.base_weight(id).detach(), fwd.accumulated));
  }

  Tensor l_rel = loss_reliability(model_, batch, &override_weights, config_.mean_per_token);
  Tensor l_gen = loss_generality(model_, batch, &override_weights, config_.mean_per_token);
  Tensor l_loc = loss_locality(model_, batch, &override_weights);
  Tensor l_total = add(add(l_rel, l_gen), l_loc);

  opt_.zero_grad();
  backward(l_total);
  opt_.step();

  IterationStats stats;
  stats.t = t;
  stats.l_rel = l_rel.value();
  stats.l_gen = l_gen.value();
  stats.l_loc = l_loc.value();
  stats.l_total = l_total.value();
  return stats;
}

TrainResult Trainer::train(const std::string& checkpoint_dir,
                           const std::function<void(const std::string&)>& log_sink) {
  TrainResult result;
  result.best_l_ema = std::numeric_limits<double>::infinity();

  while (curriculum_.iteration < config_.i_max) {
    curriculum_.iteration += 1;
    const int t = int(rng_.uniform_int(1, curriculum_.t_now));
    IterationStats stats = train_iteration(t);
    curriculum_update(curriculum_, stats.l_total, config_, l_ini_);

    stats.iteration = curriculum_.iteration;
    stats.l_ema = curriculum_.l_ema;
    stats.t_now = curriculum_.t_now;
    result.log.push_back(stats);
    if (log_sink) {
      nlohmann::ordered_json line = {
          {"iteration", stats.iteration}, {"T", stats.t},         {"l_rel", stats.l_rel},
          {"l_gen", stats.l_gen},         {"l_loc", stats.l_loc}, {"l_total", stats.l_total},
          {"l_ema", stats.l_ema},         {"t_now", stats.t_now}};
      log_sink(line.dump());
    }

    if (!checkpoint_dir.empty() && curriculum_.iteration % config_.checkpoint_interval == 0) {
      const std::string path = checkpoint_dir + "/dafnet_iter" +
                               std::to_string(curriculum_.iteration) + ".ckpt";
      save_state(path);
      if (curriculum_.l_ema < result.best_l_ema) {
        result.best_l_ema = curriculum_.l_ema;
        result.best_checkpoint_path = path;
      }
    }

    if (curriculum_.t_now >= config_.t_max && tmax_reached_at_ < 0) {
      tmax_reached_at_ = curriculum_.iteration;
    }
    if (tmax_reached_at_ >= 0 &&
        curriculum_.iteration - tmax_reached_at_ >= config_.post_tmax_iters) {
      break;
    }
  }

  // Make sure the final state is always a checkpoint candidate.
  if (!checkpoint_dir.empty()) {
    const std::string path =
        checkpoint_dir + "/dafnet_iter" + std::to_string(curriculum_.iteration) + ".ckpt";
    save_state(path);
    if (curriculum_.l_ema < result.best_l_ema || result.best_checkpoint_path.empty()) {
      result.best_l_ema = curriculum_.l_ema;
      result.best_checkpoint_path = path;
    }
  }
  result.curriculum = curriculum_;
  return result;
}

void Trainer::save_state(const std::string& path) const {
  Checkpoint ckpt = net_.to_checkpoint();
  ckpt.meta["kind"] = "dafnet";  // loadable as a plain network checkpoint
  ckpt.meta["train_config"] = config_.to_json();
  ckpt.meta["curriculum"] = curriculum_.to_json();
  ckpt.meta["rng_state"] = rng_.state_string();
  ckpt.meta["l_ini"] = l_ini_;
  ckpt.meta["tmax_reached_at"] = tmax_reached_at_;
  for (const auto& [name, values] : opt_.state_arrays()) {
    ckpt.add("adam." + name, Tensor::from_data(1, int(values.size()), values));
  }
  ckpt.save(path);
}

void Trainer::load_state(const std::string& path) {
  Checkpoint ckpt = Checkpoint::load(path);
  if (ckpt.meta.value("kind", "") != "dafnet" || !ckpt.meta.contains("curriculum")) {
    throw std::runtime_error("trainer: " + path + " is not a training checkpoint");
  }
  for (auto& [name, t] : net_.parameters()) {
    const Tensor& src = ckpt.get(name);
    if (src.rows() != t.rows() || src.cols() != t.cols()) {
      throw std::runtime_error("trainer: checkpoint array " + name + " has wrong shape");
    }
    t.mutable_data() = src.data();
  }
  std::vector<std::pair<std::string, std::vector<double>>> adam_state;
  for (const auto& [name, t] : ckpt.arrays) {
    if (name.rfind("adam.", 0) == 0) adam_state.emplace_back(name.substr(5), t.data());
  }
  opt_.load_state_arrays(adam_state);
  curriculum_ = CurriculumState::from_json(ckpt.meta.at("curriculum"));
  rng_.set_state(ckpt.meta.at("rng_state").get<std::string>());
  l_ini_ = ckpt.meta.at("l_ini").get<double>();
  tmax_reached_at_ = ckpt.meta.at("tmax_reached_at").get<int64_t>();
}

}  // namespace dafedit
