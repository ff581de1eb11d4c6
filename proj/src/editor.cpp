#include "dafedit/editor.hpp"

#include <stdexcept>

namespace dafedit {

void apply_overlay(EditableLM& model, int matrix_id, const Tensor& delta) {
  model.add_overlay(matrix_id, delta);
}

// ---- DafnetEditor -------------------------------------------------------------

DafnetEditor::DafnetEditor(Dafnet net) : net_(std::move(net)) {
  state_.resize(std::size_t(net_.matrix_count()));
}

EditJournalEntry DafnetEditor::edit(EditableLM& model, const TokenSeq& sample,
                                    const std::string& sample_id) {
  if (int(model.editable_matrices().size()) != net_.matrix_count()) {
    throw std::runtime_error("dafnet editor: model has " +
                             std::to_string(model.editable_matrices().size()) +
                             " editable matrices, network expects " +
                             std::to_string(net_.matrix_count()));
  }

  // Signals come from the current edited model f_{t-1}.
  SignalMap signals = capture_signal(model, sample);

  EditJournalEntry entry;
  entry.edit_index = edit_count_ + 1;
  entry.sample_id = sample_id;

  for (int id = 0; id < net_.matrix_count(); ++id) {
    PerMatrix& pm = state_[std::size_t(id)];
    Dafnet::EditStep step = net_.edit_step(id, signals.at(id), pm.history);
    const double beta_t = step.beta_bar.back();
    if (!pm.accum.defined()) pm.accum = Tensor::zeros(step.delta.rows(), step.delta.cols());
    pm.accum = accumulate_recursive(pm.accum, step.delta, beta_t);
    pm.history.push_back(std::move(step.cache));
    pm.deltas.push_back(step.delta);
    pm.betas.push_back(beta_t);
    model.set_overlay(id, pm.accum);

    entry.beta[id] = beta_t;
    entry.delta_fro[id] = frobenius_norm(step.delta);
    entry.accum_fro[id] = frobenius_norm(pm.accum);
    std::vector<double> layer_scores;
    for (const auto& layer : step.beta_layers) layer_scores.push_back(layer.back());
    entry.beta_layers[id] = std::move(layer_scores);
  }

  ++edit_count_;
  return entry;
}

Tensor DafnetEditor::accumulated(int matrix_id) const {
  const PerMatrix& pm = state_.at(std::size_t(matrix_id));
  if (pm.accum.defined()) return pm.accum.detach();
  const MatrixShape& s = net_.shape_of(matrix_id);
  return Tensor::zeros(s.d_in, s.d_out);
}

const std::vector<Tensor>& DafnetEditor::delta_log(int matrix_id) const {
  return state_.at(std::size_t(matrix_id)).deltas;
}

const std::vector<double>& DafnetEditor::beta_log(int matrix_id) const {
  return state_.at(std::size_t(matrix_id)).betas;
}

void DafnetEditor::apply_accumulated(EditableLM& model) const {
  for (int id = 0; id < net_.matrix_count(); ++id) {
    model.set_overlay(id, accumulated(id));
  }
}

Checkpoint DafnetEditor::state_to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.meta["kind"] = "editor_state";
  ckpt.meta["format_version"] = int(Checkpoint::kFormatVersion);
  ckpt.meta["edit_count"] = edit_count_;
  ckpt.meta["matrix_count"] = net_.matrix_count();
  ckpt.meta["k_layers"] = net_.config().k_layers;
  for (int id = 0; id < net_.matrix_count(); ++id) {
    const PerMatrix& pm = state_[std::size_t(id)];
    const std::string m = "m" + std::to_string(id) + ".";
    ckpt.add(m + "accum", accumulated(id));
    Tensor betas = Tensor::zeros(std::max<int>(1, int(pm.betas.size())), 1);
    for (std::size_t i = 0; i < pm.betas.size(); ++i) betas.mutable_data()[i] = pm.betas[i];
    ckpt.meta["beta_count_m" + std::to_string(id)] = int(pm.betas.size());
    ckpt.add(m + "betas", betas);
    for (std::size_t f = 0; f < pm.history.size(); ++f) {
      const FactCache& c = pm.history[f];
      for (int k = 0; k < net_.config().k_layers; ++k) {
        ckpt.add(m + "f" + std::to_string(f) + ".intra" + std::to_string(k),
                 Tensor::from_data(1, int(c.intra_hbar[std::size_t(k)].size()),
                                   c.intra_hbar[std::size_t(k)]));
        ckpt.add(m + "f" + std::to_string(f) + ".inter" + std::to_string(k),
                 Tensor::from_data(1, int(c.inter_x[std::size_t(k)].size()),
                                   c.inter_x[std::size_t(k)]));
      }
    }
  }
  return ckpt;
}

void DafnetEditor::load_state(const Checkpoint& ckpt) {
  if (ckpt.meta.value("kind", "") != "editor_state") {
    throw std::runtime_error("editor state: wrong checkpoint kind");
  }
  if (ckpt.meta.at("matrix_count").get<int>() != net_.matrix_count() ||
      ckpt.meta.at("k_layers").get<int>() != net_.config().k_layers) {
    throw std::runtime_error("editor state: checkpoint does not match the network");
  }
  edit_count_ = ckpt.meta.at("edit_count").get<int>();
  state_.assign(std::size_t(net_.matrix_count()), {});
  for (int id = 0; id < net_.matrix_count(); ++id) {
    PerMatrix& pm = state_[std::size_t(id)];
    const std::string m = "m" + std::to_string(id) + ".";
    pm.accum = ckpt.get(m + "accum").clone();
    const int n_betas = ckpt.meta.at("beta_count_m" + std::to_string(id)).get<int>();
    const Tensor& betas = ckpt.get(m + "betas");
    for (int i = 0; i < n_betas; ++i) pm.betas.push_back(betas.data()[std::size_t(i)]);
    for (int f = 0; f < edit_count_; ++f) {
      FactCache c;
      for (int k = 0; k < net_.config().k_layers; ++k) {
        c.intra_hbar.push_back(
            ckpt.get(m + "f" + std::to_string(f) + ".intra" + std::to_string(k)).data());
        c.inter_x.push_back(
            ckpt.get(m + "f" + std::to_string(f) + ".inter" + std::to_string(k)).data());
      }
      pm.history.push_back(std::move(c));
    }
  }
}

// ---- FtEditor -----------------------------------------------------------------

FtEditor::FtEditor(int steps, double lr) : steps_(steps), lr_(lr) {}

EditJournalEntry FtEditor::edit(EditableLM& model, const TokenSeq& sample,
                                const std::string& sample_id) {
  EditJournalEntry entry;
  entry.edit_index = edit_count_ + 1;
  entry.sample_id = sample_id;

  const auto mats = model.editable_matrices();
  std::map<int, Tensor> weights;
  std::vector<Tensor> params;
  for (std::size_t id = 0; id < mats.size(); ++id) {
    Tensor w = model.base_weight(int(id)).detach();
    if (model.has_overlay(int(id))) w = add(w, model.overlay(int(id)));
    w.set_requires_grad(true);
    weights.emplace(int(id), w);
    params.push_back(w);
  }

  AdamConfig cfg;
  cfg.lr = lr_;
  Adam opt(params, cfg);
  for (int step = 0; step < steps_; ++step) {
    opt.zero_grad();
    backward(model.nll_loss(sample, /*mean_per_token=*/true, &weights));
    opt.step();
  }

  for (std::size_t id = 0; id < mats.size(); ++id) {
    Tensor delta = sub(weights.at(int(id)), model.base_weight(int(id)));
    entry.delta_fro[int(id)] = frobenius_norm(sub(delta, model.overlay(int(id))));
    entry.accum_fro[int(id)] = frobenius_norm(delta);
    model.set_overlay(int(id), delta);
  }
  ++edit_count_;
  return entry;
}

// ---- NullEditor ----------------------------------------------------------------

EditJournalEntry NullEditor::edit(EditableLM& model, const TokenSeq& sample,
                                  const std::string& sample_id) {
  (void)model;
  (void)sample;
  EditJournalEntry entry;
  entry.edit_index = ++edit_count_;
  entry.sample_id = sample_id;
  return entry;
}

std::unique_ptr<SequentialEditor> make_editor(const std::string& kind, const Dafnet* net,
                                              int ft_steps, double ft_lr) {
  if (kind == "dafnet") {
    if (net == nullptr) throw std::runtime_error("editor: dafnet editor needs a trained network");
    return std::make_unique<DafnetEditor>(*net);
  }
  if (kind == "ft") return std::make_unique<FtEditor>(ft_steps, ft_lr);
  if (kind == "null") return std::make_unique<NullEditor>();
  throw std::runtime_error("editor: unknown kind '" + kind + "' (expected dafnet|ft|null)");
}

}  // namespace dafedit
