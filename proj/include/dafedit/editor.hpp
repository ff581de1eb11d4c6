#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dafedit/dafnet.hpp"
#include "dafedit/lm.hpp"
#include "dafedit/signal.hpp"

namespace dafedit {

// Gamma: adds a weight correction on top of the current overlay; the base
// matrix is never touched.
void apply_overlay(EditableLM& model, int matrix_id, const Tensor& delta);

struct EditJournalEntry {
  int edit_index = 0;  // 1-based position in the sequence
  std::string sample_id;
  // Per editable matrix: the fusion weight of this edit, the norms of its raw
  // and accumulated deltas, and the per-layer diagonal scores.
  std::map<int, double> beta;
  std::map<int, double> delta_fro;
  std::map<int, double> accum_fro;
  std::map<int, std::vector<double>> beta_layers;
};

class SequentialEditor {
 public:
  virtual ~SequentialEditor() = default;
  virtual EditJournalEntry edit(EditableLM& model, const TokenSeq& sample,
                                const std::string& sample_id) = 0;
  virtual std::string name() const = 0;
  int edit_count() const { return edit_count_; }

 protected:
  int edit_count_ = 0;
};

// Sequential editing with the trained fusion network: capture the signal on
// f_{t-1}, run the incremental forward against the cached fact history,
// fold the new delta into the running accumulation, overlay it.
class DafnetEditor : public SequentialEditor {
 public:
  explicit DafnetEditor(Dafnet net);

  EditJournalEntry edit(EditableLM& model, const TokenSeq& sample,
                        const std::string& sample_id) override;
  std::string name() const override { return "dafnet"; }

  const Dafnet& net() const { return net_; }
  // Accumulated delta of one matrix (zeros before the first edit).
  Tensor accumulated(int matrix_id) const;
  // Per-edit (beta, ||delta||) log used by the closed-form consistency check.
  const std::vector<Tensor>& delta_log(int matrix_id) const;
  const std::vector<double>& beta_log(int matrix_id) const;

  // Re-applies the accumulated deltas onto a model (used after state load).
  void apply_accumulated(EditableLM& model) const;

  // Serializes accumulated deltas and the fact-history caches; restoring the
  // state and continuing reproduces a fresh run bit-exactly.
  Checkpoint state_to_checkpoint() const;
  void load_state(const Checkpoint& ckpt);

 private:
  struct PerMatrix {
    Tensor accum;                   // undefined until sized on first edit
    std::vector<FactCache> history;
    std::vector<Tensor> deltas;
    std::vector<double> betas;
  };
  Dafnet net_;
  std::vector<PerMatrix> state_;
};

// Per-edit fine-tuning of the same editable matrices (comparison baseline).
// Each edit runs `steps` Adam iterations on that sample's loss; the resulting
// weight movement accumulates in the overlay.
class FtEditor : public SequentialEditor {
 public:
  FtEditor(int steps, double lr);
  EditJournalEntry edit(EditableLM& model, const TokenSeq& sample,
                        const std::string& sample_id) override;
  std::string name() const override { return "ft"; }

 private:
  int steps_;
  double lr_;
};

class NullEditor : public SequentialEditor {
 public:
  EditJournalEntry edit(EditableLM& model, const TokenSeq& sample,
                        const std::string& sample_id) override;
  std::string name() const override { return "null"; }
};

std::unique_ptr<SequentialEditor> make_editor(const std::string& kind, const Dafnet* net,
                                              int ft_steps, double ft_lr);

}  // namespace dafedit
