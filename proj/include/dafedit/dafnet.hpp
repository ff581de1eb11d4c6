#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dafedit/rng.hpp"
#include "dafedit/serialize.hpp"
#include "dafedit/signal.hpp"
#include "dafedit/tensor.hpp"

namespace dafedit {

struct DafnetConfig {
  int k_layers = 2;   // depth of both the intra and inter attention stacks
  int d_down = 32;    // bottleneck width of the token MLPs
  int d_attn = 32;    // middle width of every self-attention (Q,K,V,O)
  int n_heads = 2;
  double init_std = 0.02;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static DafnetConfig from_json(const nlohmann::json& j);
};

struct MatrixShape {
  int d_in = 0;
  int d_out = 0;
  int width() const { return d_in + d_out; }
  bool operator==(const MatrixShape& o) const { return d_in == o.d_in && d_out == o.d_out; }
};

// Per-fact state the editor carries between edits: one fused fact vector per
// intra layer and the per-layer input rows of the inter stack. With these
// cached, the incremental edit path computes exactly the same function as the
// joint training-time forward.
struct FactCache {
  std::vector<std::vector<double>> intra_hbar;  // k_layers entries of length d_c
  std::vector<std::vector<double>> inter_x;     // k_layers entries of length d_c
};

// The auxiliary fusion network. One trunk is shared by all editable matrices;
// matrices whose shape differs from the reference shape pass through learned
// bias-free remap layers at entry and exit. Each editable matrix keeps its own
// fact history; sequences for different matrices are independent.
class Dafnet {
 public:
  Dafnet(DafnetConfig config, std::vector<MatrixShape> matrix_shapes, Rng& init_rng);

  const DafnetConfig& config() const { return config_; }
  int d_common() const { return d_common_; }
  int matrix_count() const { return int(matrix_shape_index_.size()); }
  const MatrixShape& shape_of(int matrix_id) const;

  // Rows of [u;delta] linearly mapped to the shared trunk width; identity for
  // the reference shape.
  Tensor remap_signal(const EditSignal& signal, int matrix_id) const;

  // Intermediate activations of one intra layer applied to one fact's rows.
  struct IntraActivations {
    Tensor h_prime;      // [B, d_c]
    Tensor alpha;        // [B, 1], nonnegative, sums to 1
    Tensor h_hat;        // [B, d_c]
    Tensor h_bar;        // [1, d_c]
    Tensor h_hat_prime;  // [B, d_c]
  };
  IntraActivations intra_activations(int layer_k, const Tensor& h) const;

  // Joint forward over a whole fact sequence (graph-capable; used in training
  // and as the oracle target).
  struct SequenceForward {
    std::vector<Tensor> deltas;        // per fact, [d_in, d_out]
    Tensor beta_bar;                   // [T,1], entries in (0,1]
    std::vector<Tensor> beta_layers;   // k_layers tensors [T,1]
    Tensor accumulated;                // closed-form weighted sum of deltas
    std::vector<Tensor> h_tilde;       // final intra-layer token fusion per fact [B_t, d_c]
    std::vector<FactCache> caches;     // per fact, for incremental replay
  };
  SequenceForward forward_sequence(int matrix_id, const std::vector<EditSignal>& facts) const;

  // Incremental forward for the t-th edit given the cached history of the
  // previous t-1 facts. beta_bar is recomputed over the full visible history;
  // its last entry drives the recursive accumulation.
  struct EditStep {
    Tensor delta;                                  // this fact's weight update
    std::vector<double> beta_bar;                  // length t
    std::vector<std::vector<double>> beta_layers;  // k_layers x t
    FactCache cache;                               // append to the history
  };
  EditStep edit_step(int matrix_id, const EditSignal& signal,
                     const std::vector<FactCache>& history) const;

  std::vector<std::pair<std::string, Tensor>> parameters() const;

  Checkpoint to_checkpoint() const;
  static Dafnet from_checkpoint(const Checkpoint& ckpt);

 private:
  struct AttentionBlock {
    Tensor wq, wk, wv, wo;
  };
  struct IntraLayer {
    Tensor w1, b1, w2, b2, w3, b3, w4, b4;
    AttentionBlock attn;
  };
  struct Remap {
    bool identity = true;
    Tensor in;   // [width, d_c]
    Tensor out;  // [d_c, width]
  };

  Dafnet() = default;

  // (attention output [T,d_io], head-averaged probabilities [T,T])
  std::pair<Tensor, Tensor> attention(const AttentionBlock& blk, const Tensor& x) const;

  // Token-level flow of one intra layer for one fact: returns (h_hat_prime,
  // h_bar) -- the residual token rows and the fused fact vector.
  std::pair<Tensor, Tensor> intra_token_flow(const IntraLayer& layer, const Tensor& h) const;

  DafnetConfig config_;
  int d_common_ = 0;
  std::vector<MatrixShape> unique_shapes_;
  std::vector<int> matrix_shape_index_;  // matrix id -> unique shape index
  std::vector<Remap> remaps_;            // per unique shape
  std::vector<IntraLayer> intra_;
  std::vector<AttentionBlock> inter_;
};

// Eq.-style weighted accumulation of per-fact deltas, closed form:
// sum_t (prod_{tau>t} (1-beta_tau)) beta_t * delta_t.
Tensor accumulate_closed(const std::vector<Tensor>& deltas, const std::vector<double>& beta_bar);
// Graph version with beta as a [T,1] tensor.
Tensor accumulate_closed_graph(const std::vector<Tensor>& deltas, const Tensor& beta_bar);
// One recursive step: (1-beta_t) * prev + beta_t * delta_t.
Tensor accumulate_recursive(const Tensor& prev, const Tensor& delta, double beta_t);

// CSV rows (edit index, layer label, value); layer labels are "1".."K" for
// per-layer diagonals plus "avg" for their mean.
struct AttentionScoreRow {
  int edit_index = 0;
  std::string layer;
  double value = 0.0;
};
std::string attention_scores_csv(const std::vector<AttentionScoreRow>& rows);

}  // namespace dafedit
