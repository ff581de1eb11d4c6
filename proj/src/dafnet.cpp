#include "dafedit/dafnet.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dafedit {

// ---- config ------------------------------------------------------------------

void DafnetConfig::validate() const {
  if (k_layers < 1) throw std::runtime_error("dafnet config: k_layers must be >= 1");
  if (d_down <= 0 || d_attn <= 0 || n_heads <= 0) {
    throw std::runtime_error("dafnet config: widths and heads must be positive");
  }
  if (d_attn % n_heads != 0) {
    throw std::runtime_error("dafnet config: d_attn " + std::to_string(d_attn) +
                             " not divisible by n_heads " + std::to_string(n_heads));
  }
}

nlohmann::ordered_json DafnetConfig::to_json() const {
  return {{"k_layers", k_layers},
          {"d_down", d_down},
          {"d_attn", d_attn},
          {"n_heads", n_heads},
          {"init_std", init_std}};
}

DafnetConfig DafnetConfig::from_json(const nlohmann::json& j) {
  DafnetConfig c;
  c.k_layers = j.value("k_layers", c.k_layers);
  c.d_down = j.value("d_down", c.d_down);
  c.d_attn = j.value("d_attn", c.d_attn);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.init_std = j.value("init_std", c.init_std);
  c.validate();
  return c;
}

// ---- construction --------------------------------------------------------------

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

}  // namespace

Dafnet::Dafnet(DafnetConfig config, std::vector<MatrixShape> matrix_shapes, Rng& rng)
    : config_(config) {
  config_.validate();
  if (matrix_shapes.empty()) throw std::runtime_error("dafnet: no editable matrix shapes given");

  for (const MatrixShape& s : matrix_shapes) {
    if (s.d_in <= 0 || s.d_out <= 0) throw std::runtime_error("dafnet: bad matrix shape");
    int idx = -1;
    for (std::size_t u = 0; u < unique_shapes_.size(); ++u) {
      if (unique_shapes_[u] == s) {
        idx = int(u);
        break;
      }
    }
    if (idx < 0) {
      idx = int(unique_shapes_.size());
      unique_shapes_.push_back(s);
    }
    matrix_shape_index_.push_back(idx);
  }

  d_common_ = unique_shapes_[0].width();
  remaps_.resize(unique_shapes_.size());
  for (std::size_t u = 1; u < unique_shapes_.size(); ++u) {
    const int w = unique_shapes_[u].width();
    remaps_[u].identity = false;
    remaps_[u].in = init_weights(rng, w, d_common_, config_.init_std);
    remaps_[u].out = init_weights(rng, d_common_, w, config_.init_std);
  }

  const int dc = d_common_, dd = config_.d_down, da = config_.d_attn;
  // Small random bias init keeps relu inputs off exact kink points.
  const double bias_std = config_.init_std * 0.1;
  intra_.resize(std::size_t(config_.k_layers));
  inter_.resize(std::size_t(config_.k_layers));
  for (int k = 0; k < config_.k_layers; ++k) {
    IntraLayer& l = intra_[std::size_t(k)];
    l.w1 = init_weights(rng, dc, dd, config_.init_std);
    l.b1 = init_weights(rng, 1, dd, bias_std);
    l.w2 = init_weights(rng, dd, dc, config_.init_std);
    l.b2 = init_weights(rng, 1, dc, bias_std);
    l.w3 = init_weights(rng, dc, dd, config_.init_std);
    l.b3 = init_weights(rng, 1, dd, bias_std);
    l.w4 = init_weights(rng, dd, 1, config_.init_std);
    l.b4 = init_weights(rng, 1, 1, bias_std);
    l.attn.wq = init_weights(rng, dc, da, config_.init_std);
    l.attn.wk = init_weights(rng, dc, da, config_.init_std);
    l.attn.wv = init_weights(rng, dc, da, config_.init_std);
    l.attn.wo = init_weights(rng, da, dc, config_.init_std);
    AttentionBlock& b = inter_[std::size_t(k)];
    b.wq = init_weights(rng, dc, da, config_.init_std);
    b.wk = init_weights(rng, dc, da, config_.init_std);
    // The last diagonal-attention layer only ever contributes its probability
    // matrix; value/output projections would be dead weight there.
    if (k + 1 < config_.k_layers) {
      b.wv = init_weights(rng, dc, da, config_.init_std);
      b.wo = init_weights(rng, da, dc, config_.init_std);
    }
  }
  for (auto& [name, t] : parameters()) t.set_requires_grad(true);
}

const MatrixShape& Dafnet::shape_of(int matrix_id) const {
  return unique_shapes_.at(std::size_t(matrix_shape_index_.at(std::size_t(matrix_id))));
}

// ---- building blocks -----------------------------------------------------------

Tensor Dafnet::remap_signal(const EditSignal& signal, int matrix_id) const {
  if (matrix_id < 0 || matrix_id >= matrix_count()) {
    throw std::runtime_error("dafnet: matrix id " + std::to_string(matrix_id) + " not registered");
  }
  const MatrixShape& shape = shape_of(matrix_id);
  if (signal.u.cols() != shape.d_in || signal.delta.cols() != shape.d_out ||
      signal.u.rows() != signal.delta.rows()) {
    throw ShapeError("remap_signal: signal [" + std::to_string(signal.u.rows()) + "," +
                     std::to_string(signal.u.cols()) + "|" + std::to_string(signal.delta.cols()) +
                     "] vs shape [" + std::to_string(shape.d_in) + "," +
                     std::to_string(shape.d_out) + "]");
  }
  if (signal.u.rows() == 0) throw std::runtime_error("remap_signal: empty fact (no token rows)");
  Tensor h = concat_cols({signal.u, signal.delta});
  const Remap& remap = remaps_[std::size_t(matrix_shape_index_[std::size_t(matrix_id)])];
  if (remap.identity) return h;
  return matmul(h, remap.in);
}

std::pair<Tensor, Tensor> Dafnet::attention(const AttentionBlock& blk, const Tensor& x) const {
  const int t = x.rows();
  const int heads = config_.n_heads, dh = config_.d_attn / heads;
  const double att_scale = 1.0 / std::sqrt(double(dh));
  const Tensor mask = causal_mask(t);
  const bool probs_only = !blk.wv.defined();

  Tensor q = matmul(x, blk.wq);
  Tensor k = matmul(x, blk.wk);
  Tensor v = probs_only ? Tensor() : matmul(x, blk.wv);
  std::vector<Tensor> ctx;
  Tensor probs_sum;
  for (int h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
    Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
    Tensor probs = softmax_rows(add(scale(matmul(qh, transpose(kh)), att_scale), mask));
    if (!probs_only) ctx.push_back(matmul(probs, slice_cols(v, h * dh, (h + 1) * dh)));
    probs_sum = h == 0 ? probs : add(probs_sum, probs);
  }
  Tensor avg_probs = scale(probs_sum, 1.0 / double(heads));
  if (probs_only) return {Tensor(), avg_probs};
  return {matmul(concat_cols(ctx), blk.wo), avg_probs};
}

std::pair<Tensor, Tensor> Dafnet::intra_token_flow(const IntraLayer& layer, const Tensor& h) const {
  Tensor h_prime = add_row(matmul(relu(add_row(matmul(h, layer.w1), layer.b1)), layer.w2), layer.b2);
  Tensor alpha_logits =
      add_row(matmul(relu(add_row(matmul(h_prime, layer.w3), layer.b3)), layer.w4), layer.b4);
  Tensor alpha = softmax_cols(alpha_logits);              // over the token axis
  Tensor h_hat = scale_rows(h_prime, alpha);
  Tensor h_bar = sum_axis0(h_hat);                        // fused fact vector [1, d_c]
  Tensor h_hat_prime = add(h_hat, h);                     // token-level residual
  return {h_hat_prime, h_bar};
}

Dafnet::IntraActivations Dafnet::intra_activations(int layer_k, const Tensor& h) const {
  if (h.rows() == 0) throw std::runtime_error("intra_activations: empty fact (no token rows)");
  const IntraLayer& layer = intra_.at(std::size_t(layer_k));
  IntraActivations act;
  act.h_prime =
      add_row(matmul(relu(add_row(matmul(h, layer.w1), layer.b1)), layer.w2), layer.b2);
  Tensor alpha_logits =
      add_row(matmul(relu(add_row(matmul(act.h_prime, layer.w3), layer.b3)), layer.w4), layer.b4);
  act.alpha = softmax_cols(alpha_logits);
  act.h_hat = scale_rows(act.h_prime, act.alpha);
  act.h_bar = sum_axis0(act.h_hat);
  act.h_hat_prime = add(act.h_hat, h);
  return act;
}

// ---- joint forward --------------------------------------------------------------

Dafnet::SequenceForward Dafnet::forward_sequence(int matrix_id,
                                                 const std::vector<EditSignal>& facts) const {
  if (facts.empty()) throw std::runtime_error("dafnet: empty fact sequence");
  const int T = int(facts.size());

  SequenceForward out;
  out.caches.resize(std::size_t(T));

  std::vector<Tensor> h(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) h[std::size_t(t)] = remap_signal(facts[std::size_t(t)], matrix_id);

  // Intra-editing stack: K chained layers of token fusion + causal fact
  // attention.
  std::vector<Tensor> h_bar_final;
  for (int k = 0; k < config_.k_layers; ++k) {
    const IntraLayer& layer = intra_[std::size_t(k)];
    std::vector<Tensor> h_hat_prime(static_cast<std::size_t>(T)), h_bar(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
      auto [hp, hb] = intra_token_flow(layer, h[std::size_t(t)]);
      h_hat_prime[std::size_t(t)] = hp;
      h_bar[std::size_t(t)] = hb;
      out.caches[std::size_t(t)].intra_hbar.push_back(hb.detach().data());
    }
    Tensor fused = attention(layer.attn, concat_rows(h_bar)).first;  // [T, d_c]
    for (int t = 0; t < T; ++t) {
      h[std::size_t(t)] = add_row(h_hat_prime[std::size_t(t)], slice_rows(fused, t, t + 1));
    }
    if (k == config_.k_layers - 1) h_bar_final = h_bar;
  }
  out.h_tilde = h;

  // Inter-editing stack: chained causal attention over the fused fact
  // vectors; each layer contributes the diagonal of its head-averaged
  // probability matrix.
  Tensor x = concat_rows(h_bar_final);  // [T, d_c]
  Tensor beta_sum;
  for (int k = 0; k < config_.k_layers; ++k) {
    for (int t = 0; t < T; ++t) {
      out.caches[std::size_t(t)].inter_x.push_back(slice_rows(x, t, t + 1).detach().data());
    }
    auto [y, probs] = attention(inter_[std::size_t(k)], x);
    Tensor beta_k = diag_col(probs);  // [T,1]
    out.beta_layers.push_back(beta_k);
    beta_sum = k == 0 ? beta_k : add(beta_sum, beta_k);
    if (y.defined()) x = y;
  }
  out.beta_bar = scale(beta_sum, 1.0 / double(config_.k_layers));

  // Per-fact weight updates from the final token fusion, mapped back to the
  // matrix's native width.
  const MatrixShape& shape = shape_of(matrix_id);
  const Remap& remap = remaps_[std::size_t(matrix_shape_index_[std::size_t(matrix_id)])];
  for (int t = 0; t < T; ++t) {
    Tensor g = remap.identity ? h[std::size_t(t)] : matmul(h[std::size_t(t)], remap.out);
    if (g.cols() != shape.width()) {
      throw ShapeError("synthesize_delta: width " + std::to_string(g.cols()) + " vs " +
                       std::to_string(shape.width()));
    }
    Tensor u_tilde = slice_cols(g, 0, shape.d_in);
    Tensor d_tilde = slice_cols(g, shape.d_in, shape.width());
    const int b_t = facts[std::size_t(t)].token_count;
    out.deltas.push_back(scale(matmul(transpose(u_tilde), d_tilde), 1.0 / double(b_t)));
  }

  out.accumulated = accumulate_closed_graph(out.deltas, out.beta_bar);
  return out;
}

// ---- incremental forward ---------------------------------------------------------

Dafnet::EditStep Dafnet::edit_step(int matrix_id, const EditSignal& signal,
                                   const std::vector<FactCache>& history) const {
  const int t_prev = int(history.size());
  for (const FactCache& c : history) {
    if (int(c.intra_hbar.size()) != config_.k_layers || int(c.inter_x.size()) != config_.k_layers) {
      throw std::runtime_error("dafnet: fact cache does not match k_layers");
    }
  }

  EditStep step;
  Tensor h = remap_signal(signal, matrix_id);

  Tensor h_bar_last;
  for (int k = 0; k < config_.k_layers; ++k) {
    const IntraLayer& layer = intra_[std::size_t(k)];
    auto [h_hat_prime, h_bar] = intra_token_flow(layer, h);
    step.cache.intra_hbar.push_back(h_bar.detach().data());

    // Past facts enter the fact-level attention through their cached fused
    // vectors; only the current (last) row of the output is needed.
    std::vector<Tensor> rows;
    rows.reserve(std::size_t(t_prev) + 1);
    for (const FactCache& c : history) {
      rows.push_back(Tensor::from_data(1, d_common_, c.intra_hbar[std::size_t(k)]));
    }
    rows.push_back(h_bar);
    Tensor fused = attention(layer.attn, concat_rows(rows)).first;
    h = add_row(h_hat_prime, slice_rows(fused, t_prev, t_prev + 1));
    if (k == config_.k_layers - 1) h_bar_last = h_bar;
  }

  Tensor x_row = h_bar_last;
  std::vector<double> beta_bar(std::size_t(t_prev) + 1, 0.0);
  for (int k = 0; k < config_.k_layers; ++k) {
    step.cache.inter_x.push_back(x_row.detach().data());
    std::vector<Tensor> rows;
    rows.reserve(std::size_t(t_prev) + 1);
    for (const FactCache& c : history) {
      rows.push_back(Tensor::from_data(1, d_common_, c.inter_x[std::size_t(k)]));
    }
    rows.push_back(x_row);
    auto [y, probs] = attention(inter_[std::size_t(k)], concat_rows(rows));
    std::vector<double> beta_k(std::size_t(t_prev) + 1);
    for (int i = 0; i <= t_prev; ++i) {
      beta_k[std::size_t(i)] = probs.at(i, i);
      beta_bar[std::size_t(i)] += probs.at(i, i) / double(config_.k_layers);
    }
    step.beta_layers.push_back(std::move(beta_k));
    if (y.defined()) x_row = slice_rows(y, t_prev, t_prev + 1);
  }
  step.beta_bar = std::move(beta_bar);

  const MatrixShape& shape = shape_of(matrix_id);
  const Remap& remap = remaps_[std::size_t(matrix_shape_index_[std::size_t(matrix_id)])];
  Tensor g = remap.identity ? h : matmul(h, remap.out);
  Tensor u_tilde = slice_cols(g, 0, shape.d_in);
  Tensor d_tilde = slice_cols(g, shape.d_in, shape.width());
  step.delta =
      scale(matmul(transpose(u_tilde), d_tilde), 1.0 / double(signal.token_count)).detach();
  return step;
}

// ---- parameters / serialization ---------------------------------------------------

std::vector<std::pair<std::string, Tensor>> Dafnet::parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t u = 1; u < unique_shapes_.size(); ++u) {
    out.emplace_back("remap." + std::to_string(u) + ".in", remaps_[u].in);
    out.emplace_back("remap." + std::to_string(u) + ".out", remaps_[u].out);
  }
  for (int k = 0; k < config_.k_layers; ++k) {
    const std::string p = "intra." + std::to_string(k) + ".";
    const IntraLayer& l = intra_[std::size_t(k)];
    out.emplace_back(p + "w1", l.w1);
    out.emplace_back(p + "b1", l.b1);
    out.emplace_back(p + "w2", l.w2);
    out.emplace_back(p + "b2", l.b2);
    out.emplace_back(p + "w3", l.w3);
    out.emplace_back(p + "b3", l.b3);
    out.emplace_back(p + "w4", l.w4);
    out.emplace_back(p + "b4", l.b4);
    out.emplace_back(p + "attn.wq", l.attn.wq);
    out.emplace_back(p + "attn.wk", l.attn.wk);
    out.emplace_back(p + "attn.wv", l.attn.wv);
    out.emplace_back(p + "attn.wo", l.attn.wo);
  }
  for (int k = 0; k < config_.k_layers; ++k) {
    const std::string p = "inter." + std::to_string(k) + ".attn.";
    const AttentionBlock& b = inter_[std::size_t(k)];
    out.emplace_back(p + "wq", b.wq);
    out.emplace_back(p + "wk", b.wk);
    if (b.wv.defined()) {
      out.emplace_back(p + "wv", b.wv);
      out.emplace_back(p + "wo", b.wo);
    }
  }
  return out;
}

Checkpoint Dafnet::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.meta["kind"] = "dafnet";
  ckpt.meta["format_version"] = int(Checkpoint::kFormatVersion);
  ckpt.meta["config"] = config_.to_json();
  nlohmann::ordered_json shapes = nlohmann::ordered_json::array();
  for (int id = 0; id < matrix_count(); ++id) {
    const MatrixShape& s = shape_of(id);
    shapes.push_back({{"d_in", s.d_in}, {"d_out", s.d_out}});
  }
  ckpt.meta["matrix_shapes"] = shapes;
  for (const auto& [name, t] : parameters()) ckpt.add(name, t);
  return ckpt;
}

Dafnet Dafnet::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.meta.value("kind", "") != "dafnet") {
    throw std::runtime_error("dafnet checkpoint: wrong kind");
  }
  DafnetConfig config = DafnetConfig::from_json(ckpt.meta.at("config"));
  std::vector<MatrixShape> shapes;
  for (const auto& s : ckpt.meta.at("matrix_shapes")) {
    shapes.push_back({s.at("d_in").get<int>(), s.at("d_out").get<int>()});
  }
  Rng dummy(0);
  Dafnet net(config, shapes, dummy);
  for (auto& [name, t] : net.parameters()) {
    const Tensor& src = ckpt.get(name);
    if (src.rows() != t.rows() || src.cols() != t.cols()) {
      throw std::runtime_error("dafnet checkpoint: array " + name + " has wrong shape");
    }
    t.mutable_data() = src.data();
  }
  return net;
}

// ---- accumulation ------------------------------------------------------------------

Tensor accumulate_closed(const std::vector<Tensor>& deltas, const std::vector<double>& beta_bar) {
  if (deltas.size() != beta_bar.size()) {
    throw std::runtime_error("accumulate_closed: " + std::to_string(deltas.size()) +
                             " deltas vs " + std::to_string(beta_bar.size()) + " weights");
  }
  const int T = int(deltas.size());
  Tensor acc = Tensor::zeros(deltas[0].rows(), deltas[0].cols());
  double suffix = 1.0;  // prod_{tau>t} (1 - beta_tau)
  for (int t = T - 1; t >= 0; --t) {
    const double w = suffix * beta_bar[std::size_t(t)];
    for (std::size_t i = 0; i < acc.numel(); ++i)
      acc.mutable_data()[i] += w * deltas[std::size_t(t)].data()[i];
    suffix *= 1.0 - beta_bar[std::size_t(t)];
  }
  return acc;
}

Tensor accumulate_closed_graph(const std::vector<Tensor>& deltas, const Tensor& beta_bar) {
  if (int(deltas.size()) != beta_bar.rows() || beta_bar.cols() != 1) {
    throw ShapeError("accumulate_closed_graph: beta [" + std::to_string(beta_bar.rows()) + "," +
                     std::to_string(beta_bar.cols()) + "] vs " + std::to_string(deltas.size()) +
                     " deltas");
  }
  const int T = int(deltas.size());
  Tensor one = Tensor::scalar(1.0);
  Tensor suffix = one;
  Tensor acc;
  for (int t = T - 1; t >= 0; --t) {
    Tensor beta_t = pick(beta_bar, t, 0);
    Tensor term = mul_scalar(mul(suffix, beta_t), deltas[std::size_t(t)]);
    acc = t == T - 1 ? term : add(acc, term);
    if (t > 0) suffix = mul(suffix, sub(one, beta_t));
  }
  return acc;
}

Tensor accumulate_recursive(const Tensor& prev, const Tensor& delta, double beta_t) {
  return add(scale(prev, 1.0 - beta_t), scale(delta, beta_t));
}

std::string attention_scores_csv(const std::vector<AttentionScoreRow>& rows) {
  std::string out = "edit,layer,value\n";
  for (const AttentionScoreRow& r : rows) {
    out += std::to_string(r.edit_index) + "," + r.layer + "," + format_double(r.value) + "\n";
  }
  return out;
}

}  // namespace dafedit
