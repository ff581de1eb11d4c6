// Independent straight-line reference implementation of the fusion-network
// forward pass, written directly from the formulas with flat double loops.
// Used only as a test oracle; shares no code with the implementation under
// test.
#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace refflow {

using Mat = std::vector<std::vector<double>>;  // row major

inline Mat make(int r, int c, double v = 0.0) { return Mat(size_t(r), std::vector<double>(size_t(c), v)); }

inline Mat mm(const Mat& a, const Mat& b) {
  Mat out = make(int(a.size()), int(b[0].size()));
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t k = 0; k < b.size(); ++k)
      for (size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
  return out;
}

inline Mat add_bias(const Mat& a, const Mat& bias_row) {
  Mat out = a;
  for (auto& row : out)
    for (size_t j = 0; j < row.size(); ++j) row[j] += bias_row[0][j];
  return out;
}

inline Mat relu(const Mat& a) {
  Mat out = a;
  for (auto& row : out)
    for (double& v : row) v = v > 0 ? v : 0;
  return out;
}

inline std::vector<double> softmax_vec(const std::vector<double>& v) {
  double mx = v[0];
  for (double x : v) mx = std::max(mx, x);
  std::vector<double> e(v.size());
  double s = 0;
  for (size_t i = 0; i < v.size(); ++i) {
    e[i] = std::exp(v[i] - mx);
    s += e[i];
  }
  for (double& x : e) x /= s;
  return e;
}

struct Params {
  // name -> matrix; names follow the implementation's parameters() listing
  std::map<std::string, Mat> p;
  const Mat& at(const std::string& name) const { return p.at(name); }
  bool has(const std::string& name) const { return p.count(name) != 0; }
};

struct Config {
  int k_layers = 2;
  int d_attn = 32;
  int n_heads = 2;
  int d_c = 0;
};

struct Fact {
  Mat u, delta;
  int token_count = 0;
};

// Causal multi-head self-attention; returns output rows and the
// head-averaged probability matrix. Pass empty wv/wo to compute only the
// probabilities.
inline void attention(const Config& cfg, const Mat& wq, const Mat& wk, const Mat& wv,
                      const Mat& wo, const Mat& x, Mat* out, Mat* probs_avg) {
  const int t = int(x.size());
  const int dh = cfg.d_attn / cfg.n_heads;
  const bool probs_only = wv.empty();
  Mat q = mm(x, wq), k = mm(x, wk);
  Mat v = probs_only ? Mat{} : mm(x, wv);
  Mat ctx = make(t, cfg.d_attn);
  Mat pavg = make(t, t);
  for (int h = 0; h < cfg.n_heads; ++h) {
    for (int i = 0; i < t; ++i) {
      std::vector<double> scores(size_t(i) + 1);
      for (int j = 0; j <= i; ++j) {
        double dot = 0;
        for (int d = 0; d < dh; ++d) dot += q[size_t(i)][size_t(h * dh + d)] * k[size_t(j)][size_t(h * dh + d)];
        scores[size_t(j)] = dot / std::sqrt(double(dh));
      }
      std::vector<double> p = softmax_vec(scores);
      for (int j = 0; j <= i; ++j) {
        pavg[size_t(i)][size_t(j)] += p[size_t(j)] / cfg.n_heads;
        if (!probs_only)
          for (int d = 0; d < dh; ++d)
            ctx[size_t(i)][size_t(h * dh + d)] += p[size_t(j)] * v[size_t(j)][size_t(h * dh + d)];
      }
    }
  }
  *out = probs_only ? Mat{} : mm(ctx, wo);
  *probs_avg = pavg;
}

struct Result {
  std::vector<Mat> h_tilde;   // per fact
  std::vector<double> beta_bar;
  std::vector<Mat> deltas;    // per fact
  Mat accumulated;
};

// Full forward for the reference shape (identity remaps): token MLP +
// token-attention fusion, K stacked layers with causal fact attention, K
// diagonal attention layers, per-fact outer-product deltas, weighted sum.
inline Result forward(const Config& cfg, const Params& P, const std::vector<Fact>& facts,
                      int d_in, int d_out) {
  const int T = int(facts.size());
  const int dc = cfg.d_c;

  std::vector<Mat> h(static_cast<size_t>(T));
  for (int t = 0; t < T; ++t) {
    const Fact& f = facts[size_t(t)];
    const int b = int(f.u.size());
    h[size_t(t)] = make(b, dc);
    for (int i = 0; i < b; ++i) {
      for (int j = 0; j < d_in; ++j) h[size_t(t)][size_t(i)][size_t(j)] = f.u[size_t(i)][size_t(j)];
      for (int j = 0; j < d_out; ++j) h[size_t(t)][size_t(i)][size_t(d_in + j)] = f.delta[size_t(i)][size_t(j)];
    }
  }

  std::vector<Mat> h_bar_last(static_cast<size_t>(T));
  for (int k = 0; k < cfg.k_layers; ++k) {
    const std::string pre = "intra." + std::to_string(k) + ".";
    std::vector<Mat> h_hat_prime(static_cast<size_t>(T));
    Mat stacked = make(T, dc);
    for (int t = 0; t < T; ++t) {
      const Mat& ht = h[size_t(t)];
      const int b = int(ht.size());
      Mat hp = add_bias(mm(relu(add_bias(mm(ht, P.at(pre + "w1")), P.at(pre + "b1"))), P.at(pre + "w2")),
                        P.at(pre + "b2"));
      Mat logits = add_bias(mm(relu(add_bias(mm(hp, P.at(pre + "w3")), P.at(pre + "b3"))), P.at(pre + "w4")),
                            P.at(pre + "b4"));
      std::vector<double> col(static_cast<size_t>(b));
      for (int i = 0; i < b; ++i) col[size_t(i)] = logits[size_t(i)][0];
      std::vector<double> alpha = softmax_vec(col);
      Mat h_hat = make(b, dc);
      for (int i = 0; i < b; ++i)
        for (int j = 0; j < dc; ++j) h_hat[size_t(i)][size_t(j)] = alpha[size_t(i)] * hp[size_t(i)][size_t(j)];
      for (int j = 0; j < dc; ++j) {
        double s = 0;
        for (int i = 0; i < b; ++i) s += h_hat[size_t(i)][size_t(j)];
        stacked[size_t(t)][size_t(j)] = s;
      }
      h_hat_prime[size_t(t)] = make(b, dc);
      for (int i = 0; i < b; ++i)
        for (int j = 0; j < dc; ++j)
          h_hat_prime[size_t(t)][size_t(i)][size_t(j)] = h_hat[size_t(i)][size_t(j)] + ht[size_t(i)][size_t(j)];
      if (k == cfg.k_layers - 1) {
        h_bar_last[size_t(t)] = Mat{stacked[size_t(t)]};
      }
    }
    Mat fused, probs;
    attention(cfg, P.at(pre + "attn.wq"), P.at(pre + "attn.wk"), P.at(pre + "attn.wv"),
              P.at(pre + "attn.wo"), stacked, &fused, &probs);
    for (int t = 0; t < T; ++t) {
      const int b = int(h_hat_prime[size_t(t)].size());
      h[size_t(t)] = make(b, dc);
      for (int i = 0; i < b; ++i)
        for (int j = 0; j < dc; ++j)
          h[size_t(t)][size_t(i)][size_t(j)] = h_hat_prime[size_t(t)][size_t(i)][size_t(j)] + fused[size_t(t)][size_t(j)];
    }
  }

  Result res;
  res.h_tilde = h;
  res.beta_bar.assign(size_t(T), 0.0);
  Mat x = make(T, dc);
  for (int t = 0; t < T; ++t) x[size_t(t)] = h_bar_last[size_t(t)][0];
  for (int k = 0; k < cfg.k_layers; ++k) {
    const std::string pre = "inter." + std::to_string(k) + ".attn.";
    const bool has_vo = P.has(pre + "wv");
    Mat y, probs;
    attention(cfg, P.at(pre + "wq"), P.at(pre + "wk"), has_vo ? P.at(pre + "wv") : Mat{},
              has_vo ? P.at(pre + "wo") : Mat{}, x, &y, &probs);
    for (int t = 0; t < T; ++t) res.beta_bar[size_t(t)] += probs[size_t(t)][size_t(t)] / cfg.k_layers;
    if (has_vo) x = y;
  }

  for (int t = 0; t < T; ++t) {
    const Mat& g = h[size_t(t)];
    const int b = int(g.size());
    Mat dw = make(d_in, d_out);
    for (int i = 0; i < b; ++i)
      for (int r = 0; r < d_in; ++r)
        for (int c = 0; c < d_out; ++c)
          dw[size_t(r)][size_t(c)] += g[size_t(i)][size_t(r)] * g[size_t(i)][size_t(d_in + c)];
    for (auto& row : dw)
      for (double& v : row) v /= facts[size_t(t)].token_count;
    res.deltas.push_back(dw);
  }

  res.accumulated = make(d_in, d_out);
  for (int t = 0; t < T; ++t) {
    double w = res.beta_bar[size_t(t)];
    for (int tau = t + 1; tau < T; ++tau) w *= 1.0 - res.beta_bar[size_t(tau)];
    for (int r = 0; r < d_in; ++r)
      for (int c = 0; c < d_out; ++c)
        res.accumulated[size_t(r)][size_t(c)] += w * res.deltas[size_t(t)][size_t(r)][size_t(c)];
  }
  return res;
}

}  // namespace refflow
