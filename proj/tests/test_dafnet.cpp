#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "dafedit/dafnet.hpp"
#include "reference_flows.hpp"

using namespace dafedit;

namespace {

EditSignal random_signal(Rng& rng, int b, int d_in, int d_out, double scale = 0.5) {
  EditSignal s;
  s.u = Tensor::zeros(b, d_in);
  s.delta = Tensor::zeros(b, d_out);
  for (double& v : s.u.mutable_data()) v = rng.uniform(-scale, scale);
  for (double& v : s.delta.mutable_data()) v = rng.uniform(-scale, scale);
  s.token_count = b;
  return s;
}

DafnetConfig small_config(int k_layers = 2) {
  DafnetConfig cfg;
  cfg.k_layers = k_layers;
  cfg.d_down = 6;
  cfg.d_attn = 8;
  cfg.n_heads = 2;
  cfg.init_std = 0.3;
  return cfg;
}

refflow::Params export_params(const Dafnet& net) {
  refflow::Params P;
  for (const auto& [name, t] : net.parameters()) {
    refflow::Mat m = refflow::make(t.rows(), t.cols());
    for (int i = 0; i < t.rows(); ++i)
      for (int j = 0; j < t.cols(); ++j) m[size_t(i)][size_t(j)] = t.at(i, j);
    P.p[name] = m;
  }
  return P;
}

void zero_params(Dafnet& net) {
  for (auto& [name, t] : net.parameters())
    for (double& v : t.mutable_data()) v = 0.0;
}

}  // namespace

TEST_CASE("remap: identity for the reference shape, zero maps to zero") {
  Rng rng(1);
  Dafnet net(small_config(), {{3, 2}}, rng);
  EditSignal sig = random_signal(rng, 2, 3, 2);
  Tensor h = net.remap_signal(sig, 0);
  REQUIRE(h.rows() == 2);
  REQUIRE(h.cols() == 5);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 3; ++j) CHECK(h.at(i, j) == sig.u.at(i, j));
    for (int j = 0; j < 2; ++j) CHECK(h.at(i, 3 + j) == sig.delta.at(i, j));
  }

  EditSignal zero{Tensor::zeros(2, 3), Tensor::zeros(2, 2), 2};
  CHECK(frobenius_norm(net.remap_signal(zero, 0)) == 0.0);
}

TEST_CASE("remap: same-shape matrices share one remap; differing shapes get their own") {
  Rng rng(2);
  Dafnet same(small_config(), {{3, 2}, {3, 2}}, rng);
  for (const auto& [name, t] : same.parameters()) CHECK(name.find("remap") == std::string::npos);

  Rng rng2(3);
  Dafnet mixed(small_config(), {{3, 2}, {4, 3}}, rng2);
  int remap_params = 0;
  for (const auto& [name, t] : mixed.parameters())
    if (name.find("remap") != std::string::npos) ++remap_params;
  CHECK(remap_params == 2);  // in + out for the one non-reference shape

  // Non-reference shape maps into the common width; zero still maps to zero.
  EditSignal sig = random_signal(rng2, 3, 4, 3);
  Tensor h = mixed.remap_signal(sig, 1);
  CHECK(h.cols() == 5);
  EditSignal zero{Tensor::zeros(1, 4), Tensor::zeros(1, 3), 1};
  CHECK(frobenius_norm(mixed.remap_signal(zero, 1)) == 0.0);

  CHECK_THROWS(mixed.remap_signal(sig, 7));
}

TEST_CASE("token attention: singleton fact gets alpha exactly 1") {
  Rng rng(4);
  Dafnet net(small_config(), {{3, 2}}, rng);
  EditSignal sig = random_signal(rng, 1, 3, 2);
  auto act = net.intra_activations(0, net.remap_signal(sig, 0));
  REQUIRE(act.alpha.numel() == 1);
  CHECK(act.alpha.value() == 1.0);
}

TEST_CASE("token attention: zero scoring weights give uniform alpha") {
  Rng rng(5);
  Dafnet net(small_config(), {{3, 2}}, rng);
  for (auto& [name, t] : net.parameters()) {
    if (name.find(".w3") != std::string::npos || name.find(".w4") != std::string::npos ||
        name.find(".b3") != std::string::npos || name.find(".b4") != std::string::npos) {
      for (double& v : t.mutable_data()) v = 0.0;
    }
  }
  EditSignal sig = random_signal(rng, 4, 3, 2);
  auto act = net.intra_activations(0, net.remap_signal(sig, 0));
  for (int i = 0; i < 4; ++i) CHECK(act.alpha.at(i, 0) == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("token attention normalizes to 1 per fact per layer") {
  Rng rng(6);
  Dafnet net(small_config(), {{3, 2}}, rng);
  for (int trial = 0; trial < 10; ++trial) {
    const int b = 1 + int(rng.uniform_int(0, 4));
    EditSignal sig = random_signal(rng, b, 3, 2);
    for (int k = 0; k < 2; ++k) {
      auto act = net.intra_activations(k, net.remap_signal(sig, 0));
      double s = 0.0;
      for (int i = 0; i < b; ++i) {
        CHECK(act.alpha.at(i, 0) >= 0.0);
        s += act.alpha.at(i, 0);
      }
      CHECK(std::fabs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("empty fact raises") {
  Rng rng(7);
  Dafnet net(small_config(), {{3, 2}}, rng);
  CHECK_THROWS(net.intra_activations(0, Tensor::zeros(0, 5)));
  EditSignal empty{Tensor::zeros(0, 3), Tensor::zeros(0, 2), 0};
  CHECK_THROWS(net.remap_signal(empty, 0));
}

TEST_CASE("zero-initialized trunk: deltas reduce to outer products, beta harmonic") {
  Rng rng(8);
  Dafnet net(small_config(), {{2, 2}}, rng);
  zero_params(net);

  EditSignal sig;
  sig.u = Tensor::from_data(1, 2, {1.0, 0.0});
  sig.delta = Tensor::from_data(1, 2, {0.0, 2.0});
  sig.token_count = 1;

  auto fwd = net.forward_sequence(0, {sig, sig, sig});
  // With all weights zero the token flow is pass-through, so
  // delta_t = u^T delta / B_t.
  for (const Tensor& d : fwd.deltas) {
    CHECK(d.at(0, 0) == 0.0);
    CHECK(d.at(0, 1) == 2.0);
    CHECK(d.at(1, 0) == 0.0);
    CHECK(d.at(1, 1) == 0.0);
  }
  // Uniform causal attention: beta_t = 1/t.
  CHECK(fwd.beta_bar.at(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(fwd.beta_bar.at(1, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(fwd.beta_bar.at(2, 0) == doctest::Approx(1.0 / 3).epsilon(1e-15));
}

TEST_CASE("zero delta signal gives zero weight update") {
  Rng rng(9);
  Dafnet net(small_config(), {{2, 2}}, rng);
  zero_params(net);
  EditSignal sig{Tensor::from_data(1, 2, {1.0, 3.0}), Tensor::zeros(1, 2), 1};
  auto fwd = net.forward_sequence(0, {sig});
  CHECK(frobenius_norm(fwd.deltas[0]) == 0.0);
}

TEST_CASE("fusion weights: T=1 gives exactly 1; identical facts at T=2 give 0.5") {
  Rng rng(10);
  Dafnet net(small_config(), {{3, 2}}, rng);
  EditSignal sig = random_signal(rng, 2, 3, 2);

  auto one = net.forward_sequence(0, {sig});
  CHECK(one.beta_bar.at(0, 0) == 1.0);

  auto two = net.forward_sequence(0, {sig, sig});
  CHECK(two.beta_bar.at(0, 0) == 1.0);
  CHECK(two.beta_bar.at(1, 0) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("fusion weights stay in (0,1]") {
  Rng rng(11);
  Dafnet net(small_config(), {{3, 2}}, rng);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<EditSignal> facts;
    const int T = 1 + int(rng.uniform_int(0, 6));
    for (int t = 0; t < T; ++t)
      facts.push_back(random_signal(rng, 1 + int(rng.uniform_int(0, 3)), 3, 2));
    auto fwd = net.forward_sequence(0, facts);
    for (int t = 0; t < T; ++t) {
      CHECK(fwd.beta_bar.at(t, 0) > 0.0);
      CHECK(fwd.beta_bar.at(t, 0) <= 1.0);
    }
  }
}

TEST_CASE("clean-room oracle: joint forward matches the reference within 1e-10") {
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    const int k_layers = 1 + int(seed % 2);
    Dafnet net(small_config(k_layers), {{3, 2}}, rng);

    const int T = 1 + int(rng.uniform_int(0, 3));
    std::vector<EditSignal> facts;
    std::vector<refflow::Fact> ref_facts;
    for (int t = 0; t < T; ++t) {
      const int b = 1 + int(rng.uniform_int(0, 4));
      facts.push_back(random_signal(rng, b, 3, 2));
      refflow::Fact f;
      f.token_count = b;
      f.u = refflow::make(b, 3);
      f.delta = refflow::make(b, 2);
      for (int i = 0; i < b; ++i) {
        for (int j = 0; j < 3; ++j) f.u[size_t(i)][size_t(j)] = facts.back().u.at(i, j);
        for (int j = 0; j < 2; ++j) f.delta[size_t(i)][size_t(j)] = facts.back().delta.at(i, j);
      }
      ref_facts.push_back(std::move(f));
    }

    refflow::Config rcfg;
    rcfg.k_layers = k_layers;
    rcfg.d_attn = net.config().d_attn;
    rcfg.n_heads = net.config().n_heads;
    rcfg.d_c = net.d_common();
    refflow::Result want = refflow::forward(rcfg, export_params(net), ref_facts, 3, 2);

    auto got = net.forward_sequence(0, facts);
    for (int t = 0; t < T; ++t) {
      CHECK(std::fabs(got.beta_bar.at(t, 0) - want.beta_bar[size_t(t)]) < 1e-10);
      for (int i = 0; i < facts[size_t(t)].u.rows(); ++i)
        for (int j = 0; j < net.d_common(); ++j)
          CHECK(std::fabs(got.h_tilde[size_t(t)].at(i, j) - want.h_tilde[size_t(t)][size_t(i)][size_t(j)]) <
                1e-10);
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 2; ++c)
          CHECK(std::fabs(got.deltas[size_t(t)].at(r, c) - want.deltas[size_t(t)][size_t(r)][size_t(c)]) <
                1e-10);
    }
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 2; ++c)
        CHECK(std::fabs(got.accumulated.at(r, c) - want.accumulated[size_t(r)][size_t(c)]) < 1e-10);
  }
}

TEST_CASE("causality: perturbing a later fact leaves earlier outputs bit-identical") {
  Rng rng(12);
  Dafnet net(small_config(), {{3, 2}}, rng);
  std::vector<EditSignal> facts;
  for (int t = 0; t < 4; ++t) facts.push_back(random_signal(rng, 2, 3, 2));

  auto base = net.forward_sequence(0, facts);
  std::vector<EditSignal> perturbed = facts;
  perturbed[3] = random_signal(rng, 3, 3, 2);
  auto alt = net.forward_sequence(0, perturbed);

  for (int t = 0; t < 3; ++t) {
    CHECK(base.beta_bar.at(t, 0) == alt.beta_bar.at(t, 0));
    for (std::size_t i = 0; i < base.deltas[size_t(t)].numel(); ++i)
      CHECK(base.deltas[size_t(t)].data()[i] == alt.deltas[size_t(t)].data()[i]);
    for (std::size_t i = 0; i < base.h_tilde[size_t(t)].numel(); ++i)
      CHECK(base.h_tilde[size_t(t)].data()[i] == alt.h_tilde[size_t(t)].data()[i]);
  }
  // Accumulated delta over the unchanged prefix also matches.
  Tensor acc3_base = accumulate_closed(
      {base.deltas[0].detach(), base.deltas[1].detach(), base.deltas[2].detach()},
      {base.beta_bar.at(0, 0), base.beta_bar.at(1, 0), base.beta_bar.at(2, 0)});
  Tensor acc3_alt = accumulate_closed(
      {alt.deltas[0].detach(), alt.deltas[1].detach(), alt.deltas[2].detach()},
      {alt.beta_bar.at(0, 0), alt.beta_bar.at(1, 0), alt.beta_bar.at(2, 0)});
  for (std::size_t i = 0; i < acc3_base.numel(); ++i)
    CHECK(acc3_base.data()[i] == acc3_alt.data()[i]);
}

TEST_CASE("incremental edit steps replay the joint forward exactly") {
  Rng rng(13);
  Dafnet net(small_config(), {{3, 2}}, rng);
  std::vector<EditSignal> facts;
  for (int t = 0; t < 5; ++t) facts.push_back(random_signal(rng, 1 + (t % 3), 3, 2));

  auto joint = net.forward_sequence(0, facts);

  std::vector<FactCache> history;
  for (int t = 0; t < 5; ++t) {
    auto step = net.edit_step(0, facts[size_t(t)], history);
    REQUIRE(int(step.beta_bar.size()) == t + 1);
    for (int i = 0; i <= t; ++i) {
      // Visible-history beta matches the joint prefix values bitwise.
      CHECK(step.beta_bar[size_t(i)] ==
            net.forward_sequence(0, std::vector<EditSignal>(facts.begin(), facts.begin() + t + 1))
                .beta_bar.at(i, 0));
    }
    for (std::size_t i = 0; i < step.delta.numel(); ++i)
      CHECK(step.delta.data()[i] == joint.deltas[size_t(t)].data()[i]);
    history.push_back(step.cache);
  }
}

TEST_CASE("K=1 forward equals a single intra layer application") {
  Rng rng(14);
  Dafnet net(small_config(1), {{3, 2}}, rng);
  EditSignal sig = random_signal(rng, 2, 3, 2);
  auto fwd = net.forward_sequence(0, {sig});

  Tensor h = net.remap_signal(sig, 0);
  auto act = net.intra_activations(0, h);
  // With one fact, the fact attention output row equals attention over the
  // single h_bar row; verify h_tilde = h_hat_prime + that row.
  CHECK(fwd.h_tilde[0].rows() == 2);
  // Recompute through the public joint path of a one-layer net with one fact:
  // must agree with the activations-based composition within round-off.
  CHECK(fwd.h_tilde[0].at(0, 0) != 0.0);  // smoke: flows produced something
  Tensor diff = sub(fwd.h_tilde[0], act.h_hat_prime);
  // Every token row receives the same fact-level vector.
  for (int j = 0; j < net.d_common(); ++j)
    CHECK(std::fabs(diff.at(0, j) - diff.at(1, j)) < 1e-12);
}

TEST_CASE("accumulate: closed-form basics") {
  Tensor d1 = Tensor::identity(2);
  Tensor d2 = scale(Tensor::identity(2), 2.0);

  Tensor t1 = accumulate_closed({d1}, {0.7});
  CHECK(t1.at(0, 0) == doctest::Approx(0.7));

  // beta = [0.5, 0.5]: 0.5*0.5*I + 0.5*2I = 1.25 I
  Tensor t2 = accumulate_closed({d1, d2}, {0.5, 0.5});
  CHECK(t2.at(0, 0) == doctest::Approx(1.25).epsilon(1e-15));
  CHECK(t2.at(0, 1) == 0.0);

  // beta_T = 1 wipes all history.
  Tensor t3 = accumulate_closed({d1, d2}, {0.9, 1.0});
  CHECK(t3.at(0, 0) == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("accumulate: recursive equals closed form") {
  Rng rng(15);
  for (int trial = 0; trial < 50; ++trial) {
    const int T = 1 + int(rng.uniform_int(0, 63));
    std::vector<Tensor> deltas;
    std::vector<double> beta;
    for (int t = 0; t < T; ++t) {
      Tensor d = Tensor::zeros(3, 2);
      for (double& v : d.mutable_data()) v = rng.uniform(-1, 1);
      deltas.push_back(d);
      beta.push_back(rng.uniform(1e-6, 1.0));
    }
    Tensor closed = accumulate_closed(deltas, beta);
    Tensor rec = Tensor::zeros(3, 2);
    for (int t = 0; t < T; ++t) rec = accumulate_recursive(rec, deltas[size_t(t)], beta[size_t(t)]);
    CHECK(max_abs_diff(closed, rec) < 1e-10);
  }
}

TEST_CASE("accumulate: beta_t = 0 passes prior delta through") {
  Tensor prev = Tensor::full(2, 2, 3.0);
  Tensor delta = Tensor::full(2, 2, 9.0);
  Tensor out = accumulate_recursive(prev, delta, 0.0);
  for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == 3.0);
}

TEST_CASE("delta rank is bounded by token count") {
  Rng rng(16);
  DafnetConfig cfg = small_config();
  Dafnet net(cfg, {{6, 5}}, rng);
  EditSignal sig = random_signal(rng, 2, 6, 5);  // B=2 < min(6,5)
  auto fwd = net.forward_sequence(0, {sig});
  // Numerical rank via Gram-matrix eigenvalues would be heavy; check instead
  // that every 3x3 minor determinant vanishes (rank <= 2).
  const Tensor& d = fwd.deltas[0];
  auto minor_det = [&](int r0, int r1, int r2, int c0, int c1, int c2) {
    const double a = d.at(r0, c0), b = d.at(r0, c1), c = d.at(r0, c2);
    const double e = d.at(r1, c0), f = d.at(r1, c1), g = d.at(r1, c2);
    const double h = d.at(r2, c0), i = d.at(r2, c1), j = d.at(r2, c2);
    return a * (f * j - g * i) - b * (e * j - g * h) + c * (e * i - f * h);
  };
  const double scale_ref = frobenius_norm(d);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 3; ++c)
      CHECK(std::fabs(minor_det(r, r + 1, r + 2, c, c + 1, c + 2)) <
            1e-10 * std::max(1.0, scale_ref * scale_ref * scale_ref));
}

TEST_CASE("end-to-end differentiability through the full stack") {
  Rng rng(17);
  DafnetConfig cfg = small_config();
  cfg.init_std = 0.05;  // production-scale init keeps FD probes off relu kinks
  Dafnet net(cfg, {{3, 2}}, rng);
  std::vector<EditSignal> facts;
  for (int t = 0; t < 3; ++t) facts.push_back(random_signal(rng, 2, 3, 2));

  auto fn = [&]() {
    auto fwd = net.forward_sequence(0, facts);
    Tensor loss = sum_all(mul(fwd.accumulated, fwd.accumulated));
    return add(loss, sum_all(fwd.beta_bar));
  };
  FdReport rep = finite_diff_check(fn, net.parameters(), 1e-3, 5);
  CHECK(rep.ok);
}

TEST_CASE("checkpoint round-trips parameters bit-exactly") {
  Rng rng(18);
  Dafnet net(small_config(), {{3, 2}, {4, 3}}, rng);
  const std::string path = "/tmp/dafedit_test_dafnet.ckpt";
  net.to_checkpoint().save(path);
  Dafnet loaded = Dafnet::from_checkpoint(Checkpoint::load(path));
  auto pa = net.parameters();
  auto pb = loaded.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    for (std::size_t j = 0; j < pa[i].second.numel(); ++j)
      CHECK(pa[i].second.data()[j] == pb[i].second.data()[j]);
  }
  std::filesystem::remove(path);
}

TEST_CASE("attention score CSV shape") {
  std::vector<AttentionScoreRow> rows = {{1, "1", 1.0}, {1, "avg", 1.0}, {2, "1", 0.25}};
  const std::string csv = attention_scores_csv(rows);
  CHECK(csv == "edit,layer,value\n1,1,1\n1,avg,1\n2,1,0.25\n");
}
