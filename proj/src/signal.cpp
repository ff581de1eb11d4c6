#include "dafedit/signal.hpp"

#include <stdexcept>

namespace dafedit {

SignalMap capture_signal(const EditableLM& model, const TokenSeq& sample) {
  return capture_signal_with_grads(model, sample, nullptr);
}

SignalMap capture_signal_with_grads(const EditableLM& model, const TokenSeq& sample,
                                    std::map<int, Tensor>* weight_grads) {
  if (sample.target.empty()) throw std::runtime_error("capture_signal: sample has no target tokens");

  // Clone the effective editable weights as grad-tracked leaves so the
  // backward pass reaches the pre-bias FFN outputs; the model itself stays
  // const.
  std::map<int, Tensor> override_weights;
  const auto mats = model.editable_matrices();
  for (std::size_t id = 0; id < mats.size(); ++id) {
    Tensor w_eff = model.base_weight(int(id)).detach();
    if (model.has_overlay(int(id))) w_eff = add(w_eff, model.overlay(int(id)));
    w_eff.set_requires_grad(true);
    w_eff.zero_grad();
    override_weights.emplace(int(id), w_eff);
  }

  ForwardTrace trace;
  const std::vector<int> ids = sample.full();
  Tensor logp = log_softmax_rows(model.forward_logits(ids, &override_weights, &trace));
  std::vector<std::pair<int, int>> coords;
  const int p = int(sample.prompt.size());
  for (std::size_t i = 0; i < sample.target.size(); ++i) {
    coords.emplace_back(p - 1 + int(i), sample.target[i]);
  }
  // Summed (not averaged) NLL, so the rank-1 terms add up to the plain
  // gradient.
  Tensor loss = neg(select_sum(logp, coords));
  backward(loss);

  SignalMap signals;
  for (std::size_t id = 0; id < mats.size(); ++id) {
    const Tensor& u = trace.ffn_input.at(int(id));
    const Tensor& z = trace.ffn_preact.at(int(id));
    EditSignal sig;
    sig.token_count = u.rows();
    sig.u = u.detach();
    sig.delta = Tensor::from_data(z.rows(), z.cols(), z.grad());
    signals.emplace(int(id), std::move(sig));
    if (weight_grads != nullptr) {
      const Tensor& w = override_weights.at(int(id));
      weight_grads->emplace(int(id), Tensor::from_data(w.rows(), w.cols(), w.grad()));
    }
  }
  return signals;
}

Tensor reconstruct_gradient(const EditSignal& signal) {
  return matmul(transpose(signal.u), signal.delta);
}

}  // namespace dafedit
