#pragma once

#include <map>

#include "dafedit/lm.hpp"
#include "dafedit/tensor.hpp"

namespace dafedit {

// Editing signal of one editable matrix for one edit sample: for every token
// position i of the teacher-forced pass, u_i is the matrix input row and
// delta_i the gradient of the edit loss w.r.t. the matrix's pre-bias output
// row. The outer products u_i^T delta_i sum to the exact weight gradient.
struct EditSignal {
  Tensor u;        // [B, d_in]
  Tensor delta;    // [B, d_out]
  int token_count = 0;
};

using SignalMap = std::map<int, EditSignal>;

// Captures the editing signal of every editable matrix in one
// forward+backward pass against the model's current effective weights
// (base + overlay). The edit loss is the summed target NLL. The model is
// left untouched.
SignalMap capture_signal(const EditableLM& model, const TokenSeq& sample);

// Same capture, additionally returning the autograd gradient of each
// effective editable weight (used as the oracle for the rank-1 invariant).
SignalMap capture_signal_with_grads(const EditableLM& model, const TokenSeq& sample,
                                    std::map<int, Tensor>* weight_grads);

// Sum of rank-1 outer products u_i^T delta_i -> [d_in, d_out].
Tensor reconstruct_gradient(const EditSignal& signal);

}  // namespace dafedit
