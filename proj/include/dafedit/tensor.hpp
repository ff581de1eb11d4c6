#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dafedit {

// Thrown by every op on non-conformable inputs. The message names the op and
// the offending shapes.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

struct Node {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;
  // Persistent gradient, populated by backward() for leaves with
  // requires_grad and for nodes marked retain_grad. Accumulates across
  // backward() calls until grad_clear().
  std::vector<double> grad;
  // Transient per-backward flow buffer.
  std::vector<double> flow;
  bool requires_grad = false;
  bool retain_grad = false;
  uint64_t visit_stamp = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::size_t numel() const { return data.size(); }
  bool is_leaf() const { return parents.empty(); }
};

}  // namespace detail

// Dense 2-D tensor of 64-bit reals with reverse-mode autodiff. Scalars are
// [1,1], row vectors [1,n], column vectors [n,1]. The graph is rebuilt on
// every forward pass; ops record backward closures only when some input
// requires grad.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(int rows, int cols, bool requires_grad = false);
  static Tensor full(int rows, int cols, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor identity(int n);
  static Tensor from_data(int rows, int cols, std::vector<double> data,
                          bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  int rows() const { return node_->rows; }
  int cols() const { return node_->cols; }
  std::size_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_->requires_grad; }

  const std::vector<double>& data() const { return node_->data; }
  std::vector<double>& mutable_data() { return node_->data; }
  double at(int r, int c) const { return node_->data[std::size_t(r) * node_->cols + c]; }
  double& at(int r, int c) { return node_->data[std::size_t(r) * node_->cols + c]; }
  // Scalar value; throws unless numel()==1.
  double value() const;

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const { return node_->grad; }
  double grad_at(int r, int c) const { return node_->grad[std::size_t(r) * node_->cols + c]; }
  void zero_grad();
  void clear_grad() { node_->grad.clear(); }

  // Keep the backward flow of this (possibly interior) node in .grad.
  void set_retain_grad(bool on = true) { node_->retain_grad = on; }
  // Only meaningful on leaves, before the tensor enters a graph.
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  // Value copy detached from any graph.
  Tensor detach() const;
  // Deep copy preserving requires_grad, detached from any graph.
  Tensor clone() const;

  detail::Node* node() const { return node_.get(); }
  std::shared_ptr<detail::Node> shared_node() const { return node_; }

  friend void backward(const Tensor& loss);
  friend class OpBuilder;

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;
};

// Populates .grad on every requires_grad leaf (and retain_grad node)
// reachable from `loss`, accumulating into existing values. `loss` must be a
// scalar on a recorded graph. Deterministic: identical graphs give
// bit-identical gradients.
void backward(const Tensor& loss);

// ---- forward ops -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
// Broadcast scalar tensor s ([1,1]) over all entries of a.
Tensor mul_scalar(const Tensor& s, const Tensor& a);
// Broadcast row vector [1,n] over every row of a [m,n].
Tensor add_row(const Tensor& a, const Tensor& row);
// Scale row i of a by column vector entry s[i,0].
Tensor scale_rows(const Tensor& a, const Tensor& s);
Tensor relu(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
Tensor softmax_cols(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
// Sum over rows: [m,n] -> [1,n].
Tensor sum_axis0(const Tensor& a);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, int r0, int r1);
Tensor slice_cols(const Tensor& a, int c0, int c1);
// Rows of table indexed by ids: [V,d] x ids -> [len(ids),d]. Backward
// scatter-adds into the table rows.
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);
// Sum of selected entries; duplicate coordinates accumulate.
Tensor select_sum(const Tensor& a, const std::vector<std::pair<int, int>>& coords);
// Diagonal of a square matrix as a column vector [n,1].
Tensor diag_col(const Tensor& a);
// Single entry as a scalar tensor, differentiable.
Tensor pick(const Tensor& a, int r, int c);
// Row-wise RMS normalization with learnable gain [1,n]:
// y[i,j] = x[i,j] * gain[j] / sqrt(mean_j(x[i,j]^2) + eps)
Tensor rmsnorm_rows(const Tensor& x, const Tensor& gain, double eps = 1e-6);

double frobenius_norm(const Tensor& a);
// Max |a-b| over entries; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

// ---- Adam ------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Standard Adam with bias correction over a fixed parameter list.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg);

  // One update from the params' current .grad. Throws if a param has no grad
  // buffer (zero_grad() allocates them).
  void step();
  void zero_grad();
  int64_t step_count() const { return step_count_; }
  AdamConfig& config() { return cfg_; }

  // Moment state round-trip for resumable training.
  std::vector<std::pair<std::string, std::vector<double>>> state_arrays() const;
  void load_state_arrays(const std::vector<std::pair<std::string, std::vector<double>>>& arrays);

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  AdamConfig cfg_;
  int64_t step_count_ = 0;
};

// ---- finite differences ----------------------------------------------------

struct FdBlockReport {
  std::string name;
  double max_rel_err = 0.0;
  bool nan_detected = false;
};

struct FdReport {
  std::vector<FdBlockReport> blocks;
  double max_rel_err = 0.0;
  bool ok = false;  // no NaNs and max_rel_err <= tolerance
};

// Compares autodiff gradients of fn() against central finite differences
// (step `h`) for every named parameter block. fn must rebuild the scalar loss
// from the params' current values on each call. When max_entries_per_block>0,
// a seeded random subset of entries is probed per block; 0 probes all.
FdReport finite_diff_check(const std::function<Tensor()>& fn,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           double tolerance, int max_entries_per_block = 0,
                           uint64_t seed = 17, double h = 1e-5);

}  // namespace dafedit
