#include "dafedit/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <random>

namespace dafedit {

namespace {

using detail::Node;

std::string shape_str(const Node& n) {
  return "[" + std::to_string(n.rows) + "," + std::to_string(n.cols) + "]";
}

[[noreturn]] void shape_fail(const std::string& op, const std::string& detail) {
  throw ShapeError(op + ": " + detail);
}

std::atomic<uint64_t> g_visit_counter{1};

}  // namespace

// Builds op result nodes and records backward closures when needed.
class OpBuilder {
 public:
  OpBuilder(int rows, int cols) {
    node_ = std::make_shared<Node>();
    node_->rows = rows;
    node_->cols = cols;
    node_->data.assign(std::size_t(rows) * cols, 0.0);
  }

  std::vector<double>& data() { return node_->data; }

  void depend(const Tensor& t) {
    if (t.node_->requires_grad) node_->requires_grad = true;
    node_->parents.push_back(t.node_);
  }

  Tensor finish(std::function<void(Node&)> backward_fn) {
    if (node_->requires_grad) {
      node_->backward_fn = std::move(backward_fn);
    } else {
      node_->parents.clear();
    }
    return Tensor(std::move(node_));
  }

 private:
  std::shared_ptr<Node> node_;
};

Tensor Tensor::zeros(int rows, int cols, bool requires_grad) {
  auto n = std::make_shared<detail::Node>();
  n->rows = rows;
  n->cols = cols;
  n->data.assign(std::size_t(rows) * cols, 0.0);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::full(int rows, int cols, double value, bool requires_grad) {
  Tensor t = zeros(rows, cols, requires_grad);
  std::fill(t.node_->data.begin(), t.node_->data.end(), value);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return full(1, 1, value, requires_grad);
}

Tensor Tensor::identity(int n) {
  Tensor t = zeros(n, n);
  for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

Tensor Tensor::from_data(int rows, int cols, std::vector<double> data, bool requires_grad) {
  if (data.size() != std::size_t(rows) * cols) {
    shape_fail("from_data", "data length " + std::to_string(data.size()) + " vs shape [" +
                                std::to_string(rows) + "," + std::to_string(cols) + "]");
  }
  auto n = std::make_shared<detail::Node>();
  n->rows = rows;
  n->cols = cols;
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

double Tensor::value() const {
  if (numel() != 1) shape_fail("value", "tensor " + shape_str(*node_) + " is not scalar");
  return node_->data[0];
}

void Tensor::zero_grad() {
  node_->grad.assign(node_->data.size(), 0.0);
}

Tensor Tensor::detach() const {
  auto n = std::make_shared<detail::Node>();
  n->rows = node_->rows;
  n->cols = node_->cols;
  n->data = node_->data;
  return Tensor(std::move(n));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.node_->requires_grad = node_->requires_grad;
  return t;
}

void backward(const Tensor& loss) {
  Node* root = loss.node();
  if (root == nullptr || root->numel() != 1) {
    shape_fail("backward", "loss must be a defined scalar");
  }

  const uint64_t stamp = g_visit_counter.fetch_add(1, std::memory_order_relaxed);

  // Iterative post-order DFS over parents; `order` ends child-before-parent,
  // so reverse iteration propagates from the loss down to leaves.
  std::vector<Node*> order;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  root->visit_stamp = stamp;
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx].get();
      ++idx;
      if (p->visit_stamp != stamp) {
        p->visit_stamp = stamp;
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) n->flow.assign(n->numel(), 0.0);
  root->flow[0] = 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
    const bool keep = (n->requires_grad && n->is_leaf()) || n->retain_grad;
    if (keep) {
      if (n->grad.size() != n->numel()) n->grad.assign(n->numel(), 0.0);
      for (std::size_t i = 0; i < n->numel(); ++i) n->grad[i] += n->flow[i];
    }
    n->flow.clear();
    n->flow.shrink_to_fit();
  }
}

// ---- op helpers -------------------------------------------------------------

namespace {

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    shape_fail(op, "shape mismatch " + shape_str(*a.node()) + " vs " + shape_str(*b.node()));
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    shape_fail("matmul", "inner dims " + shape_str(*a.node()) + " x " + shape_str(*b.node()));
  }
  const int m = a.rows(), k = a.cols(), n = b.cols();
  OpBuilder out(m, n);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  double* od = out.data().data();
  for (int i = 0; i < m; ++i) {
    const double* arow = ad + std::size_t(i) * k;
    double* orow = od + std::size_t(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = bd + std::size_t(p) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  out.depend(a);
  out.depend(b);
  return out.finish([m, k, n](Node& self) {
    Node& A = *self.parents[0];
    Node& B = *self.parents[1];
    const double* g = self.flow.data();
    // dA = g . B^T
    if (!A.flow.empty()) {
      for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* grow = g + std::size_t(i) * n;
          const double* brow = B.data.data() + std::size_t(p) * n;
          for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
          A.flow[std::size_t(i) * k + p] += acc;
        }
      }
    }
    // dB = A^T . g
    if (!B.flow.empty()) {
      for (int i = 0; i < m; ++i) {
        const double* arow = A.data.data() + std::size_t(i) * k;
        const double* grow = g + std::size_t(i) * n;
        for (int p = 0; p < k; ++p) {
          const double av = arow[p];
          if (av == 0.0) continue;
          double* brow = B.flow.data() + std::size_t(p) * n;
          for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  const int m = a.rows(), n = a.cols();
  OpBuilder out(n, m);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.data()[std::size_t(j) * m + i] = a.at(i, j);
  out.depend(a);
  return out.finish([m, n](Node& self) {
    Node& A = *self.parents[0];
    if (A.flow.empty()) return;
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < m; ++i)
        A.flow[std::size_t(i) * n + j] += self.flow[std::size_t(j) * m + i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  OpBuilder out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  out.depend(a);
  out.depend(b);
  return out.finish([](Node& self) {
    for (int side = 0; side < 2; ++side) {
      Node& p = *self.parents[side];
      if (p.flow.empty()) continue;
      for (std::size_t i = 0; i < self.numel(); ++i) p.flow[i] += self.flow[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  OpBuilder out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  out.depend(a);
  out.depend(b);
  return out.finish([](Node& self) {
    Node& A = *self.parents[0];
    Node& B = *self.parents[1];
    if (!A.flow.empty())
      for (std::size_t i = 0; i < self.numel(); ++i) A.flow[i] += self.flow[i];
    if (!B.flow.empty())
      for (std::size_t i = 0; i < self.numel(); ++i) B.flow[i] -= self.flow[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  OpBuilder out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  out.depend(a);
  out.depend(b);
  return out.finish([](Node& self) {
    Node& A = *self.parents[0];
    Node& B = *self.parents[1];
    if (!A.flow.empty())
      for (std::size_t i = 0; i < self.numel(); ++i) A.flow[i] += self.flow[i] * B.data[i];
    if (!B.flow.empty())
      for (std::size_t i = 0; i < self.numel(); ++i) B.flow[i] += self.flow[i] * A.data[i];
  });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double c) {
  OpBuilder out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * c;
  out.depend(a);
  return out.finish([c](Node& self) {
    Node& A = *self.parents[0];
    if (A.flow.empty()) return;
    for (std::size_t i = 0; i < self.numel(); ++i) A.flow[i] += self.flow[i] * c;
  });
}

Tensor mul_scalar(const Tensor& s, const Tensor& a) {
  if (s.numel() != 1) shape_fail("mul_scalar", "scale tensor " + shape_str(*s.node()) + " is not scalar");
  const double sv = s.data()[0];
  OpBuilder out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * sv;
  out.depend(s);
  out.depend(a);
  return out.finish([sv](Node& self) {
    Node& S = *self.parents[0];
    Node& A = *self.parents[1];
    if (!S.flow.empty()) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.numel(); ++i) acc += self.flow[i] * A.data[i];
      S.flow[0] += acc;
    }
    if (!A.flow.empty())
      for (std::size_t i = 0; i < self.numel(); ++i) A.flow[i] += self.flow[i] * sv;
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    shape_fail("add_row", "row " + shape_str(*row.node()) + " vs matrix " + shape_str(*a.node()));
  }
  const int m = a.rows(), n = a.cols();
  OpBuilder out(m, n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out.data()[std::size_t(i) * n + j] = a.at(i, j) + row.data()[j];
  out.depend(a);
  out.depend(row);
  return out.finish([m, n](Node& self) {
    Node& A = *self.parents[0];
    Node& R = *self.parents[1];
    if (!A.flow.empty())
      for (std::size_t i = 0; i < self.numel(); ++i) A.flow[i] += self.flow[i];
    if (!R.flow.empty()) {
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) R.flow[j] += self.flow[std::size_t(i) * n + j];
    }
  });
}

Tensor scale_rows(const Tensor& a, const Tensor& s) {
  if (s.cols() != 1 || s.rows() != a.rows()) {
    shape_fail("scale_rows", "scales " + shape_str(*s.node()) + " vs matrix " + shape_str(*a.node()));
  }
  const int m = a.rows(), n = a.cols();
  OpBuilder out(m, n);
  for (int i = 0; i < m; ++i) {
    const double sv = s.data()[i];
    for (int j = 0; j < n; ++j) out.data()[std::size_t(i) * n + j] = a.at(i, j) * sv;
  }
  out.depend(a);
  out.depend(s);
  return out.finish([m, n](Node& self) {
    Node& A = *self.parents[0];
    Node& S = *self.parents[1];
    if (!A.flow.empty()) {
      for (int i = 0; i < m; ++i) {
        const double sv = S.data[i];
        for (int j = 0; j < n; ++j)
          A.flow[std::size_t(i) * n + j] += self.flow[std::size_t(i) * n + j] * sv;
      }
    }
    if (!S.flow.empty()) {
      for (int i = 0; i < m; ++i) {
        double acc = 0.0;
        for (int j = 0; j < n; ++j)
          acc += self.flow[std::size_t(i) * n + j] * A.data[std::size_t(i) * n + j];
        S.flow[i] += acc;
      }
    }
  });
}

Tensor relu(const Tensor& a) {
  OpBuilder out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  out.depend(a);
  return out.finish([](Node& self) {
    Node& A = *self.parents[0];
    if (A.flow.empty()) return;
    for (std::size_t i = 0; i < self.numel(); ++i)
      if (A.data[i] > 0.0) A.flow[i] += self.flow[i];
  });
}

namespace {

// Shared softmax kernel over contiguous strided lines (rows or cols).
void softmax_line(const double* in, double* out, int len, int stride) {
  double mx = in[0];
  for (int i = 1; i < len; ++i) mx = std::max(mx, in[std::size_t(i) * stride]);
  double sum = 0.0;
  for (int i = 0; i < len; ++i) {
    const double e = std::exp(in[std::size_t(i) * stride] - mx);
    out[std::size_t(i) * stride] = e;
    sum += e;
  }
  const double inv = 1.0 / sum;
  for (int i = 0; i < len; ++i) out[std::size_t(i) * stride] *= inv;
}

void softmax_line_backward(const double* y, const double* g, double* dst, int len, int stride) {
  double dot = 0.0;
  for (int i = 0; i < len; ++i)
    dot += y[std::size_t(i) * stride] * g[std::size_t(i) * stride];
  for (int i = 0; i < len; ++i) {
    const std::size_t k = std::size_t(i) * stride;
    dst[k] += y[k] * (g[k] - dot);
  }
}

}  // namespace

Tensor softmax_rows(const Tensor& a) {
  const int m = a.rows(), n = a.cols();
  OpBuilder out(m, n);
  for (int i = 0; i < m; ++i)
    softmax_line(a.data().data() + std::size_t(i) * n, out.data().data() + std::size_t(i) * n, n, 1);
  out.depend(a);
  return out.finish([m, n](Node& self) {
    Node& A = *self.parents[0];
    if (A.flow.empty()) return;
    for (int i = 0; i < m; ++i)
      softmax_line_backward(self.data.data() + std::size_t(i) * n,
                            self.flow.data() + std::size_t(i) * n,
                            A.flow.data() + std::size_t(i) * n, n, 1);
  });
}

Tensor softmax_cols(const Tensor& a) {
  const int m = a.rows(), n = a.cols();
  OpBuilder out(m, n);
  for (int j = 0; j < n; ++j)
    softmax_line(a.data().data() + j, out.data().data() + j, m, n);
  out.depend(a);
  return out.finish([m, n](Node& self) {
    Node& A = *self.parents[0];
    if (A.flow.empty()) return;
    for (int j = 0; j < n; ++j)
      softmax_line_backward(self.data.data() + j, self.flow.data() + j, A.flow.data() + j, m, n);
  });
}

Tensor log_softmax_rows(const Tensor& a) {
  const int m = a.rows(), n = a.cols();
  OpBuilder out(m, n);
  for (int i = 0; i < m; ++i) {
    const double* in = a.data().data() + std::size_t(i) * n;
    double* o = out.data().data() + std::size_t(i) * n;
    double mx = in[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) sum += std::exp(in[j] - mx);
    const double lse = mx + std::log(sum);
    for (int j = 0; j < n; ++j) o[j] = in[j] - lse;
  }
  out.depend(a);
  return out.finish([m, n](Node& self) {
    Node& A = *self.parents[0];
    if (A.flow.empty()) return;
    for (int i = 0; i < m; ++i) {
      const double* y = self.data.data() + std::size_t(i) * n;
      const double* g = self.flow.data() + std::size_t(i) * n;
      double gsum = 0.0;
      for (int j = 0; j < n; ++j) gsum += g[j];
      double* dst = A.flow.data() + std::size_t(i) * n;
      for (int j = 0; j < n; ++j) dst[j] += g[j] - std::exp(y[j]) * gsum;
    }
  });
}

Tensor sum_all(const Tensor& a) {
  OpBuilder out(1, 1);
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  out.data()[0] = acc;
  out.depend(a);
  return out.finish([](Node& self) {
    Node& A = *self.parents[0];
    if (A.flow.empty()) return;
    const double g = self.flow[0];
    for (std::size_t i = 0; i < A.flow.size(); ++i) A.flow[i] += g;
  });
}

Tensor mean_all(const Tensor& a) {
  const double inv = 1.0 / double(a.numel());
  return scale(sum_all(a), inv);
}

Tensor sum_axis0(const Tensor& a) {
  const int m = a.rows(), n = a.cols();
  OpBuilder out(1, n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.data()[j] += a.at(i, j);
  out.depend(a);
  return out.finish([m, n](Node& self) {
    Node& A = *self.parents[0];
    if (A.flow.empty()) return;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) A.flow[std::size_t(i) * n + j] += self.flow[j];
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) shape_fail("concat_rows", "no inputs");
  const int n = parts[0].cols();
  int m = 0;
  for (const Tensor& p : parts) {
    if (p.cols() != n) shape_fail("concat_rows", "column mismatch " + shape_str(*p.node()));
    m += p.rows();
  }
  OpBuilder out(m, n);
  int r = 0;
  for (const Tensor& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + std::size_t(r) * n);
    r += p.rows();
    out.depend(p);
  }
  return out.finish([n](Node& self) {
    int r0 = 0;
    for (auto& pp : self.parents) {
      Node& p = *pp;
      if (!p.flow.empty()) {
        for (std::size_t i = 0; i < p.numel(); ++i)
          p.flow[i] += self.flow[std::size_t(r0) * n + i];
      }
      r0 += p.rows;
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) shape_fail("concat_cols", "no inputs");
  const int m = parts[0].rows();
  int n = 0;
  for (const Tensor& p : parts) {
    if (p.rows() != m) shape_fail("concat_cols", "row mismatch " + shape_str(*p.node()));
    n += p.cols();
  }
  OpBuilder out(m, n);
  int c = 0;
  for (const Tensor& p : parts) {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < p.cols(); ++j)
        out.data()[std::size_t(i) * n + c + j] = p.at(i, j);
    c += p.cols();
    out.depend(p);
  }
  return out.finish([m, n](Node& self) {
    int c0 = 0;
    for (auto& pp : self.parents) {
      Node& p = *pp;
      if (!p.flow.empty()) {
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < p.cols; ++j)
            p.flow[std::size_t(i) * p.cols + j] += self.flow[std::size_t(i) * n + c0 + j];
      }
      c0 += p.cols;
    }
  });
}

Tensor slice_rows(const Tensor& a, int r0, int r1) {
  if (r0 < 0 || r1 > a.rows() || r0 >= r1) {
    shape_fail("slice_rows", "range [" + std::to_string(r0) + "," + std::to_string(r1) +
                                 ") of " + shape_str(*a.node()));
  }
  const int n = a.cols(), m = r1 - r0;
  OpBuilder out(m, n);
  std::copy(a.data().begin() + std::size_t(r0) * n, a.data().begin() + std::size_t(r1) * n,
            out.data().begin());
  out.depend(a);
  return out.finish([r0, n](Node& self) {
    Node& A = *self.parents[0];
    if (A.flow.empty()) return;
    for (std::size_t i = 0; i < self.numel(); ++i)
      A.flow[std::size_t(r0) * n + i] += self.flow[i];
  });
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
  if (c0 < 0 || c1 > a.cols() || c0 >= c1) {
    shape_fail("slice_cols", "range [" + std::to_string(c0) + "," + std::to_string(c1) +
                                 ") of " + shape_str(*a.node()));
  }
  const int m = a.rows(), n = a.cols(), w = c1 - c0;
  OpBuilder out(m, w);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j)
      out.data()[std::size_t(i) * w + j] = a.at(i, c0 + j);
  out.depend(a);
  return out.finish([m, n, c0, w](Node& self) {
    Node& A = *self.parents[0];
    if (A.flow.empty()) return;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j)
        A.flow[std::size_t(i) * n + c0 + j] += self.flow[std::size_t(i) * w + j];
  });
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  const int n = table.cols();
  for (int id : ids) {
    if (id < 0 || id >= table.rows()) {
      shape_fail("gather_rows", "row id " + std::to_string(id) + " out of " + shape_str(*table.node()));
    }
  }
  OpBuilder out(int(ids.size()), n);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy(table.data().begin() + std::size_t(ids[i]) * n,
              table.data().begin() + std::size_t(ids[i] + 1) * n,
              out.data().begin() + i * n);
  out.depend(table);
  return out.finish([ids, n](Node& self) {
    Node& T = *self.parents[0];
    if (T.flow.empty()) return;
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (int j = 0; j < n; ++j)
        T.flow[std::size_t(ids[i]) * n + j] += self.flow[i * n + j];
  });
}

Tensor select_sum(const Tensor& a, const std::vector<std::pair<int, int>>& coords) {
  OpBuilder out(1, 1);
  double acc = 0.0;
  for (auto [r, c] : coords) {
    if (r < 0 || r >= a.rows() || c < 0 || c >= a.cols()) {
      shape_fail("select_sum", "coord (" + std::to_string(r) + "," + std::to_string(c) +
                                   ") out of " + shape_str(*a.node()));
    }
    acc += a.at(r, c);
  }
  out.data()[0] = acc;
  out.depend(a);
  const int ncols = a.cols();
  return out.finish([coords, ncols](Node& self) {
    Node& A = *self.parents[0];
    if (A.flow.empty()) return;
    for (auto [r, c] : coords) A.flow[std::size_t(r) * ncols + c] += self.flow[0];
  });
}

Tensor diag_col(const Tensor& a) {
  if (a.rows() != a.cols()) shape_fail("diag_col", "matrix " + shape_str(*a.node()) + " not square");
  const int n = a.rows();
  OpBuilder out(n, 1);
  for (int i = 0; i < n; ++i) out.data()[i] = a.at(i, i);
  out.depend(a);
  return out.finish([n](Node& self) {
    Node& A = *self.parents[0];
    if (A.flow.empty()) return;
    for (int i = 0; i < n; ++i) A.flow[std::size_t(i) * n + i] += self.flow[i];
  });
}

Tensor pick(const Tensor& a, int r, int c) {
  return select_sum(a, {{r, c}});
}

Tensor rmsnorm_rows(const Tensor& x, const Tensor& gain, double eps) {
  if (gain.rows() != 1 || gain.cols() != x.cols()) {
    shape_fail("rmsnorm_rows", "gain " + shape_str(*gain.node()) + " vs " + shape_str(*x.node()));
  }
  const int m = x.rows(), n = x.cols();
  OpBuilder out(m, n);
  std::vector<double> inv_rms(m);
  for (int i = 0; i < m; ++i) {
    double ss = 0.0;
    for (int j = 0; j < n; ++j) ss += x.at(i, j) * x.at(i, j);
    inv_rms[i] = 1.0 / std::sqrt(ss / n + eps);
    for (int j = 0; j < n; ++j)
      out.data()[std::size_t(i) * n + j] = x.at(i, j) * gain.data()[j] * inv_rms[i];
  }
  out.depend(x);
  out.depend(gain);
  return out.finish([m, n, inv_rms](Node& self) {
    Node& X = *self.parents[0];
    Node& G = *self.parents[1];
    for (int i = 0; i < m; ++i) {
      const double ir = inv_rms[i];
      const double* xr = X.data.data() + std::size_t(i) * n;
      const double* g = self.flow.data() + std::size_t(i) * n;
      if (!X.flow.empty()) {
        // d x_j = g_j gain_j ir - x_j ir^3 / n * sum_i(g_i gain_i x_i)
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += g[j] * G.data[j] * xr[j];
        const double coef = dot * ir * ir * ir / n;
        double* dst = X.flow.data() + std::size_t(i) * n;
        for (int j = 0; j < n; ++j) dst[j] += g[j] * G.data[j] * ir - xr[j] * coef;
      }
      if (!G.flow.empty()) {
        for (int j = 0; j < n; ++j) G.flow[j] += g[j] * xr[j] * ir;
      }
    }
  });
}

double frobenius_norm(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v * v;
  return std::sqrt(acc);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  check_same_shape("max_abs_diff", a, b);
  double mx = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    mx = std::max(mx, std::fabs(a.data()[i] - b.data()[i]));
  return mx;
}

// ---- Adam -------------------------------------------------------------------

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(params_[i].numel(), 0.0);
    v_[i].assign(params_[i].numel(), 0.0);
  }
}

void Adam::step() {
  ++step_count_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_count_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_count_));
  for (std::size_t p = 0; p < params_.size(); ++p) {
    Tensor& t = params_[p];
    if (!t.has_grad()) {
      throw std::runtime_error("adam: parameter " + std::to_string(p) +
                               " has no gradient (call zero_grad before backward)");
    }
    const std::vector<double>& g = t.grad();
    std::vector<double>& d = t.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      m_[p][i] = cfg_.beta1 * m_[p][i] + (1.0 - cfg_.beta1) * g[i];
      v_[p][i] = cfg_.beta2 * v_[p][i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m_[p][i] / bc1;
      const double vhat = v_[p][i] / bc2;
      d[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (Tensor& t : params_) t.zero_grad();
}

std::vector<std::pair<std::string, std::vector<double>>> Adam::state_arrays() const {
  std::vector<std::pair<std::string, std::vector<double>>> out;
  out.emplace_back("step", std::vector<double>{double(step_count_)});
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.emplace_back("m" + std::to_string(i), m_[i]);
    out.emplace_back("v" + std::to_string(i), v_[i]);
  }
  return out;
}

void Adam::load_state_arrays(
    const std::vector<std::pair<std::string, std::vector<double>>>& arrays) {
  for (const auto& [name, values] : arrays) {
    if (name == "step") {
      step_count_ = int64_t(values.at(0));
      continue;
    }
    const std::size_t idx = std::stoul(name.substr(1));
    if (idx >= params_.size() || values.size() != params_[idx].numel()) {
      throw std::runtime_error("adam: state array " + name + " does not match parameters");
    }
    if (name[0] == 'm') m_[idx] = values;
    else if (name[0] == 'v') v_[idx] = values;
  }
}

// ---- finite differences ------------------------------------------------------

FdReport finite_diff_check(const std::function<Tensor()>& fn,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           double tolerance, int max_entries_per_block, uint64_t seed,
                           double h) {
  FdReport report;

  std::vector<std::pair<std::string, Tensor>> blocks(params);  // shares nodes
  for (auto& [name, p] : blocks) p.zero_grad();
  Tensor loss = fn();
  backward(loss);

  std::mt19937_64 rng(seed);
  bool any_nan = std::isnan(loss.value());
  double global_max = 0.0;

  for (auto& [name, p] : blocks) {
    FdBlockReport block;
    block.name = name;

    std::vector<std::size_t> entries(p.numel());
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i] = i;
    if (max_entries_per_block > 0 && entries.size() > std::size_t(max_entries_per_block)) {
      // Fisher-Yates prefix shuffle, keep first max_entries_per_block.
      for (int i = 0; i < max_entries_per_block; ++i) {
        std::size_t j = i + rng() % (entries.size() - i);
        std::swap(entries[i], entries[j]);
      }
      entries.resize(max_entries_per_block);
    }

    std::vector<double>& data = p.mutable_data();
    for (std::size_t idx : entries) {
      const auto probe = [&](double step) -> double {
        const double orig = data[idx];
        data[idx] = orig + step;
        const double fp = fn().value();
        data[idx] = orig - step;
        const double fm = fn().value();
        data[idx] = orig;
        if (std::isnan(fp) || std::isnan(fm)) {
          block.nan_detected = true;
          return std::nan("");
        }
        return (fp - fm) / (2.0 * step);
      };
      const double ad = p.grad()[idx];
      double fd = probe(h);
      if (std::isnan(fd)) continue;
      double err = std::fabs(fd - ad) / std::max({std::fabs(fd), std::fabs(ad), 1e-8});
      if (err > tolerance) {
        // A smaller step disambiguates relu-kink artifacts, a larger one
        // cancellation noise on near-zero derivatives; real mismatches stay
        // large at every step size.
        for (const double step : {h / 16.0, h * 16.0}) {
          const double fd2 = probe(step);
          if (std::isnan(fd2)) continue;
          err = std::min(err,
                         std::fabs(fd2 - ad) / std::max({std::fabs(fd2), std::fabs(ad), 1e-8}));
        }
      }
      block.max_rel_err = std::max(block.max_rel_err, err);
    }
    any_nan = any_nan || block.nan_detected;
    global_max = std::max(global_max, block.max_rel_err);
    report.blocks.push_back(std::move(block));
  }

  report.max_rel_err = global_max;
  report.ok = !any_nan && global_max <= tolerance;
  return report;
}

}  // namespace dafedit
