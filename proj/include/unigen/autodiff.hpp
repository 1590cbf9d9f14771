// Reverse-mode differentiation over a recorded computation.
//
// A Graph owns every intermediate value produced during a forward pass. When
// recording is on, each op also stores a closure that pushes the output
// gradient back to its inputs; Graph::backward replays those closures in
// reverse creation order. With recording off the same ops only compute values.
#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cassert>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <unordered_map>
#include <vector>

#include "unigen/params.hpp"
#include "unigen/tensor.hpp"

namespace unigen {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline ConstMatMap as_mat(const Tensor& t) { return {t.data(), Eigen::Index(t.rows()), Eigen::Index(t.cols())}; }
inline MatMap as_mat(Tensor& t) { return {t.data(), Eigen::Index(t.rows()), Eigen::Index(t.cols())}; }

class Graph;

/// Handle to a value recorded in a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Graph {
 public:
  using Backward = std::function<void(Graph&, std::size_t self)>;

  explicit Graph(bool record = true) : record_(record) { nodes_.reserve(1024); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Tensor t) { return push(std::move(t), nullptr, false, {}); }

  /// A leaf whose gradient is tracked, used to differentiate w.r.t. inputs.
  Var input(Tensor t) { return push(std::move(t), nullptr, record_, {}); }

  /// Leaf bound to a stored parameter. The store must outlive the graph and
  /// stay unmodified while the graph is alive.
  Var param(const ParamStore& store, ParamId id) {
    auto it = param_nodes_.find(id.index);
    if (it != param_nodes_.end()) return Var{this, it->second};
    Var v = push(Tensor{}, &store.value(id), record_, {});
    nodes_[v.id].param = id;
    param_nodes_.emplace(id.index, v.id);
    return v;
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }
  const Tensor& value(Var v) const { return value(v.id); }

  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Appends an op result. `op` names the operation in error messages.
  Var emit(const char* op, Tensor value, std::initializer_list<Var> parents, Backward backward) {
    require_finite(op, value);
    bool needs = false;
    if (record_)
      for (Var p : parents) needs = needs || nodes_[p.id].requires_grad;
    return push(std::move(value), nullptr, needs, needs ? std::move(backward) : Backward{});
  }

  Var emit(const char* op, Tensor value, const std::vector<Var>& parents, Backward backward) {
    require_finite(op, value);
    bool needs = false;
    if (record_)
      for (Var p : parents) needs = needs || nodes_[p.id].requires_grad;
    return push(std::move(value), nullptr, needs, needs ? std::move(backward) : Backward{});
  }

  /// Gradient accumulator for node `id`, zero-allocated on first use.
  /// Returns nullptr when the node does not take part in differentiation.
  Tensor* grad_sink(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty() && value(id).size() != 0) n.grad = Tensor(value(id).shape());
    return &n.grad;
  }

  const Tensor& grad_of(std::size_t id) const { return nodes_[id].grad; }

  /// Gradient of the last backward pass w.r.t. `v`, or nullptr if none flowed.
  const Tensor* grad(Var v) const {
    const Tensor& g = nodes_[v.id].grad;
    return g.empty() ? nullptr : &g;
  }

  void backward(Var loss) {
    if (!record_) throw std::logic_error("backward on a graph built without recording");
    if (value(loss).size() != 1) throw ShapeError("backward: loss must be a scalar, got " + shape_str(value(loss).shape()));
    for (auto& n : nodes_) n.grad = Tensor{};
    Tensor* seed = grad_sink(loss.id);
    if (!seed) return;
    (*seed)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, i);
    }
  }

  GradientRecord param_grads() const {
    GradientRecord rec;
    for (const auto& n : nodes_)
      if (n.param && !n.grad.empty()) rec.accumulate(*n.param, n.grad);
    return rec;
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    std::optional<ParamId> param;
    Backward backward;
  };

  Var push(Tensor value, const Tensor* external, bool requires_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.external = external;
    n.requires_grad = requires_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  bool record_;
  std::vector<Node> nodes_;
  std::unordered_map<std::size_t, std::size_t> param_nodes_;
};

inline const Tensor& Var::value() const { return graph->value(*this); }

namespace detail {

inline Graph& same_graph(Var a, Var b) {
  if (a.graph != b.graph) throw std::invalid_argument("operands belong to different graphs");
  return *a.graph;
}

inline void require_row_vector(const char* op, const Tensor& m, const Tensor& v) {
  if (v.rows() != 1 || v.cols() != m.cols())
    throw ShapeError(std::string(op) + ": expected [1x" + std::to_string(m.cols()) + "] row vector, got " + shape_str(v.shape()) +
                     " against " + shape_str(m.shape()));
}

inline void add_into(Tensor* dst, const Tensor& src) {
  if (!dst) return;
  for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(Var a, Var b) {
  Graph& g = detail::same_graph(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.cols() != B.rows()) throw ShapeError("matmul: shape mismatch " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
  Tensor C = Tensor::zeros(A.rows(), B.cols());
  as_mat(C).noalias() = as_mat(A) * as_mat(B);
  return g.emit("matmul", std::move(C), {a, b}, [a = a.id, b = b.id](Graph& g, std::size_t self) {
    const Tensor& dC = g.grad_of(self);
    if (Tensor* dA = g.grad_sink(a)) as_mat(*dA).noalias() += as_mat(dC) * as_mat(g.value(b)).transpose();
    if (Tensor* dB = g.grad_sink(b)) as_mat(*dB).noalias() += as_mat(g.value(a)).transpose() * as_mat(dC);
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b) {
  Graph& g = detail::same_graph(a, b);
  require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  return g.emit("add", std::move(out), {a, b}, [a = a.id, b = b.id](Graph& g, std::size_t self) {
    detail::add_into(g.grad_sink(a), g.grad_of(self));
    detail::add_into(g.grad_sink(b), g.grad_of(self));
  });
}

inline Var sub(Var a, Var b) {
  Graph& g = detail::same_graph(a, b);
  require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
  return g.emit("sub", std::move(out), {a, b}, [a = a.id, b = b.id](Graph& g, std::size_t self) {
    const Tensor& d = g.grad_of(self);
    detail::add_into(g.grad_sink(a), d);
    if (Tensor* db = g.grad_sink(b))
      for (std::size_t i = 0; i < d.size(); ++i) (*db)[i] -= d[i];
  });
}

inline Var mul(Var a, Var b) {
  Graph& g = detail::same_graph(a, b);
  require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  return g.emit("mul", std::move(out), {a, b}, [a = a.id, b = b.id](Graph& g, std::size_t self) {
    const Tensor& d = g.grad_of(self);
    if (Tensor* da = g.grad_sink(a)) {
      const Tensor& B = g.value(b);
      for (std::size_t i = 0; i < d.size(); ++i) (*da)[i] += d[i] * B[i];
    }
    if (Tensor* db = g.grad_sink(b)) {
      const Tensor& A = g.value(a);
      for (std::size_t i = 0; i < d.size(); ++i) (*db)[i] += d[i] * A[i];
    }
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= s;
  return a.graph->emit("scale", std::move(out), {a}, [a = a.id, s](Graph& g, std::size_t self) {
    const Tensor& d = g.grad_of(self);
    if (Tensor* da = g.grad_sink(a))
      for (std::size_t i = 0; i < d.size(); ++i) (*da)[i] += s * d[i];
  });
}

/// Adds a [1 x d] row vector to every row of an [n x d] matrix.
inline Var add_row(Var m, Var v) {
  Graph& g = detail::same_graph(m, v);
  const Tensor& V = v.value();
  detail::require_row_vector("add_row", m.value(), V);
  Tensor out = m.value();
  const std::size_t n = out.rows(), d = out.cols();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] += V[c];
  return g.emit("add_row", std::move(out), {m, v}, [m = m.id, v = v.id](Graph& g, std::size_t self) {
    const Tensor& D = g.grad_of(self);
    detail::add_into(g.grad_sink(m), D);
    if (Tensor* dv = g.grad_sink(v)) {
      const std::size_t d = D.cols();
      for (std::size_t r = 0; r < D.rows(); ++r)
        for (std::size_t c = 0; c < d; ++c) (*dv)[c] += D[r * d + c];
    }
  });
}

/// Multiplies every row of an [n x d] matrix elementwise by a [1 x d] row vector.
inline Var mul_row(Var m, Var v) {
  Graph& g = detail::same_graph(m, v);
  const Tensor& V = v.value();
  detail::require_row_vector("mul_row", m.value(), V);
  Tensor out = m.value();
  const std::size_t n = out.rows(), d = out.cols();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] *= V[c];
  return g.emit("mul_row", std::move(out), {m, v}, [m = m.id, v = v.id](Graph& g, std::size_t self) {
    const Tensor& D = g.grad_of(self);
    const std::size_t d = D.cols();
    if (Tensor* dm = g.grad_sink(m)) {
      const Tensor& V = g.value(v);
      for (std::size_t r = 0; r < D.rows(); ++r)
        for (std::size_t c = 0; c < d; ++c) (*dm)[r * d + c] += D[r * d + c] * V[c];
    }
    if (Tensor* dv = g.grad_sink(v)) {
      const Tensor& M = g.value(m);
      for (std::size_t r = 0; r < D.rows(); ++r)
        for (std::size_t c = 0; c < d; ++c) (*dv)[c] += D[r * d + c] * M[r * d + c];
    }
  });
}

inline Var gelu(Var a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  Tensor out = a.value();
  for (double& x : out.values()) x = 0.5 * x * (1.0 + std::tanh(k * (x + c * x * x * x)));
  return a.graph->emit("gelu", std::move(out), {a}, [a = a.id](Graph& g, std::size_t self) {
    Tensor* da = g.grad_sink(a);
    if (!da) return;
    const Tensor& X = g.value(a);
    const Tensor& D = g.grad_of(self);
    for (std::size_t i = 0; i < X.size(); ++i) {
      const double x = X[i];
      const double t = std::tanh(k * (x + c * x * x * x));
      const double dt = (1.0 - t * t) * k * (1.0 + 3.0 * c * x * x);
      (*da)[i] += D[i] * (0.5 * (1.0 + t) + 0.5 * x * dt);
    }
  });
}

inline Var silu(Var a) {
  Tensor out = a.value();
  for (double& x : out.values()) x = x / (1.0 + std::exp(-x));
  return a.graph->emit("silu", std::move(out), {a}, [a = a.id](Graph& g, std::size_t self) {
    Tensor* da = g.grad_sink(a);
    if (!da) return;
    const Tensor& X = g.value(a);
    const Tensor& D = g.grad_of(self);
    for (std::size_t i = 0; i < X.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-X[i]));
      (*da)[i] += D[i] * s * (1.0 + X[i] * (1.0 - s));
    }
  });
}

// ---------------------------------------------------------------------------
// Row-wise normalizations

inline void softmax_rows_inplace(Tensor& t) {
  const std::size_t d = t.cols();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    double* row = t.data() + r * d;
    double mx = row[0];
    for (std::size_t c = 1; c < d; ++c) mx = std::max(mx, row[c]);
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      row[c] = std::exp(row[c] - mx);
      s += row[c];
    }
    const double inv = 1.0 / s;
    for (std::size_t c = 0; c < d; ++c) row[c] *= inv;
  }
}

inline Var softmax_rows(Var a) {
  Tensor out = a.value();
  softmax_rows_inplace(out);
  return a.graph->emit("softmax_rows", std::move(out), {a}, [a = a.id](Graph& g, std::size_t self) {
    Tensor* da = g.grad_sink(a);
    if (!da) return;
    const Tensor& P = g.value(self);
    const Tensor& D = g.grad_of(self);
    const std::size_t d = P.cols();
    for (std::size_t r = 0; r < P.rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += D[r * d + c] * P[r * d + c];
      for (std::size_t c = 0; c < d; ++c) (*da)[r * d + c] += P[r * d + c] * (D[r * d + c] - s);
    }
  });
}

/// Per-row normalization to zero mean and unit variance, without affine terms.
inline Var layer_norm(Var a, double eps = 1e-6) {
  const Tensor& X = a.value();
  const std::size_t n = X.rows(), d = X.cols();
  Tensor out(X.shape());
  auto inv_std = std::make_shared<std::vector<double>>(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* x = X.data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += x[c];
    mu /= double(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (x[c] - mu) * (x[c] - mu);
    var /= double(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = (x[c] - mu) * is;
  }
  return a.graph->emit("layer_norm", std::move(out), {a}, [a = a.id, inv_std](Graph& g, std::size_t self) {
    Tensor* da = g.grad_sink(a);
    if (!da) return;
    const Tensor& Y = g.value(self);
    const Tensor& D = g.grad_of(self);
    const std::size_t d = Y.cols();
    for (std::size_t r = 0; r < Y.rows(); ++r) {
      double md = 0.0, mdy = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        md += D[r * d + c];
        mdy += D[r * d + c] * Y[r * d + c];
      }
      md /= double(d);
      mdy /= double(d);
      const double is = (*inv_std)[r];
      for (std::size_t c = 0; c < d; ++c) (*da)[r * d + c] += is * (D[r * d + c] - md - Y[r * d + c] * mdy);
    }
  });
}

// ---------------------------------------------------------------------------
// Structural

/// Stacks matrices with equal column counts along the token (row) axis.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  Graph& g = *parts.front().graph;
  const std::size_t d = parts.front().cols();
  std::size_t n = 0;
  for (Var p : parts) {
    if (p.graph != &g) throw std::invalid_argument("operands belong to different graphs");
    if (p.cols() != d)
      throw ShapeError("concat_rows: shape mismatch " + shape_str(parts.front().value().shape()) + " vs " + shape_str(p.value().shape()));
    n += p.rows();
  }
  Tensor out = Tensor::zeros(n, d);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (Var p : parts) {
    offsets.push_back(off);
    const Tensor& v = p.value();
    std::copy(v.data(), v.data() + v.size(), out.data() + off * d);
    off += v.rows();
  }
  std::vector<std::size_t> ids;
  for (Var p : parts) ids.push_back(p.id);
  return g.emit("concat_rows", std::move(out), parts, [ids, offsets, d](Graph& g, std::size_t self) {
    const Tensor& D = g.grad_of(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      Tensor* dp = g.grad_sink(ids[k]);
      if (!dp) continue;
      const double* src = D.data() + offsets[k] * d;
      for (std::size_t i = 0; i < dp->size(); ++i) (*dp)[i] += src[i];
    }
  });
}

inline Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Tensor& A = a.value();
  if (begin > end || end > A.rows())
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " + shape_str(A.shape()));
  const std::size_t d = A.cols();
  Tensor out = Tensor::zeros(end - begin, d);
  std::copy(A.data() + begin * d, A.data() + end * d, out.data());
  return a.graph->emit("slice_rows", std::move(out), {a}, [a = a.id, begin, d](Graph& g, std::size_t self) {
    Tensor* da = g.grad_sink(a);
    if (!da) return;
    const Tensor& D = g.grad_of(self);
    for (std::size_t i = 0; i < D.size(); ++i) (*da)[begin * d + i] += D[i];
  });
}

inline Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Tensor& A = a.value();
  if (begin > end || end > A.cols())
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " + shape_str(A.shape()));
  const std::size_t n = A.rows(), w = end - begin, d = A.cols();
  Tensor out = Tensor::zeros(n, w);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = A[r * d + begin + c];
  return a.graph->emit("slice_cols", std::move(out), {a}, [a = a.id, begin, w, d](Graph& g, std::size_t self) {
    Tensor* da = g.grad_sink(a);
    if (!da) return;
    const Tensor& D = g.grad_of(self);
    for (std::size_t r = 0; r < D.rows(); ++r)
      for (std::size_t c = 0; c < w; ++c) (*da)[r * d + begin + c] += D[r * w + c];
  });
}

/// out[i] = a[index[i]]. Backward is a scatter-add.
inline Var gather_rows(Var a, std::vector<std::size_t> index) {
  const Tensor& A = a.value();
  const std::size_t d = A.cols();
  Tensor out = Tensor::zeros(index.size(), d);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= A.rows())
      throw ShapeError("gather_rows: index " + std::to_string(index[i]) + " outside " + shape_str(A.shape()));
    std::copy(A.data() + index[i] * d, A.data() + (index[i] + 1) * d, out.data() + i * d);
  }
  return a.graph->emit("gather_rows", std::move(out), {a}, [a = a.id, index = std::move(index), d](Graph& g, std::size_t self) {
    Tensor* da = g.grad_sink(a);
    if (!da) return;
    const Tensor& D = g.grad_of(self);
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) (*da)[index[i] * d + c] += D[i * d + c];
  });
}

/// out[index[i]] += a[i] into an [n_rows x d] zero matrix. Backward is a gather.
inline Var scatter_add_rows(Var a, std::vector<std::size_t> index, std::size_t n_rows) {
  const Tensor& A = a.value();
  if (index.size() != A.rows())
    throw ShapeError("scatter_add_rows: " + std::to_string(index.size()) + " indices for " + shape_str(A.shape()));
  const std::size_t d = A.cols();
  Tensor out = Tensor::zeros(n_rows, d);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= n_rows) throw ShapeError("scatter_add_rows: index " + std::to_string(index[i]) + " >= " + std::to_string(n_rows));
    for (std::size_t c = 0; c < d; ++c) out[index[i] * d + c] += A[i * d + c];
  }
  return a.graph->emit("scatter_add_rows", std::move(out), {a}, [a = a.id, index = std::move(index), d](Graph& g, std::size_t self) {
    Tensor* da = g.grad_sink(a);
    if (!da) return;
    const Tensor& D = g.grad_of(self);
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) (*da)[i * d + c] += D[index[i] * d + c];
  });
}

/// Mean over rows: [n x d] -> [1 x d].
inline Var mean_rows(Var a) {
  const Tensor& A = a.value();
  const std::size_t n = A.rows(), d = A.cols();
  if (n == 0) throw ShapeError("mean_rows: empty operand " + shape_str(A.shape()));
  Tensor out = Tensor::zeros(1, d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[c] += A[r * d + c];
  for (double& v : out.values()) v /= double(n);
  return a.graph->emit("mean_rows", std::move(out), {a}, [a = a.id, n, d](Graph& g, std::size_t self) {
    Tensor* da = g.grad_sink(a);
    if (!da) return;
    const Tensor& D = g.grad_of(self);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) (*da)[r * d + c] += D[c] / double(n);
  });
}

// ---------------------------------------------------------------------------
// Reductions to a scalar

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.graph->emit("sum", Tensor({1, 1}, {s}), {a}, [a = a.id](Graph& g, std::size_t self) {
    Tensor* da = g.grad_sink(a);
    if (!da) return;
    const double d = g.grad_of(self)[0];
    for (double& v : da->values()) v += d;
  });
}

/// Mean squared error against a constant target.
inline Var mse(Var a, const Tensor& target) {
  const Tensor& A = a.value();
  require_same_shape("mse", A, target);
  double s = 0.0;
  for (std::size_t i = 0; i < A.size(); ++i) s += (A[i] - target[i]) * (A[i] - target[i]);
  const double n = double(A.size());
  return a.graph->emit("mse", Tensor({1, 1}, {s / n}), {a}, [a = a.id, target, n](Graph& g, std::size_t self) {
    Tensor* da = g.grad_sink(a);
    if (!da) return;
    const Tensor& A = g.value(a);
    const double d = g.grad_of(self)[0];
    for (std::size_t i = 0; i < A.size(); ++i) (*da)[i] += d * 2.0 * (A[i] - target[i]) / n;
  });
}

// ---------------------------------------------------------------------------
// Attention

/// Scaled dot-product attention, split into `heads` equal column groups.
/// q: [n x d], k and v: [m x d]. Softmax runs over the m keys.
inline Var attention(Var q, Var k, Var v, std::size_t heads = 1) {
  Graph& g = detail::same_graph(q, k);
  detail::same_graph(q, v);
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  const std::size_t n = Q.rows(), m = K.rows(), d = Q.cols();
  if (K.cols() != d || V.cols() != d || V.rows() != m)
    throw ShapeError("attention: shape mismatch q" + shape_str(Q.shape()) + " k" + shape_str(K.shape()) + " v" + shape_str(V.shape()));
  if (m == 0) throw ShapeError("attention: no keys");
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(double(dh));

  auto probs = std::make_shared<std::vector<Tensor>>();
  Tensor out = Tensor::zeros(n, d);
  auto Qm = as_mat(Q);
  auto Km = as_mat(K);
  auto Vm = as_mat(V);
  auto Om = as_mat(out);
  for (std::size_t h = 0; h < heads; ++h) {
    const Eigen::Index c0 = Eigen::Index(h * dh), w = Eigen::Index(dh);
    Tensor P = Tensor::zeros(n, m);
    as_mat(P).noalias() = Qm.middleCols(c0, w) * Km.middleCols(c0, w).transpose();
    for (double& x : P.values()) x *= inv_sqrt;
    softmax_rows_inplace(P);
    Om.middleCols(c0, w).noalias() = as_mat(P) * Vm.middleCols(c0, w);
    probs->push_back(std::move(P));
  }
  return g.emit("attention", std::move(out), {q, k, v},
                [q = q.id, k = k.id, v = v.id, probs, heads, dh, inv_sqrt](Graph& g, std::size_t self) {
                  const Tensor& D = g.grad_of(self);
                  auto Dm = as_mat(D);
                  auto Qm = as_mat(g.value(q));
                  auto Km = as_mat(g.value(k));
                  auto Vm = as_mat(g.value(v));
                  Tensor* dq = g.grad_sink(q);
                  Tensor* dk = g.grad_sink(k);
                  Tensor* dv = g.grad_sink(v);
                  for (std::size_t h = 0; h < heads; ++h) {
                    const Eigen::Index c0 = Eigen::Index(h * dh), w = Eigen::Index(dh);
                    const Tensor& P = (*probs)[h];
                    auto Pm = as_mat(P);
                    if (dv) as_mat(*dv).middleCols(c0, w).noalias() += Pm.transpose() * Dm.middleCols(c0, w);
                    if (!dq && !dk) continue;
                    Tensor dS = Tensor::zeros(P.rows(), P.cols());
                    as_mat(dS).noalias() = Dm.middleCols(c0, w) * Vm.middleCols(c0, w).transpose();
                    const std::size_t mm = P.cols();
                    for (std::size_t r = 0; r < P.rows(); ++r) {
                      double s = 0.0;
                      for (std::size_t c = 0; c < mm; ++c) s += dS[r * mm + c] * P[r * mm + c];
                      for (std::size_t c = 0; c < mm; ++c) dS[r * mm + c] = P[r * mm + c] * (dS[r * mm + c] - s) * inv_sqrt;
                    }
                    if (dq) as_mat(*dq).middleCols(c0, w).noalias() += as_mat(dS) * Km.middleCols(c0, w);
                    if (dk) as_mat(*dk).middleCols(c0, w).noalias() += as_mat(dS).transpose() * Qm.middleCols(c0, w);
                  }
                });
}

}  // namespace unigen
