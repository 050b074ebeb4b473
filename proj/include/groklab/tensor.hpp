#pragma once

// Dense double-precision tensors and a define-by-run reverse-mode tape.
//
// A Tensor is a shared handle to a node holding a row-major buffer. Operations
// take the Tape they record on as their first argument; an operation is only
// recorded when one of its inputs requires a gradient, so the same functions
// serve inference (nothing recorded) and training.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "groklab/error.hpp"

namespace groklab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass touches the node
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> data(shape_size(shape), 0.0);
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : Tensor(std::move(shape), std::move(data), requires_grad, true) {}

  /// Skips the finiteness scan; for operation outputs that were already checked.
  static Tensor checked(Shape shape, std::vector<double> data, bool requires_grad) {
    return Tensor(std::move(shape), std::move(data), requires_grad, false);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({}, {value}, requires_grad);
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t rows() const { return dim(0); }
  std::size_t cols() const { return dim(1); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= rank()) {
      throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                       shape_string(shape()));
    }
    return node_->shape[axis];
  }

  std::span<const double> data() const { return node_->data; }
  /// Direct write access, for optimizers and initializers. Not tracked by any tape.
  std::span<double> mutable_data() { return node_->data; }
  std::span<const double> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }

  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
    return node_->data[0];
  }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  /// Deep copy without gradient state.
  Tensor clone(bool requires_grad = false) const {
    Tensor out;
    out.node_ = std::make_shared<TensorNode>();
    out.node_->shape = node_->shape;
    out.node_->data = node_->data;
    out.node_->requires_grad = requires_grad;
    return out;
  }

  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  Tensor(Shape shape, std::vector<double> data, bool requires_grad, bool scan)
      : node_(std::make_shared<TensorNode>()) {
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor dimension must be positive: " + shape_string(shape));
    }
    if (shape_size(shape) != data.size()) {
      throw ShapeError("tensor shape " + shape_string(shape) + " does not match " +
                       std::to_string(data.size()) + " values");
    }
    if (scan) {
      for (std::size_t i = 0; i < data.size(); ++i) {
        if (!std::isfinite(data[i])) {
          throw NonFiniteError("tensor construction: non-finite value at index " +
                               std::to_string(i));
        }
      }
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  std::shared_ptr<TensorNode> node_;
};

/// Ordered record of operations for one forward pass. Supports exactly one
/// backward pass.
class Tape {
 public:
  using Rule = std::function<void()>;

  Tape() = default;
  /// A tape that records nothing: outputs never require gradients.
  static Tape inference() {
    Tape t;
    t.recording_ = false;
    return t;
  }
  bool recording() const noexcept { return recording_; }

  void record(std::vector<std::shared_ptr<TensorNode>> inputs,
              std::shared_ptr<TensorNode> output, Rule rule) {
    if (consumed_) throw TapeError("recording on a tape that has already run backward");
    entries_.push_back({std::move(inputs), std::move(output), std::move(rule)});
  }

  std::size_t size() const noexcept { return entries_.size(); }
  bool consumed() const noexcept { return consumed_; }

  /// Fills `grad` of every requires_grad tensor reachable from `loss` with
  /// d(loss)/d(tensor). Gradients from fan-out are summed.
  void backward(const Tensor& loss) {
    if (consumed_) throw TapeError("stale tape: backward already ran for this forward pass");
    if (!loss.defined() || loss.size() != 1) {
      throw TapeError("backward needs a scalar loss, got shape " +
                      (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
    }
    const auto* target = loss.node().get();
    auto produced = std::find_if(entries_.begin(), entries_.end(),
                                 [&](const Entry& e) { return e.output.get() == target; });
    if (produced == entries_.end()) throw TapeError("loss was not produced on this tape");
    consumed_ = true;

    for (auto& entry : entries_) {
      for (auto& in : entry.inputs) {
        if (in->requires_grad) in->grad.assign(in->data.size(), 0.0);
      }
      entry.output->grad.assign(entry.output->data.size(), 0.0);
    }
    loss.node()->grad[0] = 1.0;
    for (auto it = std::make_reverse_iterator(produced + 1); it != entries_.rend(); ++it) {
      it->rule();
    }
  }

 private:
  struct Entry {
    std::vector<std::shared_ptr<TensorNode>> inputs;
    std::shared_ptr<TensorNode> output;
    Rule rule;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
  bool recording_ = true;
};

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

inline void check_finite(const char* op, const std::vector<double>& values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NonFiniteError(std::string(op) + " produced a non-finite value at flat index " +
                           std::to_string(i));
    }
  }
}

inline void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(t.shape()));
  }
}

// Builds an output tensor from computed values, checks finiteness, and
// registers `rule` when any input is differentiable. `rule` receives the
// input and output nodes.
template <typename RuleFactory>
Tensor finish(Tape& tape, const char* op, Shape shape, std::vector<double> values,
              std::vector<Tensor> inputs, RuleFactory&& make_rule) {
  check_finite(op, values);
  bool grad = tape.recording() &&
              std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  Tensor out = Tensor::checked(std::move(shape), std::move(values), grad);
  if (grad) {
    std::vector<std::shared_ptr<TensorNode>> nodes;
    nodes.reserve(inputs.size());
    for (const auto& t : inputs) nodes.push_back(t.node());
    auto rule = make_rule(nodes, out.node());
    tape.record(std::move(nodes), out.node(), std::move(rule));
  }
  return out;
}

inline bool wants(const std::shared_ptr<TensorNode>& n) { return n->requires_grad; }

}  // namespace detail

/// Matrix product of a [m x k] and b [k x n].
inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  std::vector<double> out(m * n);
  using namespace detail;
  MatrixMap(out.data(), m, n).noalias() =
      ConstMatrixMap(a.data().data(), m, k) * ConstMatrixMap(b.data().data(), k, n);
  return finish(tape, "matmul", {m, n}, std::move(out), {a, b}, [m, k, n](auto nodes, auto y) {
    return [m, k, n, a = nodes[0], b = nodes[1], y] {
      ConstMatrixMap dy(y->grad.data(), m, n);
      if (wants(a)) {
        MatrixMap(a->grad.data(), m, k).noalias() +=
            dy * ConstMatrixMap(b->data.data(), k, n).transpose();
      }
      if (wants(b)) {
        MatrixMap(b->grad.data(), k, n).noalias() +=
            ConstMatrixMap(a->data.data(), m, k).transpose() * dy;
      }
    };
  });
}

inline Tensor transpose(Tape& tape, const Tensor& a) {
  detail::require_rank("transpose", a, 2);
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  return detail::finish(tape, "transpose", {n, m}, std::move(out), {a}, [m, n](auto nodes, auto y) {
    return [m, n, a = nodes[0], y] {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) a->grad[i * n + j] += y->grad[j * m + i];
    };
  });
}

inline Tensor reshape(Tape& tape, const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_string(a.shape()) + " as " +
                     shape_string(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::finish(tape, "reshape", std::move(shape), std::move(out), {a}, [](auto nodes, auto y) {
    return [a = nodes[0], y] {
      for (std::size_t i = 0; i < y->grad.size(); ++i) a->grad[i] += y->grad[i];
    };
  });
}

namespace detail {

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes differ, " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

}  // namespace detail

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::finish(tape, "add", a.shape(), std::move(out), {a, b}, [](auto nodes, auto y) {
    return [a = nodes[0], b = nodes[1], y] {
      for (std::size_t i = 0; i < y->grad.size(); ++i) {
        if (a->requires_grad) a->grad[i] += y->grad[i];
        if (b->requires_grad) b->grad[i] += y->grad[i];
      }
    };
  });
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::finish(tape, "sub", a.shape(), std::move(out), {a, b}, [](auto nodes, auto y) {
    return [a = nodes[0], b = nodes[1], y] {
      for (std::size_t i = 0; i < y->grad.size(); ++i) {
        if (a->requires_grad) a->grad[i] += y->grad[i];
        if (b->requires_grad) b->grad[i] -= y->grad[i];
      }
    };
  });
}

/// Elementwise product.
inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::finish(tape, "mul", a.shape(), std::move(out), {a, b}, [](auto nodes, auto y) {
    return [a = nodes[0], b = nodes[1], y] {
      for (std::size_t i = 0; i < y->grad.size(); ++i) {
        if (a->requires_grad) a->grad[i] += y->grad[i] * b->data[i];
        if (b->requires_grad) b->grad[i] += y->grad[i] * a->data[i];
      }
    };
  });
}

inline Tensor scale(Tape& tape, const Tensor& a, double factor) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return detail::finish(tape, "scale", a.shape(), std::move(out), {a}, [factor](auto nodes, auto y) {
    return [factor, a = nodes[0], y] {
      for (std::size_t i = 0; i < y->grad.size(); ++i) a->grad[i] += factor * y->grad[i];
    };
  });
}

/// Adds a length-n vector to every row of an [m x n] matrix.
inline Tensor add_row_vector(Tape& tape, const Tensor& a, const Tensor& v) {
  detail::require_rank("add_row_vector", a, 2);
  const std::size_t m = a.rows(), n = a.cols();
  if (v.size() != n) {
    throw ShapeError("add_row_vector: " + shape_string(v.shape()) + " cannot broadcast over " +
                     shape_string(a.shape()));
  }
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] + v[j];
  return detail::finish(tape, "add_row_vector", a.shape(), std::move(out), {a, v},
                        [m, n](auto nodes, auto y) {
                          return [m, n, a = nodes[0], v = nodes[1], y] {
                            for (std::size_t i = 0; i < m; ++i) {
                              for (std::size_t j = 0; j < n; ++j) {
                                double g = y->grad[i * n + j];
                                if (a->requires_grad) a->grad[i * n + j] += g;
                                if (v->requires_grad) v->grad[j] += g;
                              }
                            }
                          };
                        });
}

/// max(0, x); the subgradient at exactly 0 is 0.
inline Tensor relu(Tape& tape, const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
  return detail::finish(tape, "relu", a.shape(), std::move(out), {a}, [](auto nodes, auto y) {
    return [a = nodes[0], y] {
      for (std::size_t i = 0; i < y->grad.size(); ++i) {
        if (a->data[i] > 0.0) a->grad[i] += y->grad[i];
      }
    };
  });
}

/// Row-wise softmax with max subtraction.
inline Tensor softmax_rows(Tape& tape, const Tensor& a) {
  detail::require_rank("softmax_rows", a, 2);
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = a.data().data() + i * n;
    double peak = *std::max_element(row, row + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += out[i * n + j] = std::exp(row[j] - peak);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= total;
  }
  return detail::finish(tape, "softmax_rows", a.shape(), std::move(out), {a}, [m, n](auto nodes, auto y) {
    return [m, n, a = nodes[0], y] {
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += y->grad[i * n + j] * y->data[i * n + j];
        for (std::size_t j = 0; j < n; ++j) {
          a->grad[i * n + j] += y->data[i * n + j] * (y->grad[i * n + j] - dot);
        }
      }
    };
  });
}

/// Row-wise log-softmax in log-sum-exp form.
inline Tensor log_softmax_rows(Tape& tape, const Tensor& a) {
  detail::require_rank("log_softmax_rows", a, 2);
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = a.data().data() + i * n;
    double peak = *std::max_element(row, row + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(row[j] - peak);
    double lse = peak + std::log(total);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = row[j] - lse;
  }
  return detail::finish(tape, "log_softmax_rows", a.shape(), std::move(out), {a},
                        [m, n](auto nodes, auto y) {
                          return [m, n, a = nodes[0], y] {
                            for (std::size_t i = 0; i < m; ++i) {
                              double total = 0.0;
                              for (std::size_t j = 0; j < n; ++j) total += y->grad[i * n + j];
                              for (std::size_t j = 0; j < n; ++j) {
                                a->grad[i * n + j] +=
                                    y->grad[i * n + j] - std::exp(y->data[i * n + j]) * total;
                              }
                            }
                          };
                        });
}

inline Tensor sum(Tape& tape, const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return detail::finish(tape, "sum", {}, {total}, {a}, [](auto nodes, auto y) {
    return [a = nodes[0], y] {
      for (double& g : a->grad) g += y->grad[0];
    };
  });
}

/// Sum of squared entries.
inline Tensor sum_squares(Tape& tape, const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v * v;
  return detail::finish(tape, "sum_squares", {}, {total}, {a}, [](auto nodes, auto y) {
    return [a = nodes[0], y] {
      for (std::size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += 2.0 * a->data[i] * y->grad[0];
    };
  });
}

/// Gathers rows of an [m x n] matrix; repeated indices are allowed and their
/// gradients accumulate.
inline Tensor take_rows(Tape& tape, const Tensor& a, std::span<const std::size_t> index) {
  detail::require_rank("take_rows", a, 2);
  const std::size_t m = a.rows(), n = a.cols();
  if (index.empty()) throw ShapeError("take_rows: empty index list");
  std::vector<double> out(index.size() * n);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= m) {
      throw RangeError("take_rows: row " + std::to_string(index[r]) + " out of range for " +
                       shape_string(a.shape()));
    }
    std::copy_n(a.data().data() + index[r] * n, n, out.data() + r * n);
  }
  std::vector<std::size_t> rows(index.begin(), index.end());
  return detail::finish(tape, "take_rows", {rows.size(), n}, std::move(out), {a},
                        [rows, n](auto nodes, auto y) {
                          return [rows, n, a = nodes[0], y] {
                            for (std::size_t r = 0; r < rows.size(); ++r)
                              for (std::size_t j = 0; j < n; ++j)
                                a->grad[rows[r] * n + j] += y->grad[r * n + j];
                          };
                        });
}

/// Picks a[i, labels[i]] from each row, returning a length-m vector.
inline Tensor pick(Tape& tape, const Tensor& a, std::span<const int> labels) {
  detail::require_rank("pick", a, 2);
  const std::size_t m = a.rows(), n = a.cols();
  if (labels.size() != m) {
    throw ShapeError("pick: " + std::to_string(labels.size()) + " labels for " +
                     shape_string(a.shape()));
  }
  std::vector<double> out(m);
  std::vector<std::size_t> cols(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n) {
      throw RangeError("label " + std::to_string(labels[i]) + " out of range [0, " +
                       std::to_string(n) + ")");
    }
    cols[i] = static_cast<std::size_t>(labels[i]);
    out[i] = a[i * n + cols[i]];
  }
  return detail::finish(tape, "pick", {m}, std::move(out), {a}, [cols, n](auto nodes, auto y) {
    return [cols, n, a = nodes[0], y] {
      for (std::size_t i = 0; i < cols.size(); ++i) a->grad[i * n + cols[i]] += y->grad[i];
    };
  });
}

/// Per-head attention scores. q is [B x d] (one query per example), k is
/// [(B*T) x d] (T keys per example). Returns [(B*H) x T] with
/// out[b*H+h, t] = scale * <q[b, head h], k[b*T+t, head h]>.
inline Tensor head_scores(Tape& tape, const Tensor& q, const Tensor& k, std::size_t heads,
                          std::size_t positions, double scale_factor) {
  detail::require_rank("head_scores", q, 2);
  detail::require_rank("head_scores", k, 2);
  const std::size_t batch = q.rows(), d = q.cols();
  if (heads == 0 || d % heads != 0 || k.cols() != d || k.rows() != batch * positions) {
    throw ShapeError("head_scores: incompatible " + shape_string(q.shape()) + " and " +
                     shape_string(k.shape()) + " for " + std::to_string(heads) + " heads");
  }
  const std::size_t hd = d / heads;
  std::vector<double> out(batch * heads * positions);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < positions; ++t) {
        const double* qv = q.data().data() + b * d + h * hd;
        const double* kv = k.data().data() + (b * positions + t) * d + h * hd;
        double dot = 0.0;
        for (std::size_t c = 0; c < hd; ++c) dot += qv[c] * kv[c];
        out[(b * heads + h) * positions + t] = scale_factor * dot;
      }
  return detail::finish(
      tape, "head_scores", {batch * heads, positions}, std::move(out), {q, k},
      [=](auto nodes, auto y) {
        return [=, q = nodes[0], k = nodes[1]] {
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t h = 0; h < heads; ++h)
              for (std::size_t t = 0; t < positions; ++t) {
                double g = scale_factor * y->grad[(b * heads + h) * positions + t];
                std::size_t qo = b * d + h * hd, ko = (b * positions + t) * d + h * hd;
                for (std::size_t c = 0; c < hd; ++c) {
                  if (q->requires_grad) q->grad[qo + c] += g * k->data[ko + c];
                  if (k->requires_grad) k->grad[ko + c] += g * q->data[qo + c];
                }
              }
        };
      });
}

/// Mixes values with attention weights. probs is [(B*H) x T], v is
/// [(B*T) x d]. Returns [B x d] where head h's slice of row b is
/// sum_t probs[b*H+h, t] * v[b*T+t, head h].
inline Tensor head_mix(Tape& tape, const Tensor& probs, const Tensor& v, std::size_t heads) {
  detail::require_rank("head_mix", probs, 2);
  detail::require_rank("head_mix", v, 2);
  const std::size_t positions = probs.cols();
  const std::size_t d = v.cols();
  if (heads == 0 || d % heads != 0 || probs.rows() % heads != 0 ||
      v.rows() != (probs.rows() / heads) * positions) {
    throw ShapeError("head_mix: incompatible " + shape_string(probs.shape()) + " and " +
                     shape_string(v.shape()) + " for " + std::to_string(heads) + " heads");
  }
  const std::size_t batch = probs.rows() / heads, hd = d / heads;
  std::vector<double> out(batch * d, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < positions; ++t) {
        double p = probs[(b * heads + h) * positions + t];
        const double* vv = v.data().data() + (b * positions + t) * d + h * hd;
        double* o = out.data() + b * d + h * hd;
        for (std::size_t c = 0; c < hd; ++c) o[c] += p * vv[c];
      }
  return detail::finish(tape, "head_mix", {batch, d}, std::move(out), {probs, v},
                        [=](auto nodes, auto y) {
                          return [=, p = nodes[0], v = nodes[1]] {
                            for (std::size_t b = 0; b < batch; ++b)
                              for (std::size_t h = 0; h < heads; ++h)
                                for (std::size_t t = 0; t < positions; ++t) {
                                  std::size_t pi = (b * heads + h) * positions + t;
                                  std::size_t vo = (b * positions + t) * d + h * hd;
                                  std::size_t yo = b * d + h * hd;
                                  double gp = 0.0;
                                  for (std::size_t c = 0; c < hd; ++c) {
                                    gp += y->grad[yo + c] * v->data[vo + c];
                                    if (v->requires_grad) v->grad[vo + c] += p->data[pi] * y->grad[yo + c];
                                  }
                                  if (p->requires_grad) p->grad[pi] += gp;
                                }
                          };
                        });
}

/// Per-row layer normalization with learned gain and bias (length n each).
inline Tensor layer_norm_rows(Tape& tape, const Tensor& a, const Tensor& gain, const Tensor& bias,
                              double eps = 1e-5) {
  detail::require_rank("layer_norm_rows", a, 2);
  const std::size_t m = a.rows(), n = a.cols();
  if (gain.size() != n || bias.size() != n) {
    throw ShapeError("layer_norm_rows: gain/bias must have " + std::to_string(n) + " entries");
  }
  std::vector<double> normalized(m * n), inv_std(m), out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = a.data().data() + i * n;
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      normalized[i * n + j] = (row[j] - mean) * inv_std[i];
      out[i * n + j] = normalized[i * n + j] * gain[j] + bias[j];
    }
  }
  return detail::finish(
      tape, "layer_norm_rows", a.shape(), std::move(out), {a, gain, bias},
      [m, n, normalized = std::move(normalized), inv_std = std::move(inv_std)](auto nodes, auto y) {
        return [m, n, normalized, inv_std, a = nodes[0], g = nodes[1], b = nodes[2], y] {
          const double dn = static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            double mean_dx = 0.0, mean_dx_x = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              double dy = y->grad[i * n + j];
              double xh = normalized[i * n + j];
              if (g->requires_grad) g->grad[j] += dy * xh;
              if (b->requires_grad) b->grad[j] += dy;
              mean_dx += dy * g->data[j];
              mean_dx_x += dy * g->data[j] * xh;
            }
            if (!a->requires_grad) continue;
            mean_dx /= dn;
            mean_dx_x /= dn;
            for (std::size_t j = 0; j < n; ++j) {
              double dxh = y->grad[i * n + j] * g->data[j];
              a->grad[i * n + j] += inv_std[i] * (dxh - mean_dx - normalized[i * n + j] * mean_dx_x);
            }
          }
        };
      });
}

/// Smallest column norm accepted by l2_normalize_columns.
inline constexpr double kColumnNormFloor = 1e-30;

/// Scales every column of a [d x n] matrix to unit l2 norm. Throws
/// DegenerateFeatureError for a column with norm below kColumnNormFloor.
inline Tensor l2_normalize_columns(Tape& tape, const Tensor& z) {
  detail::require_rank("l2_normalize_columns", z, 2);
  const std::size_t d = z.rows(), n = z.cols();
  std::vector<double> norms(n, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < n; ++j) norms[j] += z[i * n + j] * z[i * n + j];
  for (std::size_t j = 0; j < n; ++j) {
    norms[j] = std::sqrt(norms[j]);
    if (!(norms[j] >= kColumnNormFloor)) throw DegenerateFeatureError(j, norms[j]);
  }
  std::vector<double> out(d * n);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = z[i * n + j] / norms[j];
  return detail::finish(tape, "l2_normalize_columns", z.shape(), std::move(out), {z},
                        [d, n, norms](auto nodes, auto y) {
                          return [d, n, norms, z = nodes[0], y] {
                            std::vector<double> dot(n, 0.0);
                            for (std::size_t i = 0; i < d; ++i)
                              for (std::size_t j = 0; j < n; ++j)
                                dot[j] += y->grad[i * n + j] * y->data[i * n + j];
                            for (std::size_t i = 0; i < d; ++i)
                              for (std::size_t j = 0; j < n; ++j)
                                z->grad[i * n + j] +=
                                    (y->grad[i * n + j] - y->data[i * n + j] * dot[j]) / norms[j];
                          };
                        });
}

}  // namespace groklab
