#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tape records every operation of one forward pass as a node holding its
// value, a lazily allocated gradient, and a closure that pushes the node's
// gradient into its parents. Parameters live in a ParamStore and are attached
// to a tape as leaves whose gradient is accumulated back into the store.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cmgr/core/errors.hpp"
#include "cmgr/core/random.hpp"

namespace cmgr {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
using Index = Eigen::Index;

template <typename T>
class ParamStore {
 public:
  std::size_t add(std::string name, Mat<T> value, bool frozen = false) {
    if (find(name)) throw InvalidArgument("duplicate parameter name '" + name + "'");
    Mat<T> grad = Mat<T>::Zero(value.rows(), value.cols());
    entries_.push_back({std::move(name), std::move(value), std::move(grad), frozen});
    return entries_.size() - 1;
  }

  std::size_t size() const { return entries_.size(); }
  const std::string& name(std::size_t i) const { return entries_.at(i).name; }
  Mat<T>& value(std::size_t i) { return entries_.at(i).value; }
  const Mat<T>& value(std::size_t i) const { return entries_.at(i).value; }
  Mat<T>& grad(std::size_t i) { return entries_.at(i).grad; }
  const Mat<T>& grad(std::size_t i) const { return entries_.at(i).grad; }
  bool frozen(std::size_t i) const { return entries_.at(i).frozen; }
  void set_frozen(std::size_t i, bool f) { entries_.at(i).frozen = f; }

  void freeze_all() {
    for (auto& e : entries_) e.frozen = true;
  }

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].name == name) return i;
    }
    return std::nullopt;
  }

  void zero_grad() {
    for (auto& e : entries_) e.grad.setZero();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
    return n;
  }

  bool all_finite() const {
    for (const auto& e : entries_) {
      if (!e.value.allFinite()) return false;
    }
    return true;
  }

  // FNV-1a over names, shapes and raw value bytes in registration order.
  std::uint64_t checksum() const {
    std::uint64_t h = kFnvOffset;
    for (const auto& e : entries_) {
      h = fnv1a(e.name, h);
      const std::int64_t shape[2] = {static_cast<std::int64_t>(e.value.rows()),
                                     static_cast<std::int64_t>(e.value.cols())};
      h = fnv1a_values(std::span<const std::int64_t>(shape, 2), h);
      h = fnv1a_values(std::span<const T>(e.value.data(), static_cast<std::size_t>(e.value.size())), h);
    }
    return h;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>(), e.frozen);
    return out;
  }

 private:
  struct Entry {
    std::string name;
    Mat<T> value;
    Mat<T> grad;
    bool frozen;
  };
  std::vector<Entry> entries_;
};

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Mat<T>& value() const { return tape->value(id); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  T scalar() const { return value()(0, 0); }
};

template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Mat<T> v) { return push(std::move(v), false, nullptr); }

  // Leaf whose gradient is kept on the tape; read it with grad() after backward().
  Var<T> variable(Mat<T> v) { return push(std::move(v), true, nullptr); }

  Var<T> param(ParamStore<T>& store, std::size_t idx) {
    const bool trainable = !store.frozen(idx);
    ParamStore<T>* s = &store;
    return push(store.value(idx), trainable, [s, idx](Tape& t, std::size_t self) {
      s->grad(idx) += t.nodes_[self].grad;
    });
  }

  Var<T> push(Mat<T> value, bool needs_grad, Backward bw) {
    nodes_.push_back(Node{std::move(value), Mat<T>(), needs_grad, std::move(bw)});
    return Var<T>{this, nodes_.size() - 1};
  }

  const Mat<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  // Gradient storage for a node, zero-initialized on first touch.
  Mat<T>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Mat<T>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  Mat<T> grad_or_zero(std::size_t id) const {
    const Node& n = nodes_[id];
    if (n.grad.size() == 0) return Mat<T>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  bool any_needs_grad(std::initializer_list<Var<T>> vs) const {
    for (const auto& v : vs) {
      if (nodes_[v.id].needs_grad) return true;
    }
    return false;
  }

  void backward(Var<T> root) {
    if (root.tape != this) throw StateError("backward: variable belongs to another tape");
    if (nodes_[root.id].value.size() != 1) throw InvalidArgument("backward: root must be a scalar");
    grad(root.id).setConstant(T(1));
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || !n.backward || n.grad.size() == 0) continue;
      n.backward(*this, i);
    }
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Mat<T> value;
    Mat<T> grad;
    bool needs_grad;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

// Attaches each parameter of a store to a tape at most once, so that every use
// of a parameter within one forward pass shares a single leaf. A binding made
// from a const store attaches parameters as constants.
template <typename T>
class ParamBinding {
 public:
  ParamBinding(Tape<T>& tape, ParamStore<T>& store)
      : tape_(&tape), store_(&store), mutable_store_(&store), bound_(store.size()) {}

  ParamBinding(Tape<T>& tape, const ParamStore<T>& store)
      : tape_(&tape), store_(&store), mutable_store_(nullptr), bound_(store.size()) {}

  Var<T> operator()(std::size_t idx) {
    auto& slot = bound_.at(idx);
    if (!slot) {
      slot = mutable_store_ ? tape_->param(*mutable_store_, idx) : tape_->constant(store_->value(idx));
    }
    return *slot;
  }

  Tape<T>& tape() const { return *tape_; }
  const ParamStore<T>& store() const { return *store_; }

 private:
  Tape<T>* tape_;
  const ParamStore<T>* store_;
  ParamStore<T>* mutable_store_;
  std::vector<std::optional<Var<T>>> bound_;
};

namespace ad {

namespace detail {

template <typename T>
void check_same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape || a.tape == nullptr) throw StateError("variables from different tapes");
}

template <typename T>
void check_same_shape(Var<T> a, Var<T> b, const char* op) {
  check_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InvalidArgument(std::string(op) + ": shape mismatch");
  }
}

template <typename T>
void check_row(Var<T> a, Var<T> row, const char* op) {
  check_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw InvalidArgument(std::string(op) + ": row vector width mismatch");
  }
}

}  // namespace detail

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  if (a.cols() != b.rows()) throw InvalidArgument("matmul: inner dimension mismatch");
  Tape<T>& t = *a.tape;
  const std::size_t ia = a.id, ib = b.id;
  Mat<T> v = a.value() * b.value();
  return t.push(std::move(v), t.any_needs_grad({a, b}), [ia, ib](Tape<T>& tp, std::size_t s) {
    const Mat<T>& g = tp.grad(s);
    if (tp.needs_grad(ia)) tp.grad(ia).noalias() += g * tp.value(ib).transpose();
    if (tp.needs_grad(ib)) tp.grad(ib).noalias() += tp.value(ia).transpose() * g;
  });
}

// alpha * a * b^T
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b, T alpha = T(1)) {
  detail::check_same_tape(a, b);
  if (a.cols() != b.cols()) throw InvalidArgument("matmul_nt: inner dimension mismatch");
  Tape<T>& t = *a.tape;
  const std::size_t ia = a.id, ib = b.id;
  Mat<T> v = alpha * (a.value() * b.value().transpose());
  return t.push(std::move(v), t.any_needs_grad({a, b}), [ia, ib, alpha](Tape<T>& tp, std::size_t s) {
    const Mat<T>& g = tp.grad(s);
    if (tp.needs_grad(ia)) tp.grad(ia).noalias() += alpha * (g * tp.value(ib));
    if (tp.needs_grad(ib)) tp.grad(ib).noalias() += alpha * (g.transpose() * tp.value(ia));
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::check_same_shape(a, b, "add");
  Tape<T>& t = *a.tape;
  const std::size_t ia = a.id, ib = b.id;
  Mat<T> v = a.value() + b.value();
  return t.push(std::move(v), t.any_needs_grad({a, b}), [ia, ib](Tape<T>& tp, std::size_t s) {
    const Mat<T>& g = tp.grad(s);
    if (tp.needs_grad(ia)) tp.grad(ia) += g;
    if (tp.needs_grad(ib)) tp.grad(ib) += g;
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::check_same_shape(a, b, "sub");
  Tape<T>& t = *a.tape;
  const std::size_t ia = a.id, ib = b.id;
  Mat<T> v = a.value() - b.value();
  return t.push(std::move(v), t.any_needs_grad({a, b}), [ia, ib](Tape<T>& tp, std::size_t s) {
    const Mat<T>& g = tp.grad(s);
    if (tp.needs_grad(ia)) tp.grad(ia) += g;
    if (tp.needs_grad(ib)) tp.grad(ib) -= g;
  });
}

// a + row, with row (1 x n) broadcast over the rows of a.
template <typename T>
Var<T> add_row(Var<T> a, Var<T> row) {
  detail::check_row(a, row, "add_row");
  Tape<T>& t = *a.tape;
  const std::size_t ia = a.id, ir = row.id;
  Mat<T> v = a.value().rowwise() + row.value().row(0);
  return t.push(std::move(v), t.any_needs_grad({a, row}), [ia, ir](Tape<T>& tp, std::size_t s) {
    const Mat<T>& g = tp.grad(s);
    if (tp.needs_grad(ia)) tp.grad(ia) += g;
    if (tp.needs_grad(ir)) tp.grad(ir) += g.colwise().sum();
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::check_same_shape(a, b, "mul");
  Tape<T>& t = *a.tape;
  const std::size_t ia = a.id, ib = b.id;
  Mat<T> v = a.value().cwiseProduct(b.value());
  return t.push(std::move(v), t.any_needs_grad({a, b}), [ia, ib](Tape<T>& tp, std::size_t s) {
    const Mat<T>& g = tp.grad(s);
    if (tp.needs_grad(ia)) tp.grad(ia) += g.cwiseProduct(tp.value(ib));
    if (tp.needs_grad(ib)) tp.grad(ib) += g.cwiseProduct(tp.value(ia));
  });
}

// a ⊙ row, with row broadcast over the rows of a.
template <typename T>
Var<T> mul_row(Var<T> a, Var<T> row) {
  detail::check_row(a, row, "mul_row");
  Tape<T>& t = *a.tape;
  const std::size_t ia = a.id, ir = row.id;
  Mat<T> v = a.value().array().rowwise() * row.value().row(0).array();
  return t.push(std::move(v), t.any_needs_grad({a, row}), [ia, ir](Tape<T>& tp, std::size_t s) {
    const Mat<T>& g = tp.grad(s);
    if (tp.needs_grad(ia)) {
      tp.grad(ia).array() += g.array().rowwise() * tp.value(ir).row(0).array();
    }
    if (tp.needs_grad(ir)) tp.grad(ir) += g.cwiseProduct(tp.value(ia)).colwise().sum();
  });
}

// Elementwise product with a constant matrix (no gradient into the constant).
template <typename T>
Var<T> mul_const(Var<T> a, const Mat<T>& c) {
  if (a.rows() != c.rows() || a.cols() != c.cols()) throw InvalidArgument("mul_const: shape mismatch");
  Tape<T>& t = *a.tape;
  const std::size_t ia = a.id;
  Mat<T> v = a.value().cwiseProduct(c);
  return t.push(std::move(v), t.needs_grad(ia), [ia, c](Tape<T>& tp, std::size_t s) {
    tp.grad(ia) += tp.grad(s).cwiseProduct(c);
  });
}

// s * a + b elementwise.
template <typename T>
Var<T> affine(Var<T> a, T s, T b = T(0)) {
  Tape<T>& t = *a.tape;
  const std::size_t ia = a.id;
  Mat<T> v = (s * a.value().array() + b).matrix();
  return t.push(std::move(v), t.needs_grad(ia), [ia, s](Tape<T>& tp, std::size_t self) {
    tp.grad(ia) += s * tp.grad(self);
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  return affine(a, s, T(0));
}

// Multiply by a 1x1 variable.
template <typename T>
Var<T> scale_by(Var<T> a, Var<T> s) {
  detail::check_same_tape(a, s);
  if (s.value().size() != 1) throw InvalidArgument("scale_by: scalar expected");
  Tape<T>& t = *a.tape;
  const std::size_t ia = a.id, is = s.id;
  Mat<T> v = a.value() * s.scalar();
  return t.push(std::move(v), t.any_needs_grad({a, s}), [ia, is](Tape<T>& tp, std::size_t self) {
    const Mat<T>& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.grad(ia) += g * tp.value(is)(0, 0);
    if (tp.needs_grad(is)) tp.grad(is)(0, 0) += g.cwiseProduct(tp.value(ia)).sum();
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  Tape<T>& t = *a.tape;
  const std::size_t ia = a.id;
  Mat<T> v = a.value().cwiseMax(T(0));
  return t.push(std::move(v), t.needs_grad(ia), [ia](Tape<T>& tp, std::size_t s) {
    tp.grad(ia).array() += (tp.value(ia).array() > T(0)).select(tp.grad(s).array(), T(0));
  });
}

template <typename T>
Var<T> tanh(Var<T> a) {
  Tape<T>& t = *a.tape;
  const std::size_t ia = a.id;
  Mat<T> v = a.value().array().tanh().matrix();
  return t.push(std::move(v), t.needs_grad(ia), [ia](Tape<T>& tp, std::size_t s) {
    const Mat<T>& y = tp.value(s);
    tp.grad(ia).array() += tp.grad(s).array() * (T(1) - y.array().square());
  });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  Tape<T>& t = *a.tape;
  const std::size_t ia = a.id;
  Mat<T> v = a.value().unaryExpr([](T x) { return T(1) / (T(1) + std::exp(-x)); });
  return t.push(std::move(v), t.needs_grad(ia), [ia](Tape<T>& tp, std::size_t s) {
    const Mat<T>& y = tp.value(s);
    tp.grad(ia).array() += tp.grad(s).array() * y.array() * (T(1) - y.array());
  });
}

// Natural log; arguments must be strictly positive.
template <typename T>
Var<T> log(Var<T> a) {
  if ((a.value().array() <= T(0)).any()) throw InvalidArgument("log: non-positive argument");
  Tape<T>& t = *a.tape;
  const std::size_t ia = a.id;
  Mat<T> v = a.value().array().log().matrix();
  return t.push(std::move(v), t.needs_grad(ia), [ia](Tape<T>& tp, std::size_t s) {
    tp.grad(ia).array() += tp.grad(s).array() / tp.value(ia).array();
  });
}

template <typename T>
Var<T> square(Var<T> a) {
  Tape<T>& t = *a.tape;
  const std::size_t ia = a.id;
  Mat<T> v = a.value().array().square().matrix();
  return t.push(std::move(v), t.needs_grad(ia), [ia](Tape<T>& tp, std::size_t s) {
    tp.grad(ia).array() += T(2) * tp.grad(s).array() * tp.value(ia).array();
  });
}

template <typename T>
Var<T> softmax_rows(Var<T> a) {
  Tape<T>& t = *a.tape;
  const std::size_t ia = a.id;
  const Mat<T>& x = a.value();
  Mat<T> v(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const T m = x.row(r).maxCoeff();
    v.row(r) = (x.row(r).array() - m).exp().matrix();
    v.row(r) /= v.row(r).sum();
  }
  return t.push(std::move(v), t.needs_grad(ia), [ia](Tape<T>& tp, std::size_t s) {
    const Mat<T>& y = tp.value(s);
    const Mat<T>& g = tp.grad(s);
    Mat<T> gy = g.cwiseProduct(y);
    auto dots = gy.rowwise().sum();
    tp.grad(ia) += gy - (y.array().colwise() * dots.array()).matrix();
  });
}

template <typename T>
Var<T> log_softmax_rows(Var<T> a) {
  Tape<T>& t = *a.tape;
  const std::size_t ia = a.id;
  const Mat<T>& x = a.value();
  Mat<T> v(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const T m = x.row(r).maxCoeff();
    const T lse = m + std::log((x.row(r).array() - m).exp().sum());
    v.row(r) = x.row(r).array() - lse;
  }
  return t.push(std::move(v), t.needs_grad(ia), [ia](Tape<T>& tp, std::size_t s) {
    const Mat<T>& y = tp.value(s);
    const Mat<T>& g = tp.grad(s);
    auto sums = g.rowwise().sum();
    Mat<T> p = y.array().exp().matrix();
    tp.grad(ia) += g - (p.array().colwise() * sums.array()).matrix();
  });
}

// Row-wise layer normalization with learnable gain and bias rows.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  detail::check_row(x, gain, "layer_norm");
  detail::check_row(x, bias, "layer_norm");
  Tape<T>& t = *x.tape;
  const std::size_t ix = x.id, ig = gain.id, ib = bias.id;
  const Mat<T>& xv = x.value();
  const Index n = xv.cols();
  Mat<T> xhat(xv.rows(), n);
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const T mu = xv.row(r).mean();
    const T var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = T(1) / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  Mat<T> v = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  return t.push(std::move(v), t.any_needs_grad({x, gain, bias}),
                [ix, ig, ib, xhat = std::move(xhat), inv_std, n](Tape<T>& tp, std::size_t s) {
                  const Mat<T>& g = tp.grad(s);
                  if (tp.needs_grad(ig)) tp.grad(ig) += g.cwiseProduct(xhat).colwise().sum();
                  if (tp.needs_grad(ib)) tp.grad(ib) += g.colwise().sum();
                  if (tp.needs_grad(ix)) {
                    Mat<T> gx = g.array().rowwise() * tp.value(ig).row(0).array();
                    Mat<T>& out = tp.grad(ix);
                    for (Index r = 0; r < gx.rows(); ++r) {
                      const T m1 = gx.row(r).mean();
                      const T m2 = gx.row(r).dot(xhat.row(r)) / T(n);
                      out.row(r).array() += inv_std(r) * (gx.row(r).array() - m1 - xhat.row(r).array() * m2);
                    }
                  }
                });
}

// Mean over rows: (r x n) -> (1 x n).
template <typename T>
Var<T> mean_rows(Var<T> a) {
  Tape<T>& t = *a.tape;
  const std::size_t ia = a.id;
  const T inv = T(1) / static_cast<T>(a.rows());
  Mat<T> v = a.value().colwise().mean();
  return t.push(std::move(v), t.needs_grad(ia), [ia, inv](Tape<T>& tp, std::size_t s) {
    tp.grad(ia).rowwise() += tp.grad(s).row(0) * inv;
  });
}

template <typename T>
Var<T> sum_all(Var<T> a) {
  Tape<T>& t = *a.tape;
  const std::size_t ia = a.id;
  Mat<T> v(1, 1);
  v(0, 0) = a.value().sum();
  return t.push(std::move(v), t.needs_grad(ia), [ia](Tape<T>& tp, std::size_t s) {
    tp.grad(ia).array() += tp.grad(s)(0, 0);
  });
}

template <typename T>
Var<T> mean_all(Var<T> a) {
  return scale(sum_all(a), T(1) / static_cast<T>(a.value().size()));
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_cols: no inputs");
  Tape<T>& t = *parts.front().tape;
  const Index rows = parts.front().rows();
  Index cols = 0;
  bool needs = false;
  for (const auto& p : parts) {
    if (p.tape != &t || p.rows() != rows) throw InvalidArgument("concat_cols: row mismatch");
    cols += p.cols();
    needs = needs || t.needs_grad(p.id);
  }
  Mat<T> v(rows, cols);
  std::vector<std::pair<std::size_t, Index>> spans;
  Index off = 0;
  for (const auto& p : parts) {
    v.middleCols(off, p.cols()) = p.value();
    spans.emplace_back(p.id, off);
    off += p.cols();
  }
  return t.push(std::move(v), needs, [spans](Tape<T>& tp, std::size_t s) {
    const Mat<T>& g = tp.grad(s);
    for (const auto& [id, o] : spans) {
      if (tp.needs_grad(id)) tp.grad(id) += g.middleCols(o, tp.value(id).cols());
    }
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_rows: no inputs");
  Tape<T>& t = *parts.front().tape;
  const Index cols = parts.front().cols();
  Index rows = 0;
  bool needs = false;
  for (const auto& p : parts) {
    if (p.tape != &t || p.cols() != cols) throw InvalidArgument("concat_rows: column mismatch");
    rows += p.rows();
    needs = needs || t.needs_grad(p.id);
  }
  Mat<T> v(rows, cols);
  std::vector<std::pair<std::size_t, Index>> spans;
  Index off = 0;
  for (const auto& p : parts) {
    v.middleRows(off, p.rows()) = p.value();
    spans.emplace_back(p.id, off);
    off += p.rows();
  }
  return t.push(std::move(v), needs, [spans](Tape<T>& tp, std::size_t s) {
    const Mat<T>& g = tp.grad(s);
    for (const auto& [id, o] : spans) {
      if (tp.needs_grad(id)) tp.grad(id) += g.middleRows(o, tp.value(id).rows());
    }
  });
}

template <typename T>
Var<T> slice_cols(Var<T> a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw InvalidArgument("slice_cols: out of range");
  Tape<T>& t = *a.tape;
  const std::size_t ia = a.id;
  Mat<T> v = a.value().middleCols(start, count);
  return t.push(std::move(v), t.needs_grad(ia), [ia, start, count](Tape<T>& tp, std::size_t s) {
    tp.grad(ia).middleCols(start, count) += tp.grad(s);
  });
}

template <typename T>
Var<T> slice_rows(Var<T> a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw InvalidArgument("slice_rows: out of range");
  Tape<T>& t = *a.tape;
  const std::size_t ia = a.id;
  Mat<T> v = a.value().middleRows(start, count);
  return t.push(std::move(v), t.needs_grad(ia), [ia, start, count](Tape<T>& tp, std::size_t s) {
    tp.grad(ia).middleRows(start, count) += tp.grad(s);
  });
}

// Column-wise max over consecutive blocks of `group` rows.
template <typename T>
Var<T> group_max_rows(Var<T> a, Index group) {
  if (group <= 0 || a.rows() % group != 0) throw InvalidArgument("group_max_rows: rows not divisible by group");
  Tape<T>& t = *a.tape;
  const std::size_t ia = a.id;
  const Mat<T>& x = a.value();
  const Index out_rows = x.rows() / group;
  Mat<T> v(out_rows, x.cols());
  std::vector<Index> arg(static_cast<std::size_t>(out_rows * x.cols()));
  for (Index g = 0; g < out_rows; ++g) {
    for (Index c = 0; c < x.cols(); ++c) {
      Index best = g * group;
      for (Index r = g * group + 1; r < (g + 1) * group; ++r) {
        if (x(r, c) > x(best, c)) best = r;
      }
      v(g, c) = x(best, c);
      arg[static_cast<std::size_t>(g * x.cols() + c)] = best;
    }
  }
  return t.push(std::move(v), t.needs_grad(ia), [ia, arg = std::move(arg)](Tape<T>& tp, std::size_t s) {
    const Mat<T>& g = tp.grad(s);
    Mat<T>& out = tp.grad(ia);
    for (Index r = 0; r < g.rows(); ++r) {
      for (Index c = 0; c < g.cols(); ++c) {
        out(arg[static_cast<std::size_t>(r * g.cols() + c)], c) += g(r, c);
      }
    }
  });
}

// out.flat[i] = a.flat[index[i]] in row-major order; gradients scatter-add.
template <typename T>
Var<T> gather(Var<T> a, Index rows, Index cols, std::vector<Index> index) {
  if (static_cast<Index>(index.size()) != rows * cols) throw InvalidArgument("gather: index size mismatch");
  Tape<T>& t = *a.tape;
  const std::size_t ia = a.id;
  const T* src = a.value().data();
  const Index n = a.value().size();
  Mat<T> v(rows, cols);
  T* dst = v.data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= n) throw InvalidArgument("gather: index out of range");
    dst[i] = src[index[i]];
  }
  return t.push(std::move(v), t.needs_grad(ia), [ia, index = std::move(index)](Tape<T>& tp, std::size_t s) {
    const T* g = tp.grad(s).data();
    T* out = tp.grad(ia).data();
    for (std::size_t i = 0; i < index.size(); ++i) out[index[i]] += g[i];
  });
}

template <typename T>
Var<T> pick(Var<T> a, Index r, Index c) {
  if (r < 0 || c < 0 || r >= a.rows() || c >= a.cols()) throw InvalidArgument("pick: out of range");
  Tape<T>& t = *a.tape;
  const std::size_t ia = a.id;
  Mat<T> v(1, 1);
  v(0, 0) = a.value()(r, c);
  return t.push(std::move(v), t.needs_grad(ia), [ia, r, c](Tape<T>& tp, std::size_t s) {
    tp.grad(ia)(r, c) += tp.grad(s)(0, 0);
  });
}

// Each row divided by max(||row||, eps).
template <typename T>
Var<T> row_normalize(Var<T> a, T eps = T(1e-12)) {
  Tape<T>& t = *a.tape;
  const std::size_t ia = a.id;
  const Mat<T>& x = a.value();
  Eigen::Matrix<T, Eigen::Dynamic, 1> denom(x.rows());
  std::vector<bool> clamped(static_cast<std::size_t>(x.rows()));
  Mat<T> v(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const T n = x.row(r).norm();
    clamped[static_cast<std::size_t>(r)] = n <= eps;
    denom(r) = std::max(n, eps);
    v.row(r) = x.row(r) / denom(r);
  }
  return t.push(std::move(v), t.needs_grad(ia), [ia, denom, clamped](Tape<T>& tp, std::size_t s) {
    const Mat<T>& y = tp.value(s);
    const Mat<T>& g = tp.grad(s);
    Mat<T>& out = tp.grad(ia);
    for (Index r = 0; r < g.rows(); ++r) {
      if (clamped[static_cast<std::size_t>(r)]) {
        out.row(r) += g.row(r) / denom(r);
      } else {
        out.row(r) += (g.row(r) - y.row(r) * g.row(r).dot(y.row(r))) / denom(r);
      }
    }
  });
}

}  // namespace ad

}  // namespace cmgr
