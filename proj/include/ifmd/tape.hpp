#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ifmd/linalg.hpp"
#include "ifmd/tensor.hpp"

namespace ifmd {

enum class Op {
  leaf,
  constant,
  stop_gradient,
  matmul,
  transpose,
  add,
  scale,
  scale_by,
  hadamard,
  power,
  trace,
  mean_center,
  reshape,
  sum,
  select,
  relu,
  conv2d,
  maxpool,
  dense,
  softmax_cross_entropy,
  linear_solve,
  channels_to_rows,
  rows_to_channels,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::constant: return "constant";
    case Op::stop_gradient: return "stop_gradient";
    case Op::matmul: return "matmul";
    case Op::transpose: return "transpose";
    case Op::add: return "add";
    case Op::scale: return "scale";
    case Op::scale_by: return "scale_by";
    case Op::hadamard: return "hadamard";
    case Op::power: return "power";
    case Op::trace: return "trace";
    case Op::mean_center: return "mean_center";
    case Op::reshape: return "reshape";
    case Op::sum: return "sum";
    case Op::select: return "select";
    case Op::relu: return "relu";
    case Op::conv2d: return "conv2d";
    case Op::maxpool: return "maxpool";
    case Op::dense: return "dense";
    case Op::softmax_cross_entropy: return "softmax_cross_entropy";
    case Op::linear_solve: return "linear_solve";
    case Op::channels_to_rows: return "channels_to_rows";
    case Op::rows_to_channels: return "rows_to_channels";
  }
  return "?";
}

class Tape;

// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool tracked() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Adjoints produced by Tape::backward, indexed by node id.
class Gradients {
 public:
  explicit Gradients(std::vector<std::optional<Tensor>> adjoints) : adjoints_(std::move(adjoints)) {}

  // Gradient w.r.t. a tracked node. Nodes the loss does not depend on get zeros.
  Tensor operator[](const Var& v) const {
    const auto& slot = adjoints_.at(v.id());
    if (slot) return *slot;
    return Tensor(v.shape());
  }

  bool has(const Var& v) const { return v.id() < adjoints_.size() && adjoints_[v.id()].has_value(); }

 private:
  std::vector<std::optional<Tensor>> adjoints_;
};

// Append-only reverse-mode tape. References returned by value() stay valid
// for the tape's lifetime. Every input id of a node is smaller than its
// own id, so a single reverse sweep visits nodes in topological order.
class Tape {
 public:
  // Accumulates the contribution of an output adjoint into input adjoints.
  using Backward = std::function<void(const Tensor& adjoint, Tape& tape)>;

  struct Node {
    std::size_t id;
    Op op;
    std::vector<std::size_t> inputs;
    Tensor value;
    bool tracked;
    Backward backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value) { return push(Op::leaf, {}, std::move(value), true, nullptr); }
  Var constant(Tensor value) { return push(Op::constant, {}, std::move(value), false, nullptr); }

  // Records an op. The node is tracked iff any input is; untracked nodes drop
  // their backward closure.
  Var record(Op op, std::vector<std::size_t> inputs, Tensor value, Backward backward) {
    bool tracked = false;
    for (std::size_t in : inputs) tracked = tracked || nodes_.at(in).tracked;
    return push(op, std::move(inputs), std::move(value), tracked, tracked ? std::move(backward) : nullptr);
  }

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool tracked(std::size_t id) const { return nodes_.at(id).tracked; }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }

  // Adds `contribution` to the adjoint of node `id`. Only meaningful inside backward().
  void accumulate(std::size_t id, const Tensor& contribution) {
    if (!nodes_.at(id).tracked) return;
    auto& slot = adjoints_.at(id);
    if (!slot) {
      slot = contribution;
      return;
    }
    require_same_shape(*slot, contribution, "adjoint accumulation");
    auto dst = slot->mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += contribution[i];
  }
  void accumulate(std::size_t id, Tensor&& contribution) {
    if (!nodes_.at(id).tracked) return;
    auto& slot = adjoints_.at(id);
    if (!slot) {
      slot = std::move(contribution);
      return;
    }
    require_same_shape(*slot, contribution, "adjoint accumulation");
    auto dst = slot->mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += contribution[i];
  }

  Gradients backward(const Var& loss) {
    if (&loss.tape() != this) throw ContractError("backward: loss belongs to a different tape");
    const Node& root = nodes_.at(loss.id());
    if (root.value.size() != 1)
      throw ContractError("backward: loss must be scalar, got " + shape_string(root.value.shape()));
    adjoints_.assign(nodes_.size(), std::nullopt);
    if (root.tracked) adjoints_[root.id] = Tensor(root.value.shape(), 1.0);
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!adjoints_[id] || !n.backward) continue;
      n.backward(*adjoints_[id], *this);
      // Intermediate adjoints are no longer needed once propagated.
      if (n.op != Op::leaf) adjoints_[id].reset();
    }
    Gradients out(std::move(adjoints_));
    adjoints_.clear();
    return out;
  }

 private:
  Var push(Op op, std::vector<std::size_t> inputs, Tensor value, bool tracked, Backward backward) {
    value.require_finite(op_name(op));
    const std::size_t id = nodes_.size();
    nodes_.push_back(Node{id, op, std::move(inputs), std::move(value), tracked, std::move(backward)});
    return Var(this, id);
  }

  std::deque<Node> nodes_;  // deque: references to node values stay valid as the tape grows
  std::vector<std::optional<Tensor>> adjoints_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::tracked() const { return tape_->tracked(id_); }

namespace detail {
inline void same_tape(const Var& a, const Var& b, const char* what) {
  if (&a.tape() != &b.tape()) throw ContractError(std::string(what) + ": operands live on different tapes");
}
}  // namespace detail

// ---- differentiable primitives ---------------------------------------------

inline Var stop_gradient(const Var& a) { return a.tape().constant(a.value()); }

inline Var matmul(const Var& a, const Var& b) {
  detail::same_tape(a, b, "matmul");
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(Op::matmul, {ia, ib}, matmul(a.value(), b.value()),
                         [ia, ib](const Tensor& adj, Tape& t) {
                           const Tensor& av = t.value(ia);
                           const Tensor& bv = t.value(ib);
                           const std::size_t p = av.rows(), q = av.cols(), r = bv.cols();
                           if (t.tracked(ia)) {
                             Tensor da({p, q});
                             kernel::gemm_nt(p, r, q, adj.data().data(), bv.data().data(),
                                             da.mutable_data().data(), false);
                             t.accumulate(ia, std::move(da));
                           }
                           if (t.tracked(ib)) {
                             Tensor db({q, r});
                             kernel::gemm_tn(q, p, r, av.data().data(), adj.data().data(),
                                             db.mutable_data().data(), false);
                             t.accumulate(ib, std::move(db));
                           }
                         });
}

inline Var transpose(const Var& a) {
  const std::size_t ia = a.id();
  return a.tape().record(Op::transpose, {ia}, transpose(a.value()),
                         [ia](const Tensor& adj, Tape& t) { t.accumulate(ia, transpose(adj)); });
}

inline Var add(const Var& a, const Var& b) {
  detail::same_tape(a, b, "add");
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(Op::add, {ia, ib}, add(a.value(), b.value()), [ia, ib](const Tensor& adj, Tape& t) {
    t.accumulate(ia, adj);
    t.accumulate(ib, adj);
  });
}

inline Var scale(const Var& a, double s) {
  const std::size_t ia = a.id();
  return a.tape().record(Op::scale, {ia}, scale(a.value(), s),
                         [ia, s](const Tensor& adj, Tape& t) { t.accumulate(ia, scale(adj, s)); });
}

inline Var sub(const Var& a, const Var& b) { return add(a, scale(b, -1.0)); }

// a * s where s is a scalar node.
inline Var scale_by(const Var& a, const Var& s) {
  detail::same_tape(a, s, "scale_by");
  if (s.value().size() != 1) throw DimensionError("scale_by: factor must be scalar, got " + shape_string(s.shape()));
  const std::size_t ia = a.id(), is = s.id();
  return a.tape().record(Op::scale_by, {ia, is}, scale(a.value(), s.value()[0]),
                         [ia, is](const Tensor& adj, Tape& t) {
                           if (t.tracked(ia)) t.accumulate(ia, scale(adj, t.value(is)[0]));
                           if (t.tracked(is)) {
                             const Tensor& av = t.value(ia);
                             double g = 0.0;
                             for (std::size_t i = 0; i < av.size(); ++i) g += adj[i] * av[i];
                             t.accumulate(is, Tensor(t.value(is).shape(), g));
                           }
                         });
}

inline Var hadamard(const Var& a, const Var& b) {
  detail::same_tape(a, b, "hadamard");
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(Op::hadamard, {ia, ib}, hadamard(a.value(), b.value()),
                         [ia, ib](const Tensor& adj, Tape& t) {
                           if (t.tracked(ia)) t.accumulate(ia, hadamard(adj, t.value(ib)));
                           if (t.tracked(ib)) t.accumulate(ib, hadamard(adj, t.value(ia)));
                         });
}

// Elementwise a^p for strictly positive a.
inline Var power(const Var& a, double p) {
  const std::size_t ia = a.id();
  Tensor out = a.value();
  for (double& v : out.mutable_data()) {
    if (!(v > 0.0)) throw NumericalError("power: non-positive base");
    v = std::pow(v, p);
  }
  return a.tape().record(Op::power, {ia}, std::move(out), [ia, p](const Tensor& adj, Tape& t) {
    const Tensor& av = t.value(ia);
    Tensor g = adj;
    auto gd = g.mutable_data();
    for (std::size_t i = 0; i < gd.size(); ++i) gd[i] *= p * std::pow(av[i], p - 1.0);
    t.accumulate(ia, std::move(g));
  });
}

inline Var trace(const Var& a) {
  const std::size_t ia = a.id();
  return a.tape().record(Op::trace, {ia}, Tensor::scalar(trace(a.value())), [ia](const Tensor& adj, Tape& t) {
    const std::size_t n = t.value(ia).rows();
    t.accumulate(ia, scale(Tensor::identity(n), adj[0]));
  });
}

inline Var mean_center(const Var& z) {
  const std::size_t iz = z.id();
  // Centering is an orthogonal projection, so it is its own adjoint.
  return z.tape().record(Op::mean_center, {iz}, mean_center(z.value()),
                         [iz](const Tensor& adj, Tape& t) { t.accumulate(iz, mean_center(adj)); });
}

inline Var reshape(const Var& a, Shape shape) {
  const std::size_t ia = a.id();
  return a.tape().record(Op::reshape, {ia}, a.value().reshaped(std::move(shape)),
                         [ia](const Tensor& adj, Tape& t) { t.accumulate(ia, adj.reshaped(t.value(ia).shape())); });
}

inline Var sum(const Var& a) {
  const std::size_t ia = a.id();
  return a.tape().record(Op::sum, {ia}, Tensor::scalar(sum(a.value())), [ia](const Tensor& adj, Tape& t) {
    t.accumulate(ia, Tensor(t.value(ia).shape(), adj[0]));
  });
}

// Picks one entry (by flat index) as a scalar.
inline Var select(const Var& a, std::size_t flat_index) {
  if (flat_index >= a.value().size()) throw DimensionError("select: index out of range");
  const std::size_t ia = a.id();
  return a.tape().record(Op::select, {ia}, Tensor::scalar(a.value()[flat_index]),
                         [ia, flat_index](const Tensor& adj, Tape& t) {
                           Tensor g(t.value(ia).shape());
                           g[flat_index] = adj[0];
                           t.accumulate(ia, std::move(g));
                         });
}

inline Var relu(const Var& a) {
  const std::size_t ia = a.id();
  Tensor out = a.value();
  for (double& v : out.mutable_data()) v = v > 0.0 ? v : 0.0;
  return a.tape().record(Op::relu, {ia}, std::move(out), [ia](const Tensor& adj, Tape& t) {
    const Tensor& av = t.value(ia);
    Tensor g = adj;
    auto gd = g.mutable_data();
    for (std::size_t i = 0; i < gd.size(); ++i)
      if (!(av[i] > 0.0)) gd[i] = 0.0;
    t.accumulate(ia, std::move(g));
  });
}

// X with A X = B. Adjoints: dB = A^{-T} dX, dA = -dB X^T.
inline Var linear_solve(const Var& a, const Var& b) {
  detail::same_tape(a, b, "linear_solve");
  const std::size_t ia = a.id(), ib = b.id();
  Tensor x = linear_solve(a.value(), b.value());
  auto* tape = &a.tape();
  const std::size_t ix = tape->size();  // id the result will receive
  return tape->record(Op::linear_solve, {ia, ib}, std::move(x), [ia, ib, ix](const Tensor& adj, Tape& t) {
    const Tensor db = linear_solve(transpose(t.value(ia)), adj);
    if (t.tracked(ia)) t.accumulate(ia, scale(matmul(db, transpose(t.value(ix))), -1.0));
    if (t.tracked(ib)) t.accumulate(ib, db);
  });
}

// ---- convolutional layout changes -------------------------------------------

// N x C x H x W  ->  C x (N*H*W); column index = n*H*W + spatial position.
inline Tensor channels_to_rows(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("channels_to_rows expects N x C x H x W, got " + shape_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({c, n * hw});
  for (std::size_t in = 0; in < n; ++in)
    for (std::size_t ic = 0; ic < c; ++ic)
      std::copy_n(x.data().data() + (in * c + ic) * hw, hw, out.mutable_data().data() + ic * n * hw + in * hw);
  return out;
}

inline Tensor rows_to_channels(const Tensor& z, std::size_t n, std::size_t h, std::size_t w) {
  require_matrix(z, "rows_to_channels");
  const std::size_t c = z.rows(), hw = h * w;
  if (z.cols() != n * hw)
    throw DimensionError("rows_to_channels: " + shape_string(z.shape()) + " does not hold " + std::to_string(n) +
                         " maps of " + std::to_string(h) + "x" + std::to_string(w));
  Tensor out({n, c, h, w});
  for (std::size_t in = 0; in < n; ++in)
    for (std::size_t ic = 0; ic < c; ++ic)
      std::copy_n(z.data().data() + ic * n * hw + in * hw, hw, out.mutable_data().data() + (in * c + ic) * hw);
  return out;
}

inline Var channels_to_rows(const Var& x) {
  const std::size_t ix = x.id();
  return x.tape().record(Op::channels_to_rows, {ix}, channels_to_rows(x.value()), [ix](const Tensor& adj, Tape& t) {
    const Shape& s = t.value(ix).shape();
    t.accumulate(ix, rows_to_channels(adj, s[0], s[2], s[3]));
  });
}

inline Var rows_to_channels(const Var& z, std::size_t n, std::size_t h, std::size_t w) {
  const std::size_t iz = z.id();
  return z.tape().record(Op::rows_to_channels, {iz}, rows_to_channels(z.value(), n, h, w),
                         [iz](const Tensor& adj, Tape& t) { t.accumulate(iz, channels_to_rows(adj)); });
}

}  // namespace ifmd
