#pragma once

// Define-by-run reverse-mode differentiation over afool::Tensor.
//
// A Tape owns every value computed during one forward pass. Var is a cheap
// handle (tape pointer + node index). Nodes only keep a backward closure when
// at least one parent requires a gradient, so a forward pass over frozen
// parameters records no parameter-gradient work at all.

#include <cassert>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "attnfool/tensor.hpp"

namespace afool {

class Tape;
class GradAccumulator;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const noexcept { return id_; }
  Tape& tape() const {
    if (!tape_) throw UsageError("use of an unbound Var");
    return *tape_;
  }
  bool bound() const noexcept { return tape_ != nullptr; }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

using BackwardFn = std::function<void(const Tensor& grad_out, GradAccumulator& acc)>;

class GradAccumulator {
 public:
  explicit GradAccumulator(const Tape& tape);

  bool wants(std::size_t id) const;
  /// Gradient slot for node `id`, zero-initialized on first use.
  Tensor& slot(std::size_t id);
  bool has(std::size_t id) const { return id < grads_.size() && !grads_[id].empty(); }
  std::vector<Tensor> release() { return std::move(grads_); }

 private:
  const Tape* tape_;
  std::vector<Tensor> grads_;
};

/// ∂loss/∂node for every node that requires a gradient.
class Gradients {
 public:
  Gradients(const Tape* tape, std::vector<Tensor> grads) : tape_(tape), grads_(std::move(grads)) {}

  /// Gradient with respect to `v`; zeros when `v` does not reach the loss.
  Tensor operator[](Var v) const {
    if (&v.tape() != tape_) throw UsageError("gradient lookup for a Var from another tape");
    if (v.id() < grads_.size() && !grads_[v.id()].empty()) return grads_[v.id()];
    return Tensor(v.shape());
  }

 private:
  const Tape* tape_;
  std::vector<Tensor> grads_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input.
  Var leaf(Tensor value) { return push(std::move(value), true, {}); }
  /// Input that never receives a gradient.
  Var constant(Tensor value) { return push(std::move(value), false, {}); }

  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward) {
    bool needs = false;
    for (const Var& p : parents) {
      if (&p.tape() != this) throw UsageError("operands live on different tapes");
      needs = needs || nodes_[p.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backward) : BackwardFn{});
  }

  Var record(Tensor value, const std::vector<Var>& parents, BackwardFn backward) {
    bool needs = false;
    for (const Var& p : parents) {
      if (&p.tape() != this) throw UsageError("operands live on different tapes");
      needs = needs || nodes_[p.id()].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backward) : BackwardFn{});
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Gradients backward(Var loss) const {
    if (&loss.tape() != this) throw UsageError("backward on a Var from another tape");
    if (loss.value().numel() != 1) {
      throw UsageError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    GradAccumulator acc(*this);
    if (nodes_[loss.id()].requires_grad) {
      acc.slot(loss.id())[0] = 1.0;
      for (std::size_t i = loss.id() + 1; i-- > 0;) {
        const Node& node = nodes_[i];
        if (!node.backward || !acc.has(i)) continue;
        // Closures only write parent slots (ids < i); the slot vector never reallocates.
        const Tensor& g = acc.slot(i);
        node.backward(g, acc);
      }
    }
    return Gradients(this, acc.release());
  }

 private:
  struct Node {
    Tensor value;
    bool requires_grad;
    BackwardFn backward;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn backward) {
    nodes_.push_back(Node{std::move(value), requires_grad, std::move(backward)});
    return Var(this, nodes_.size() - 1);
  }

  // deque: values stay addressable while later nodes are appended.
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape().value(id_); }
inline bool Var::requires_grad() const { return tape().requires_grad(id_); }

inline GradAccumulator::GradAccumulator(const Tape& tape) : tape_(&tape), grads_(tape.size()) {}

inline bool GradAccumulator::wants(std::size_t id) const { return tape_->requires_grad(id); }

inline Tensor& GradAccumulator::slot(std::size_t id) {
  Tensor& g = grads_[id];
  if (g.empty()) g = Tensor(tape_->value(id).shape());
  return g;
}

// ---------------------------------------------------------------------------
// Primitive operations
// ---------------------------------------------------------------------------

namespace detail {

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
}

inline void add_into(Tensor& dst, const Tensor& src, double scale = 1.0) {
  double* d = dst.data();
  const double* s = src.data();
  for (std::size_t i = 0; i < dst.numel(); ++i) d[i] += scale * s[i];
}

template <class F>
Tensor map_values(const Tensor& x, F f) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
  return out;
}

inline std::size_t last_dim(const Shape& s) {
  if (s.empty()) throw DimensionError("operation needs rank >= 1");
  return s.back();
}

}  // namespace detail

inline Var add(Var a, Var b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = a.value();
  detail::add_into(out, b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](const Tensor& g, GradAccumulator& acc) {
    if (acc.wants(ia)) detail::add_into(acc.slot(ia), g);
    if (acc.wants(ib)) detail::add_into(acc.slot(ib), g);
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = a.value();
  detail::add_into(out, b.value(), -1.0);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](const Tensor& g, GradAccumulator& acc) {
    if (acc.wants(ia)) detail::add_into(acc.slot(ia), g);
    if (acc.wants(ib)) detail::add_into(acc.slot(ib), g, -1.0);
  });
}

/// Element-wise product.
inline Var mul(Var a, Var b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  Tape* tape = &a.tape();
  const std::size_t ia = a.id(), ib = b.id();
  return tape->record(std::move(out), {a, b}, [tape, ia, ib](const Tensor& g, GradAccumulator& acc) {
    const Tensor& av = tape->value(ia);
    const Tensor& bv = tape->value(ib);
    if (acc.wants(ia)) {
      Tensor& s = acc.slot(ia);
      for (std::size_t i = 0; i < g.numel(); ++i) s[i] += g[i] * bv[i];
    }
    if (acc.wants(ib)) {
      Tensor& s = acc.slot(ib);
      for (std::size_t i = 0; i < g.numel(); ++i) s[i] += g[i] * av[i];
    }
  });
}

/// x · c for a constant c.
inline Var scale(Var x, double c) {
  Tensor out = detail::map_values(x.value(), [c](double v) { return v * c; });
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, c](const Tensor& g, GradAccumulator& acc) {
    if (acc.wants(ix)) detail::add_into(acc.slot(ix), g, c);
  });
}

/// x + c for a constant c.
inline Var add_scalar(Var x, double c) {
  Tensor out = detail::map_values(x.value(), [c](double v) { return v + c; });
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](const Tensor& g, GradAccumulator& acc) {
    if (acc.wants(ix)) detail::add_into(acc.slot(ix), g);
  });
}

/// x · s where s is a differentiable scalar.
inline Var mul_scalar(Var x, Var s) {
  if (s.value().numel() != 1) throw DimensionError("mul_scalar: scalar operand has shape " + shape_str(s.shape()));
  const double sv = s.value()[0];
  Tensor out = detail::map_values(x.value(), [sv](double v) { return v * sv; });
  Tape* tape = &x.tape();
  const std::size_t ix = x.id(), is = s.id();
  return tape->record(std::move(out), {x, s}, [tape, ix, is](const Tensor& g, GradAccumulator& acc) {
    const double sv = tape->value(is)[0];
    if (acc.wants(ix)) detail::add_into(acc.slot(ix), g, sv);
    if (acc.wants(is)) {
      const Tensor& xv = tape->value(ix);
      double d = 0.0;
      for (std::size_t i = 0; i < g.numel(); ++i) d += g[i] * xv[i];
      acc.slot(is)[0] += d;
    }
  });
}

/// x / s where s is a differentiable nonzero scalar.
inline Var div_scalar(Var x, Var s) {
  if (s.value().numel() != 1) throw DimensionError("div_scalar: scalar operand has shape " + shape_str(s.shape()));
  const double sv = s.value()[0];
  Tensor out = detail::map_values(x.value(), [sv](double v) { return v / sv; });
  Tape* tape = &x.tape();
  const std::size_t ix = x.id(), is = s.id(), io = tape->size();
  return tape->record(std::move(out), {x, s}, [tape, ix, is, io](const Tensor& g, GradAccumulator& acc) {
    const double sv = tape->value(is)[0];
    if (acc.wants(ix)) detail::add_into(acc.slot(ix), g, 1.0 / sv);
    if (acc.wants(is)) {
      const Tensor& ov = tape->value(io);
      double d = 0.0;
      for (std::size_t i = 0; i < g.numel(); ++i) d += g[i] * ov[i];
      acc.slot(is)[0] -= d / sv;
    }
  });
}

/// x[..., :] + b for a row vector b matching the last dimension.
inline Var add_row(Var x, Var b) {
  const std::size_t d = detail::last_dim(x.shape());
  if (b.shape() != Shape{d}) {
    throw DimensionError("add_row: bias " + shape_str(b.shape()) + " against " + shape_str(x.shape()));
  }
  Tensor out = x.value();
  const double* bv = b.value().data();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i % d];
  const std::size_t ix = x.id(), ib = b.id();
  return x.tape().record(std::move(out), {x, b}, [ix, ib, d](const Tensor& g, GradAccumulator& acc) {
    if (acc.wants(ix)) detail::add_into(acc.slot(ix), g);
    if (acc.wants(ib)) {
      Tensor& s = acc.slot(ib);
      for (std::size_t i = 0; i < g.numel(); ++i) s[i % d] += g[i];
    }
  });
}

inline Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
    throw DimensionError("matmul: shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor out(Shape{m, n});
  kernel::gemm_nn(av.data(), bv.data(), out.data(), m, k, n);
  Tape* tape = &a.tape();
  const std::size_t ia = a.id(), ib = b.id();
  return tape->record(std::move(out), {a, b}, [tape, ia, ib, m, k, n](const Tensor& g, GradAccumulator& acc) {
    if (acc.wants(ia)) {
      // dA = G · Bᵀ
      kernel::gemm_nt_acc(g.data(), tape->value(ib).data(), acc.slot(ia).data(), m, n, k);
    }
    if (acc.wants(ib)) {
      // dB = Aᵀ · G
      kernel::gemm_tn_acc(tape->value(ia).data(), g.data(), acc.slot(ib).data(), m, k, n);
    }
  });
}

/// Swaps the last two dimensions.
inline Var transpose(Var x) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw DimensionError("transpose needs rank >= 2, got " + shape_str(s));
  const std::size_t r = s[s.size() - 2], c = s[s.size() - 1];
  const std::size_t batch = x.value().numel() / (r * c);
  Shape os = s;
  std::swap(os[os.size() - 2], os[os.size() - 1]);
  Tensor out(os);
  const double* xv = x.value().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = xv[b * r * c + i * c + j];
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, r, c, batch](const Tensor& g, GradAccumulator& acc) {
    if (!acc.wants(ix)) return;
    Tensor& sl = acc.slot(ix);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) sl[b * r * c + i * c + j] += g[b * r * c + j * r + i];
  });
}

inline Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](const Tensor& g, GradAccumulator& acc) {
    if (!acc.wants(ix)) return;
    Tensor& sl = acc.slot(ix);
    for (std::size_t i = 0; i < g.numel(); ++i) sl[i] += g[i];
  });
}

/// Concatenation along `dim`; all other dimensions must agree.
inline Var concat(const std::vector<Var>& parts, std::size_t dim) {
  if (parts.empty()) throw UsageError("concat of zero tensors");
  const Shape& s0 = parts.front().shape();
  if (dim >= s0.size()) throw DimensionError("concat dim " + std::to_string(dim) + " for " + shape_str(s0));
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == dim || s[d] == s0[d];
    if (!ok) throw DimensionError("concat: " + shape_str(s) + " against " + shape_str(s0));
    total += s[dim];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < dim; ++d) outer *= s0[d];
  for (std::size_t d = dim + 1; d < s0.size(); ++d) inner *= s0[d];
  Shape os = s0;
  os[dim] = total;
  Tensor out(os);
  std::vector<std::size_t> ids, widths;
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const std::size_t w = p.shape()[dim] * inner;
    const double* pv = p.value().data();
    for (std::size_t o = 0; o < outer; ++o) std::copy(pv + o * w, pv + (o + 1) * w, out.data() + o * total * inner + offset);
    offset += w;
    ids.push_back(p.id());
    widths.push_back(w);
  }
  return parts.front().tape().record(std::move(out), parts,
                                     [ids, widths, outer, row = total * inner](const Tensor& g, GradAccumulator& acc) {
                                       std::size_t off = 0;
                                       for (std::size_t k = 0; k < ids.size(); ++k) {
                                         const std::size_t w = widths[k];
                                         if (acc.wants(ids[k])) {
                                           Tensor& sl = acc.slot(ids[k]);
                                           for (std::size_t o = 0; o < outer; ++o)
                                             for (std::size_t i = 0; i < w; ++i) sl[o * w + i] += g[o * row + off + i];
                                         }
                                         off += w;
                                       }
                                     });
}

/// Elements [begin, end) along `dim`.
inline Var slice(Var x, std::size_t dim, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  if (dim >= s.size()) throw DimensionError("slice dim " + std::to_string(dim) + " for " + shape_str(s));
  if (begin >= end || end > s[dim]) {
    throw IndexError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") of dim " + std::to_string(dim) +
                     " in " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < dim; ++d) outer *= s[d];
  for (std::size_t d = dim + 1; d < s.size(); ++d) inner *= s[d];
  Shape os = s;
  os[dim] = end - begin;
  Tensor out(os);
  const std::size_t src_row = s[dim] * inner, w = (end - begin) * inner, off = begin * inner;
  const double* xv = x.value().data();
  for (std::size_t o = 0; o < outer; ++o) std::copy(xv + o * src_row + off, xv + o * src_row + off + w, out.data() + o * w);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, outer, src_row, w, off](const Tensor& g, GradAccumulator& acc) {
    if (!acc.wants(ix)) return;
    Tensor& sl = acc.slot(ix);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < w; ++i) sl[o * src_row + off + i] += g[o * w + i];
  });
}

/// Single element at flat index `i`, as a scalar.
inline Var element(Var x, std::size_t i) {
  if (i >= x.value().numel()) throw IndexError("element " + std::to_string(i) + " of " + shape_str(x.shape()));
  const std::size_t ix = x.id();
  return x.tape().record(Tensor::scalar(x.value()[i]), {x}, [ix, i](const Tensor& g, GradAccumulator& acc) {
    if (acc.wants(ix)) acc.slot(ix)[i] += g[0];
  });
}

/// out.flat[k] = x.flat[index[k]]; gradient scatter-adds back.
inline Var gather(Var x, std::vector<std::size_t> index, Shape out_shape) {
  if (shape_numel(out_shape) != index.size()) {
    throw DimensionError("gather: " + std::to_string(index.size()) + " indices for shape " + shape_str(out_shape));
  }
  const std::size_t n = x.value().numel();
  Tensor out(std::move(out_shape));
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] >= n) throw IndexError("gather index " + std::to_string(index[k]) + " of " + shape_str(x.shape()));
    out[k] = x.value()[index[k]];
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, index = std::move(index)](const Tensor& g, GradAccumulator& acc) {
    if (!acc.wants(ix)) return;
    Tensor& sl = acc.slot(ix);
    for (std::size_t k = 0; k < index.size(); ++k) sl[index[k]] += g[k];
  });
}

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  const std::size_t ix = x.id();
  return x.tape().record(Tensor::scalar(s), {x}, [ix](const Tensor& g, GradAccumulator& acc) {
    if (!acc.wants(ix)) return;
    Tensor& sl = acc.slot(ix);
    for (std::size_t i = 0; i < sl.numel(); ++i) sl[i] += g[0];
  });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().numel())); }

/// Sum over the last dimension; the result drops that dimension.
inline Var sum_lastdim(Var x) {
  const Shape& s = x.shape();
  const std::size_t d = detail::last_dim(s);
  Shape os(s.begin(), s.end() - 1);
  Tensor out(os);
  const double* xv = x.value().data();
  for (std::size_t r = 0; r < out.numel(); ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += xv[r * d + j];
    out[r] = acc;
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, d](const Tensor& g, GradAccumulator& acc) {
    if (!acc.wants(ix)) return;
    Tensor& sl = acc.slot(ix);
    for (std::size_t i = 0; i < sl.numel(); ++i) sl[i] += g[i / d];
  });
}

inline Var exp(Var x) {
  Tensor out = detail::map_values(x.value(), [](double v) { return std::exp(v); });
  Tape* tape = &x.tape();
  const std::size_t ix = x.id(), io = tape->size();
  return tape->record(std::move(out), {x}, [tape, ix, io](const Tensor& g, GradAccumulator& acc) {
    if (!acc.wants(ix)) return;
    const Tensor& ov = tape->value(io);
    Tensor& sl = acc.slot(ix);
    for (std::size_t i = 0; i < g.numel(); ++i) sl[i] += g[i] * ov[i];
  });
}

inline Var log(Var x) {
  Tensor out = detail::map_values(x.value(), [](double v) { return std::log(v); });
  Tape* tape = &x.tape();
  const std::size_t ix = x.id();
  return tape->record(std::move(out), {x}, [tape, ix](const Tensor& g, GradAccumulator& acc) {
    if (!acc.wants(ix)) return;
    const Tensor& xv = tape->value(ix);
    Tensor& sl = acc.slot(ix);
    for (std::size_t i = 0; i < g.numel(); ++i) sl[i] += g[i] / xv[i];
  });
}

inline Var sqrt(Var x) {
  Tensor out = detail::map_values(x.value(), [](double v) { return std::sqrt(v); });
  Tape* tape = &x.tape();
  const std::size_t ix = x.id(), io = tape->size();
  return tape->record(std::move(out), {x}, [tape, ix, io](const Tensor& g, GradAccumulator& acc) {
    if (!acc.wants(ix)) return;
    const Tensor& ov = tape->value(io);
    Tensor& sl = acc.slot(ix);
    // Subgradient 0 at sqrt(0).
    for (std::size_t i = 0; i < g.numel(); ++i) sl[i] += ov[i] > 0.0 ? g[i] * 0.5 / ov[i] : 0.0;
  });
}

/// Stop-gradient: same value, no gradient flows to `x`.
inline Var detach(Var x) { return x.tape().constant(x.value()); }

/// Maximum element as a scalar; the gradient goes to the first argmax.
inline Var max_all(Var x) {
  const auto vals = x.value().values();
  if (vals.empty()) throw UsageError("max of empty tensor");
  const std::size_t arg = static_cast<std::size_t>(std::max_element(vals.begin(), vals.end()) - vals.begin());
  return element(x, arg);
}

/// Softmax over the last dimension, stabilized by subtracting the slice max.
inline Var softmax_lastdim(Var x) {
  const std::size_t d = detail::last_dim(x.shape());
  Tensor out(x.shape());
  const double* xv = x.value().data();
  for (std::size_t r = 0; r < out.numel() / d; ++r) {
    const double* xr = xv + r * d;
    double* o = out.data() + r * d;
    const double m = *std::max_element(xr, xr + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += (o[j] = std::exp(xr[j] - m));
    for (std::size_t j = 0; j < d; ++j) o[j] /= z;
  }
  Tape* tape = &x.tape();
  const std::size_t ix = x.id(), io = tape->size();
  return tape->record(std::move(out), {x}, [tape, ix, io, d](const Tensor& g, GradAccumulator& acc) {
    if (!acc.wants(ix)) return;
    const Tensor& y = tape->value(io);
    Tensor& sl = acc.slot(ix);
    for (std::size_t r = 0; r < g.numel() / d; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
      for (std::size_t j = 0; j < d; ++j) sl[r * d + j] += y[r * d + j] * (g[r * d + j] - dot);
    }
  });
}

/// Per-row normalization to zero mean / unit variance, then gamma·x̂ + beta.
inline Var layernorm(Var x, Var gamma, Var beta, double eps) {
  const std::size_t d = detail::last_dim(x.shape());
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layernorm: gamma " + shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()) +
                         " against " + shape_str(x.shape()));
  }
  const std::size_t rows = x.value().numel() / d;
  Tensor out(x.shape());
  auto xhat = std::make_shared<Tensor>(x.shape());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const double* xv = x.value().data();
  const double* gv = gamma.value().data();
  const double* bv = beta.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = gv[j] * h + bv[j];
    }
  }
  Tape* tape = &x.tape();
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return tape->record(std::move(out), {x, gamma, beta},
                      [tape, ix, ig, ib, d, rows, xhat, inv_std](const Tensor& g, GradAccumulator& acc) {
                        if (acc.wants(ig)) {
                          Tensor& sg = acc.slot(ig);
                          for (std::size_t i = 0; i < g.numel(); ++i) sg[i % d] += g[i] * (*xhat)[i];
                        }
                        if (acc.wants(ib)) {
                          Tensor& sb = acc.slot(ib);
                          for (std::size_t i = 0; i < g.numel(); ++i) sb[i % d] += g[i];
                        }
                        if (!acc.wants(ix)) return;
                        const double* gam = tape->value(ig).data();
                        Tensor& sx = acc.slot(ix);
                        const double inv_d = 1.0 / static_cast<double>(d);
                        for (std::size_t r = 0; r < rows; ++r) {
                          double m1 = 0.0, m2 = 0.0;
                          for (std::size_t j = 0; j < d; ++j) {
                            const double dh = g[r * d + j] * gam[j];
                            m1 += dh;
                            m2 += dh * (*xhat)[r * d + j];
                          }
                          m1 *= inv_d;
                          m2 *= inv_d;
                          for (std::size_t j = 0; j < d; ++j) {
                            const double dh = g[r * d + j] * gam[j];
                            sx[r * d + j] += (*inv_std)[r] * (dh - m1 - (*xhat)[r * d + j] * m2);
                          }
                        }
                      });
}

/// Exact GELU: x·Φ(x).
inline Var gelu(Var x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  Tensor out = detail::map_values(x.value(), [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); });
  Tape* tape = &x.tape();
  const std::size_t ix = x.id();
  return tape->record(std::move(out), {x}, [tape, ix](const Tensor& g, GradAccumulator& acc) {
    if (!acc.wants(ix)) return;
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    const Tensor& xv = tape->value(ix);
    Tensor& sl = acc.slot(ix);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      sl[i] += g[i] * (cdf + v * pdf);
    }
  });
}

// ---------------------------------------------------------------------------
// Composites
// ---------------------------------------------------------------------------

/// log Σ exp(x) over all elements, shifted by the (constant) maximum.
inline Var logsumexp(Var x) {
  const auto vals = x.value().values();
  const double m = *std::max_element(vals.begin(), vals.end());
  return add_scalar(log(sum(exp(add_scalar(x, -m)))), m);
}

/// Cross-entropy of a logit vector against class `label`.
inline Var cross_entropy(Var logits, std::size_t label) {
  if (logits.shape().size() != 1) throw DimensionError("cross_entropy expects a logit vector, got " + shape_str(logits.shape()));
  if (label >= logits.shape()[0]) throw IndexError("label " + std::to_string(label) + " for " + shape_str(logits.shape()));
  return sub(logsumexp(logits), element(logits, label));
}

/// Stacks scalar Vars into a 1-D Var.
inline Var stack_scalars(const std::vector<Var>& scalars) {
  if (scalars.empty()) throw UsageError("stack of zero scalars");
  std::vector<Var> parts;
  parts.reserve(scalars.size());
  for (const Var& s : scalars) {
    if (s.value().numel() != 1) throw DimensionError("stack_scalars: element of shape " + shape_str(s.shape()));
    parts.push_back(reshape(s, Shape{1}));
  }
  return parts.size() == 1 ? parts.front() : concat(parts, 0);
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central-difference gradient of a scalar function.
inline Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
  if (!(h > 0.0)) throw UsageError("finite difference step must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

/// ‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, floor).
inline double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-8) {
  if (a.shape() != b.shape()) throw DimensionError("relative_error: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double diff = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
  const double denom = std::max({l2_norm(a.values()), l2_norm(b.values()), floor});
  return std::sqrt(diff) / denom;
}

}  // namespace afool
