#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "attnfool/autodiff.hpp"

namespace afool {

inline const Shape& shape_of(const Tensor& t) { return t.shape(); }
inline const Shape& shape_of(const Var& v) { return v.shape(); }

/// Projection weights of one head. Biases have length d_k (d_v for values).
template <class T>
struct BasicHeadParams {
  T w_q, w_k, w_v;
  T b_q, b_k, b_v;
};

/// Multi-head self-attention parameters: per-head projections plus a shared
/// output projection of shape (H·d_v) × d_model. `T` is Tensor for stored
/// parameters and Var once they are placed on a tape.
template <class T>
struct BasicAttentionParams {
  std::vector<BasicHeadParams<T>> heads;
  T w_o;
  T b_o;

  std::size_t num_heads() const { return heads.size(); }
  std::size_t d_model() const { return shape_of(heads.at(0).w_q).at(0); }
  std::size_t d_k() const { return shape_of(heads.at(0).w_q).at(1); }
  std::size_t d_v() const { return shape_of(heads.at(0).w_v).at(1); }

  void validate() const {
    if (heads.empty()) throw DimensionError("attention needs at least one head");
    if (shape_of(heads[0].w_q).size() != 2 || shape_of(heads[0].w_v).size() != 2) {
      throw DimensionError("projection weights must be matrices");
    }
    const std::size_t dm = d_model(), dk = d_k(), dv = d_v();
    for (const auto& h : heads) {
      if (shape_of(h.w_q) != Shape{dm, dk} || shape_of(h.w_k) != Shape{dm, dk} || shape_of(h.w_v) != Shape{dm, dv} ||
          shape_of(h.b_q) != Shape{dk} || shape_of(h.b_k) != Shape{dk} || shape_of(h.b_v) != Shape{dv}) {
        throw DimensionError("inconsistent head shapes: all heads must share d_model, d_k and d_v");
      }
    }
    if (shape_of(w_o) != Shape{heads.size() * dv, dm} || shape_of(b_o) != Shape{dm}) {
      throw DimensionError("output projection " + shape_str(shape_of(w_o)) + " does not match H·d_v × d_model = " +
                           std::to_string(heads.size() * dv) + "x" + std::to_string(dm));
    }
  }
};

using HeadParams = BasicHeadParams<Tensor>;
using AttentionParams = BasicAttentionParams<Tensor>;
using BoundAttention = BasicAttentionParams<Var>;

/// Zero-bias parameters from per-head weight matrices.
inline AttentionParams make_attention_params(std::vector<Tensor> w_q, std::vector<Tensor> w_k, std::vector<Tensor> w_v,
                                             Tensor w_o) {
  if (w_q.size() != w_k.size() || w_q.size() != w_v.size()) throw DimensionError("per-head weight lists differ in length");
  AttentionParams p;
  for (std::size_t h = 0; h < w_q.size(); ++h) {
    const std::size_t dk = w_q[h].cols(), dv = w_v[h].cols();
    p.heads.push_back(HeadParams{std::move(w_q[h]), std::move(w_k[h]), std::move(w_v[h]), Tensor(Shape{dk}),
                                 Tensor(Shape{dk}), Tensor(Shape{dv})});
  }
  p.b_o = Tensor(Shape{w_o.cols()});
  p.w_o = std::move(w_o);
  p.validate();
  return p;
}

/// Calls f(name, field...) for every parameter, walking several structurally
/// identical parameter sets in lockstep.
template <class F, class... H>
void visit_head_params(F& f, const std::string& prefix, H&... h) {
  f(prefix + "w_q", h.w_q...);
  f(prefix + "w_k", h.w_k...);
  f(prefix + "w_v", h.w_v...);
  f(prefix + "b_q", h.b_q...);
  f(prefix + "b_k", h.b_k...);
  f(prefix + "b_v", h.b_v...);
}

template <class F, class A, class... Rest>
void visit_attention_params(F& f, const std::string& prefix, A& a, Rest&... rest) {
  for (std::size_t i = 0; i < a.heads.size(); ++i) {
    visit_head_params(f, prefix + "heads." + std::to_string(i) + ".", a.heads[i], rest.heads[i]...);
  }
  f(prefix + "w_o", a.w_o, rest.w_o...);
  f(prefix + "b_o", a.b_o, rest.b_o...);
}

/// Tensor -> tape placement: leaves when `trainable`, constants otherwise.
struct Binder {
  Tape* tape;
  bool trainable;
  void operator()(const std::string&, const Tensor& t, Var& v) const { v = trainable ? tape->leaf(t) : tape->constant(t); }
};

inline BoundAttention bind(Tape& tape, const AttentionParams& p, bool trainable) {
  p.validate();
  BoundAttention b;
  b.heads.resize(p.heads.size());
  Binder binder{&tape, trainable};
  visit_attention_params(binder, "", p, b);
  return b;
}

/// Per-head record of one forward pass. Rows of `logits` / `weights` index
/// queries, columns index keys.
struct HeadTrace {
  Var p_q;
  Var p_k;
  Var logits;
  Var weights;
};

using LayerTrace = std::vector<HeadTrace>;
using AttentionTrace = std::vector<LayerTrace>;

/// Which product-rule term of SelfAH(X) = A(X)·X·W_V carries gradient.
enum class GradientPath { full, values_only, attention_only };

/// Optional interception of projected keys (used by key-replacement surgery).
using KeyHook = std::function<Var(Var p_k, std::size_t head)>;

namespace detail {

inline void check_head(const BoundAttention& a, std::size_t h) {
  if (h >= a.heads.size()) {
    throw IndexError("head " + std::to_string(h) + " out of range for " + std::to_string(a.heads.size()) + " heads");
  }
}

inline void check_tokens(Var x) {
  if (x.shape().size() != 2) throw DimensionError("attention input must be n x d_model, got " + shape_str(x.shape()));
}

}  // namespace detail

/// Scaled logits B = P_Q·P_Kᵀ/√d_k of head `h`, with P_Q and P_K optionally returned.
inline Var attention_logits(Var x, const BoundAttention& a, std::size_t h, Var* p_q_out = nullptr, Var* p_k_out = nullptr,
                            const KeyHook& key_hook = {}) {
  detail::check_head(a, h);
  detail::check_tokens(x);
  const auto& hp = a.heads[h];
  Var p_q = add_row(matmul(x, hp.w_q), hp.b_q);
  Var p_k = add_row(matmul(x, hp.w_k), hp.b_k);
  if (key_hook) p_k = key_hook(p_k, h);
  if (p_q_out) *p_q_out = p_q;
  if (p_k_out) *p_k_out = p_k;
  return scale(matmul(p_q, transpose(p_k)), 1.0 / std::sqrt(static_cast<double>(a.d_k())));
}

/// SelfAH_h(X) = softmax(B)·(X·W_V + b_V); fills `trace` when given.
inline Var self_attention_head(Var x, const BoundAttention& a, std::size_t h, GradientPath path = GradientPath::full,
                               HeadTrace* trace = nullptr, const KeyHook& key_hook = {}) {
  Var p_q, p_k;
  Var logits = attention_logits(x, a, h, &p_q, &p_k, key_hook);
  Var weights = softmax_lastdim(logits);
  Var values = add_row(matmul(x, a.heads[h].w_v), a.heads[h].b_v);
  if (trace) *trace = HeadTrace{p_q, p_k, logits, weights};
  switch (path) {
    case GradientPath::values_only: return matmul(detach(weights), values);
    case GradientPath::attention_only: return matmul(weights, detach(values));
    case GradientPath::full: break;
  }
  return matmul(weights, values);
}

/// Concatenated heads followed by the output projection.
inline std::pair<Var, LayerTrace> multi_head_self_attention(Var x, const BoundAttention& a, const KeyHook& key_hook = {}) {
  detail::check_tokens(x);
  LayerTrace trace(a.heads.size());
  std::vector<Var> outs;
  outs.reserve(a.heads.size());
  for (std::size_t h = 0; h < a.heads.size(); ++h) {
    outs.push_back(self_attention_head(x, a, h, GradientPath::full, &trace[h], key_hook));
  }
  Var cat = outs.size() == 1 ? outs.front() : concat(outs, 1);
  return {add_row(matmul(cat, a.w_o), a.b_o), std::move(trace)};
}

struct PathGradients {
  Tensor g_attn;  // gradient through the attention weights, values frozen
  Tensor g_val;   // gradient through the values, attention weights frozen
};

/// Splits ∇_X⟨cotangent, SelfAH_h(X)⟩ into its two product-rule terms by
/// running the head twice, each time with one factor detached.
inline PathGradients gradient_path_decomposition(const Tensor& x, const AttentionParams& params, std::size_t h,
                                                 const Tensor& cotangent) {
  auto one_path = [&](GradientPath path) {
    Tape tape;
    Var xv = tape.leaf(x);
    BoundAttention a = bind(tape, params, false);
    Var out = self_attention_head(xv, a, h, path);
    if (out.shape() != cotangent.shape()) {
      throw DimensionError("cotangent " + shape_str(cotangent.shape()) + " for head output " + shape_str(out.shape()));
    }
    Var loss = sum(mul(out, tape.constant(cotangent)));
    return tape.backward(loss)[xv];
  };
  return PathGradients{one_path(GradientPath::attention_only), one_path(GradientPath::values_only)};
}

/// Full ∇_X⟨cotangent, SelfAH_h(X)⟩.
inline Tensor head_input_gradient(const Tensor& x, const AttentionParams& params, std::size_t h, const Tensor& cotangent) {
  Tape tape;
  Var xv = tape.leaf(x);
  BoundAttention a = bind(tape, params, false);
  Var out = self_attention_head(xv, a, h);
  return tape.backward(sum(mul(out, tape.constant(cotangent))))[xv];
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) throw UsageError("median of empty sample");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

/// Median of |g_attn / g_val| for one attention layer.
struct RatioMedian {
  std::optional<double> median;  // empty when every g_val entry is below threshold
  std::size_t used = 0;
  std::size_t excluded = 0;
};

inline constexpr double kRatioDenominatorFloor = 1e-12;

/// Pools element-wise |g_attn/g_val| over all token entries and heads of one
/// layer (cotangent = all ones) and takes the median. `x` is the layer's
/// attention input.
inline RatioMedian gradient_ratio_median(const Tensor& x, const AttentionParams& params) {
  std::vector<double> ratios;
  RatioMedian r;
  const Tensor ones(Shape{x.rows(), params.d_v()}, 1.0);
  for (std::size_t h = 0; h < params.num_heads(); ++h) {
    const PathGradients pg = gradient_path_decomposition(x, params, h, ones);
    for (std::size_t i = 0; i < pg.g_val.numel(); ++i) {
      if (std::abs(pg.g_val[i]) > kRatioDenominatorFloor) {
        ratios.push_back(std::abs(pg.g_attn[i] / pg.g_val[i]));
      } else {
        ++r.excluded;
      }
    }
  }
  r.used = ratios.size();
  if (!ratios.empty()) r.median = median_of(std::move(ratios));
  return r;
}

}  // namespace afool
