#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "attnfool/attention.hpp"

namespace afool {

class DegenerateInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class CeMode { untargeted_maximize, targeted_minimize };
enum class Aggregation { smax, mean, max };

inline const char* to_string(Aggregation a) {
  switch (a) {
    case Aggregation::smax: return "smax";
    case Aggregation::mean: return "mean";
    case Aggregation::max: return "max";
  }
  return "?";
}

inline const char* to_string(CeMode m) {
  return m == CeMode::untargeted_maximize ? "untargeted" : "targeted";
}

/// Composition of the attack objective. Every enabled term is arranged so
/// that the attacker maximizes the total.
struct LossConfig {
  bool ce = true;
  bool kq = false;
  bool kq_star = false;
  bool patch_fool = false;
  CeMode ce_mode = CeMode::untargeted_maximize;
  std::optional<std::size_t> target_class;
  std::size_t target_key = 1;    // i★: token under the patch
  std::size_t target_query = 0;  // j★: class token
  std::optional<std::size_t> layer;  // single(l); all layers when empty
  Aggregation head_aggregation = Aggregation::smax;
  Aggregation layer_aggregation = Aggregation::smax;
  bool normalize = true;
  double weight_ce = 1.0;
  double weight_kq = 1.0;
  double weight_kq_star = 1.0;
  double weight_patch_fool = 1.0;

  bool any_term() const { return ce || kq || kq_star || patch_fool; }

  void validate(std::size_t seq_len, std::size_t depth) const {
    if (!any_term()) throw std::invalid_argument("loss config enables no term");
    if (target_key >= seq_len) throw IndexError("target key index " + std::to_string(target_key) + " outside sequence of " + std::to_string(seq_len));
    if (target_query >= seq_len) throw IndexError("target query index " + std::to_string(target_query) + " outside sequence of " + std::to_string(seq_len));
    if (layer && *layer >= depth) throw IndexError("layer selector " + std::to_string(*layer) + " for depth " + std::to_string(depth));
    if (ce && ce_mode == CeMode::targeted_minimize && !target_class) {
      throw std::invalid_argument("targeted cross-entropy needs target_class");
    }
  }
};

/// P / ((1/n)·‖P‖₁,₂): rows rescaled so their mean ℓ2 norm is 1.
inline Var l12_normalize(Var p) {
  if (p.shape().size() != 2) throw DimensionError("l12_normalize expects a matrix, got " + shape_str(p.shape()));
  Var row_norms = sqrt(sum_lastdim(mul(p, p)));
  bool any = false;
  for (double v : row_norms.value().values()) any = any || v > 1e-12;
  if (!any) throw DegenerateInputError("l12_normalize: every row has zero norm");
  return div_scalar(p, mean(row_norms));
}

/// Pre-softmax logits of a traced head, optionally recomputed from
/// ℓ1,2-normalized projections.
inline Var head_logits(const HeadTrace& t, bool normalize) {
  if (!normalize) return t.logits;
  const double dk = static_cast<double>(t.p_q.shape()[1]);
  return scale(matmul(l12_normalize(t.p_q), transpose(l12_normalize(t.p_k))), 1.0 / std::sqrt(dk));
}

namespace detail {
inline void check_key(const HeadTrace& t, std::size_t i) {
  const std::size_t n = t.logits.shape()[1];
  if (i >= n) throw IndexError("key index " + std::to_string(i) + " outside " + std::to_string(n) + " tokens");
}
}  // namespace detail

/// Mean over queries j of B[j][i★].
inline Var loss_kq_head_layer(const HeadTrace& t, std::size_t target_key, bool normalize) {
  detail::check_key(t, target_key);
  return mean(slice(head_logits(t, normalize), 1, target_key, target_key + 1));
}

/// The single logit B[j★][i★].
inline Var loss_kq_star_head_layer(const HeadTrace& t, std::size_t target_key, std::size_t target_query, bool normalize) {
  detail::check_key(t, target_key);
  const std::size_t n = t.logits.shape()[0];
  if (target_query >= n) throw IndexError("query index " + std::to_string(target_query) + " outside " + std::to_string(n) + " tokens");
  return element(head_logits(t, normalize), target_query * t.logits.shape()[1] + target_key);
}

/// smax (log-sum-exp), mean, or hard max (first argmax on ties).
inline Var aggregate(const std::vector<Var>& values, Aggregation mode) {
  if (values.empty()) throw std::invalid_argument("aggregate of an empty list");
  Var v = stack_scalars(values);
  switch (mode) {
    case Aggregation::smax: return logsumexp(v);
    case Aggregation::mean: return mean(v);
    case Aggregation::max: return max_all(v);
  }
  throw std::invalid_argument("unknown aggregation");
}

/// Head aggregation per layer, then layer aggregation (skipped for a single
/// selected layer). `star` selects the single-query variant.
inline Var attention_fool_loss(const AttentionTrace& traces, const LossConfig& cfg, bool star) {
  if (traces.empty()) throw std::invalid_argument("no attention traces");
  if (cfg.layer && *cfg.layer >= traces.size()) {
    throw IndexError("layer selector " + std::to_string(*cfg.layer) + " for " + std::to_string(traces.size()) + " layers");
  }
  auto layer_loss = [&](const LayerTrace& layer) {
    std::vector<Var> per_head;
    for (const HeadTrace& t : layer) {
      per_head.push_back(star ? loss_kq_star_head_layer(t, cfg.target_key, cfg.target_query, cfg.normalize)
                              : loss_kq_head_layer(t, cfg.target_key, cfg.normalize));
    }
    return aggregate(per_head, cfg.head_aggregation);
  };
  if (cfg.layer) return layer_loss(traces[*cfg.layer]);
  std::vector<Var> per_layer;
  for (const LayerTrace& layer : traces) per_layer.push_back(layer_loss(layer));
  return aggregate(per_layer, cfg.layer_aggregation);
}

inline Var loss_kq(const AttentionTrace& traces, const LossConfig& cfg) { return attention_fool_loss(traces, cfg, false); }
inline Var loss_kq_star(const AttentionTrace& traces, const LossConfig& cfg) { return attention_fool_loss(traces, cfg, true); }

/// Mean over layers, heads and queries of the post-softmax weight on key i★.
inline Var loss_patch_fool(const AttentionTrace& traces, std::size_t target_key) {
  if (traces.empty()) throw std::invalid_argument("no attention traces");
  std::vector<Var> columns;
  for (const LayerTrace& layer : traces) {
    for (const HeadTrace& t : layer) {
      detail::check_key(t, target_key);
      columns.push_back(slice(t.weights, 1, target_key, target_key + 1));
    }
  }
  return mean(columns.size() == 1 ? columns.front() : concat(columns, 0));
}

struct LossBreakdown {
  Var total;
  std::map<std::string, Var> terms;  // unweighted, unsigned term values
};

/// Weighted, signed sum of the enabled terms; always to be maximized.
inline LossBreakdown total_loss(Var logits, const AttentionTrace& traces, std::size_t label, const LossConfig& cfg) {
  if (!cfg.any_term()) throw std::invalid_argument("loss config enables no term");
  if (cfg.ce && cfg.ce_mode == CeMode::targeted_minimize && !cfg.target_class) {
    throw std::invalid_argument("targeted cross-entropy needs target_class");
  }
  LossBreakdown out;
  std::vector<Var> parts;
  if (cfg.ce) {
    const bool targeted = cfg.ce_mode == CeMode::targeted_minimize;
    Var ce = cross_entropy(logits, targeted ? *cfg.target_class : label);
    out.terms.emplace("ce", ce);
    parts.push_back(scale(ce, targeted ? -cfg.weight_ce : cfg.weight_ce));
  }
  if (cfg.kq) {
    Var v = loss_kq(traces, cfg);
    out.terms.emplace("kq", v);
    parts.push_back(scale(v, cfg.weight_kq));
  }
  if (cfg.kq_star) {
    Var v = loss_kq_star(traces, cfg);
    out.terms.emplace("kq_star", v);
    parts.push_back(scale(v, cfg.weight_kq_star));
  }
  if (cfg.patch_fool) {
    Var v = loss_patch_fool(traces, cfg.target_key);
    out.terms.emplace("patch_fool", v);
    parts.push_back(scale(v, cfg.weight_patch_fool));
  }
  out.total = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) out.total = add(out.total, parts[i]);
  return out;
}

}  // namespace afool
