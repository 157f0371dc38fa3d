#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "attnfool/attention.hpp"
#include "attnfool/patch_attack.hpp"
#include "attnfool/random.hpp"
#include "attnfool/vit.hpp"

namespace afool {

/// σ_max(M) by power iteration on MᵀM.
inline double largest_singular_value(const Tensor& m, std::uint64_t seed = 0, std::size_t max_iter = 10000,
                                     double rel_tol = 1e-10) {
  if (m.rank() != 2) throw DimensionError("largest_singular_value expects a matrix, got " + shape_str(m.shape()));
  bool nonzero = false;
  for (double v : m.values()) nonzero = nonzero || v != 0.0;
  if (!nonzero) return 0.0;
  const std::size_t rows = m.rows(), cols = m.cols();
  Rng rng = make_rng(seed, "power-iteration");
  Tensor v = random_normal(Shape{cols}, rng);
  Tensor mv(Shape{rows}), u(Shape{cols});
  auto normalize = [](Tensor& t) {
    const double n = l2_norm(t.values());
    for (double& x : t.values()) x /= n;
    return n;
  };
  normalize(v);
  double sigma = 0.0;
  for (std::size_t it = 0; it < max_iter; ++it) {
    kernel::gemm_nn(m.data(), v.data(), mv.data(), rows, cols, 1);
    std::fill(u.values().begin(), u.values().end(), 0.0);
    kernel::gemm_tn_acc(m.data(), mv.data(), u.data(), rows, cols, 1);
    const double lambda = normalize(u);
    if (!(lambda > 0.0)) {
      // Start vector hit the null space; restart from a fresh direction.
      v = random_normal(Shape{cols}, rng);
      normalize(v);
      continue;
    }
    const double next = std::sqrt(lambda);
    v = u;
    if (std::abs(next - sigma) < rel_tol * next) break;
    sigma = next;
  }
  // ‖M·v‖ for the final unit v: error is second order in the direction error.
  kernel::gemm_nn(m.data(), v.data(), mv.data(), rows, cols, 1);
  return l2_norm(mv.values());
}

struct SingularValueRow {
  std::size_t layer = 0;
  std::size_t head = 0;
  double sigma = 0.0;
};

struct SingularValueReport {
  std::vector<SingularValueRow> rows;  // every layer/head
  std::vector<double> layer_max;
};

/// σ_max(W_Q^h (W_K^h)ᵀ) for every layer and head.
inline SingularValueReport singular_value_report(const ViTModel& model) {
  SingularValueReport r;
  for (std::size_t l = 0; l < model.params.layers.size(); ++l) {
    const auto& attn = model.params.layers[l].attn;
    double mx = 0.0;
    for (std::size_t h = 0; h < attn.heads.size(); ++h) {
      const Tensor prod = matmul_values(attn.heads[h].w_q, transpose_values(attn.heads[h].w_k));
      const double s = largest_singular_value(prod);
      r.rows.push_back({l, h, s});
      mx = std::max(mx, s);
    }
    r.layer_max.push_back(mx);
  }
  return r;
}

/// Per-layer gradient-ratio medians on one image (clean forward pass).
inline std::vector<RatioMedian> gradient_ratio_medians(const ViTModel& model, const Tensor& image) {
  Tape tape;
  ForwardResult fr = forward(tape, model, tape.constant(image));
  std::vector<RatioMedian> out;
  for (std::size_t l = 0; l < fr.attention_inputs.size(); ++l) {
    out.push_back(gradient_ratio_median(fr.attention_inputs[l].value(), model.params.layers[l].attn));
  }
  return out;
}

struct RatioLayerSummary {
  std::size_t layer = 0;
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t images = 0;     // images with a defined median
  std::size_t undefined = 0;  // images where every g_val entry was below threshold
  std::size_t excluded_entries = 0;
};

struct GradientRatioReport {
  std::vector<std::vector<RatioMedian>> per_image;  // [image][layer]
  std::vector<RatioLayerSummary> layers;
};

/// Mean ± standard error across images of the per-layer ratio medians.
inline GradientRatioReport gradient_ratio_report(const ViTModel& model, const std::vector<Tensor>& images) {
  if (images.empty()) throw std::invalid_argument("gradient ratio report needs at least one image");
  GradientRatioReport r;
  for (const Tensor& img : images) r.per_image.push_back(gradient_ratio_medians(model, img));
  const std::size_t depth = model.config.depth;
  for (std::size_t l = 0; l < depth; ++l) {
    RatioLayerSummary s;
    s.layer = l;
    std::vector<double> vals;
    for (const auto& per_layer : r.per_image) {
      s.excluded_entries += per_layer[l].excluded;
      if (per_layer[l].median) {
        vals.push_back(*per_layer[l].median);
      } else {
        ++s.undefined;
      }
    }
    s.images = vals.size();
    if (!vals.empty()) {
      double mean = 0.0;
      for (double v : vals) mean += v;
      mean /= static_cast<double>(vals.size());
      s.mean = mean;
      if (vals.size() > 1) {
        double var = 0.0;
        for (double v : vals) var += (v - mean) * (v - mean);
        var /= static_cast<double>(vals.size() - 1);
        s.std_error = std::sqrt(var / static_cast<double>(vals.size()));
      }
    }
    r.layers.push_back(s);
  }
  return r;
}

struct KeyReplacementRecord {
  double attn_clean = 0.0;
  double attn_adv = 0.0;
  double attn_replaced = 0.0;
};

/// Requires the patch to cover exactly one image sub-patch; returns its token.
inline std::size_t aligned_token(const ViTConfig& c, const PatchPlacement& pl) {
  if (pl.height != c.patch_size || pl.width != c.patch_size || pl.row % c.patch_size != 0 || pl.col % c.patch_size != 0) {
    throw std::invalid_argument("patch is not aligned to a single token: key replacement needs a " +
                                std::to_string(c.patch_size) + "x" + std::to_string(c.patch_size) +
                                " patch on the token grid");
  }
  return token_for_pixel(c, pl.row, pl.col);
}

/// Key-replacement surgery: row `key` of P_K in every (or one) layer is
/// overwritten with its value from the clean pass.
inline LayerKeyHook clean_key_hook(const AttentionTrace& clean, std::size_t key, std::optional<std::size_t> only_layer = {}) {
  std::vector<std::vector<Tensor>> rows(clean.size());
  for (std::size_t l = 0; l < clean.size(); ++l)
    for (const HeadTrace& h : clean[l]) rows[l].push_back(h.p_k.value().row(key).reshaped(Shape{1, h.p_k.shape()[1]}));
  return [rows = std::move(rows), key, only_layer](Var pk, std::size_t layer, std::size_t head) {
    if (only_layer && layer != *only_layer) return pk;
    Tape& tape = pk.tape();
    const std::size_t n = pk.shape()[0];
    std::vector<Var> parts;
    if (key > 0) parts.push_back(slice(pk, 0, 0, key));
    parts.push_back(tape.constant(rows.at(layer).at(head)));
    if (key + 1 < n) parts.push_back(slice(pk, 0, key + 1, n));
    return parts.size() == 1 ? parts.front() : concat(parts, 0);
  };
}

/// Final-layer attention drawn by the patch token on the clean image, the
/// patched image, and the patched image with the adversarial key replaced by
/// its clean counterpart.
inline KeyReplacementRecord key_replacement_ablation(const ViTModel& model, const Tensor& clean_image, const PatchSpec& patch,
                                                     std::optional<std::size_t> only_layer = {}) {
  const std::size_t key = aligned_token(model.config, patch.placement);
  const Tensor patched = apply_patch(clean_image, patch);
  const std::size_t last = model.config.depth - 1;
  KeyReplacementRecord r;
  Tape clean_tape;
  ForwardResult clean = forward(clean_tape, model, clean_tape.constant(clean_image));
  r.attn_clean = mean_attention_to_key(clean.trace, last, key);
  r.attn_adv = final_layer_attention(model, patched, key);
  Tape tape;
  ForwardOptions opts;
  opts.key_hook = clean_key_hook(clean.trace, key, only_layer);
  ForwardResult surg = forward(tape, model, tape.constant(patched), opts);
  r.attn_replaced = mean_attention_to_key(surg.trace, last, key);
  return r;
}

struct TokenExport {
  std::size_t layer = 0;
  std::size_t head = 0;
  Tensor queries;     // n × d_k
  Tensor keys;        // n × d_k
  Tensor projection;  // 2n × min(2, d_k): queries first, then keys
  std::vector<double> final_attention;  // final layer, per query, weight on `key` (head-averaged)
  std::size_t key = 0;
};

/// Principal-component coordinates of the rows of `points` (centered), using
/// the top `k` components.
inline Tensor principal_components(const Tensor& points, std::size_t k) {
  const std::size_t n = points.rows(), d = points.cols();
  Eigen::MatrixXd x(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = points.at(i, j);
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  const Eigen::MatrixXd cov = x.transpose() * x;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  // Eigenvalues ascend; take the last k eigenvectors, largest first.
  Tensor out(Shape{n, k});
  for (std::size_t c = 0; c < k; ++c) {
    const Eigen::VectorXd axis = solver.eigenvectors().col(static_cast<Eigen::Index>(d - 1 - c));
    const Eigen::VectorXd coords = x * axis;
    for (std::size_t i = 0; i < n; ++i) out.at(i, c) = coords(static_cast<Eigen::Index>(i));
  }
  return out;
}

inline TokenExport export_projected_tokens(const AttentionTrace& trace, std::size_t layer, std::size_t head, std::size_t key) {
  if (layer >= trace.size() || head >= trace[layer].size()) {
    throw IndexError("trace has no layer " + std::to_string(layer) + " head " + std::to_string(head));
  }
  const HeadTrace& h = trace[layer][head];
  TokenExport e;
  e.layer = layer;
  e.head = head;
  e.key = key;
  e.queries = h.p_q.value();
  e.keys = h.p_k.value();
  const std::size_t n = e.queries.rows(), d = e.queries.cols();
  Tensor both(Shape{2 * n, d});
  std::copy(e.queries.values().begin(), e.queries.values().end(), both.values().begin());
  std::copy(e.keys.values().begin(), e.keys.values().end(), both.values().begin() + static_cast<std::ptrdiff_t>(n * d));
  e.projection = principal_components(both, std::min<std::size_t>(2, d));
  const LayerTrace& final_layer = trace.back();
  e.final_attention.assign(n, 0.0);
  for (const HeadTrace& fh : final_layer) {
    const Tensor& a = fh.weights.value();
    if (key >= a.cols()) throw IndexError("key " + std::to_string(key) + " outside the token sequence");
    for (std::size_t j = 0; j < n; ++j) e.final_attention[j] += a.at(j, key) / static_cast<double>(final_layer.size());
  }
  return e;
}

}  // namespace afool
