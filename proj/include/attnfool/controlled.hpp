#pragma once

// Synthetic single-head study: Gaussian tokens X_j ~ N(μ·1, I), W_Q = −w·I,
// W_K = w·I, and an adversary that shifts token 0 by ε along a fixed
// direction. Measures the smallest ε that makes (almost) every query put
// (almost) all of its attention on key 0.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "attnfool/random.hpp"
#include "attnfool/tensor.hpp"

namespace afool {

struct ControlledConfig {
  std::size_t n = 64;
  std::size_t d_k = 64;
  double mu = 1.0;
  double w = 1.0;
  double attention_threshold = 0.99;
  double success_fraction = 0.95;
  double tolerance = 1e-3;
  bool scaled = true;              // divide logits by √d_k
  double perturbation_sign = -1.0;  // X₀ ← X₀ + sign·ε·1
  double search_start = 64.0;       // 2⁶
  double search_cap = 4096.0;       // 2¹²

  void validate() const {
    if (n < 2) throw std::invalid_argument("controlled setting needs n >= 2 tokens");
    if (d_k == 0) throw std::invalid_argument("d_k must be positive");
    if (!(w >= 0.0)) throw std::invalid_argument("weight scale w must be >= 0");
    if (!(attention_threshold > 0.0 && attention_threshold < 1.0) || !(success_fraction > 0.0 && success_fraction < 1.0)) {
      throw std::invalid_argument("thresholds must lie in (0, 1)");
    }
    if (!(tolerance > 0.0)) throw std::invalid_argument("bisection tolerance must be positive");
    if (perturbation_sign != 1.0 && perturbation_sign != -1.0) throw std::invalid_argument("perturbation sign must be +1 or -1");
    if (!(search_start > 0.0 && search_cap >= search_start)) throw std::invalid_argument("invalid epsilon search range");
  }
};

/// n × d_k tokens with i.i.d. N(μ, 1) features.
inline Tensor sample_inputs(const ControlledConfig& c, std::uint64_t seed) {
  Rng rng = make_rng(seed, "controlled-inputs", c.d_k);
  return random_normal(Shape{c.n, c.d_k}, rng, c.mu, 1.0);
}

/// Post-softmax attention of the diagonal ±w head on `x`.
inline Tensor controlled_attention(const Tensor& x, const ControlledConfig& c) {
  const std::size_t n = x.rows(), d = x.cols();
  Tensor logits(Shape{n, n});
  kernel::gemm_nt(x.data(), x.data(), logits.data(), n, d, n);
  // (−w·X)(w·X)ᵀ = −w²·XXᵀ
  const double f = -c.w * c.w / (c.scaled ? std::sqrt(static_cast<double>(d)) : 1.0);
  for (double& v : logits.values()) v *= f;
  for (std::size_t j = 0; j < n; ++j) {
    double* row = logits.data() + j * n;
    const double m = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t k = 0; k < n; ++k) z += (row[k] = std::exp(row[k] - m));
    for (std::size_t k = 0; k < n; ++k) row[k] /= z;
  }
  return logits;
}

/// Fraction of queries j whose weight on key 0, A[j][0], reaches the threshold.
inline double captured_fraction(const Tensor& x, double epsilon, const ControlledConfig& c) {
  Tensor adv = x;
  for (std::size_t f = 0; f < adv.cols(); ++f) adv.at(0, f) += c.perturbation_sign * epsilon;
  const Tensor a = controlled_attention(adv, c);
  std::size_t hits = 0;
  for (std::size_t j = 0; j < a.rows(); ++j) hits += a.at(j, 0) >= c.attention_threshold;
  return static_cast<double>(hits) / static_cast<double>(a.rows());
}

inline bool controlled_attack_success(const Tensor& x, double epsilon, const ControlledConfig& c) {
  if (!(epsilon >= 0.0)) throw std::invalid_argument("epsilon must be >= 0");
  return captured_fraction(x, epsilon, c) > c.success_fraction;
}

/// Smallest successful ε up to the bisection tolerance; empty when no ε up to
/// the search cap succeeds.
inline std::optional<double> min_epsilon_bisect(const Tensor& x, const ControlledConfig& c) {
  c.validate();
  if (controlled_attack_success(x, 0.0, c)) return 0.0;
  double hi = c.search_start;
  while (!controlled_attack_success(x, hi, c)) {
    if (hi >= c.search_cap) return std::nullopt;
    hi = std::min(2.0 * hi, c.search_cap);
  }
  double lo = hi == c.search_start ? 0.0 : hi / 2.0;
  while (hi - lo > c.tolerance) {
    const double mid = 0.5 * (lo + hi);
    (controlled_attack_success(x, mid, c) ? hi : lo) = mid;
  }
  return hi;
}

inline std::optional<double> min_epsilon_bisect(const ControlledConfig& c, std::uint64_t seed) {
  return min_epsilon_bisect(sample_inputs(c, seed), c);
}

struct ControlledGrid {
  std::vector<double> mus{0.1, 0.5, 1.0};
  std::vector<double> ws{1.0, 2.0, 4.0};
  std::vector<std::size_t> d_ks{16, 64, 256};
  std::size_t size() const { return mus.size() * ws.size() * d_ks.size(); }
};

struct SweepCell {
  double mu = 0.0;
  double w = 0.0;
  std::size_t d_k = 0;
  std::size_t n = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<std::optional<double>> epsilons;  // per seed
  double median = 0.0;  // +inf when unattainable for the median seed
  bool attained() const { return std::isfinite(median); }
};

inline double median_with_inf(std::vector<std::optional<double>> const& values) {
  std::vector<double> v;
  for (const auto& e : values) v.push_back(e ? *e : std::numeric_limits<double>::infinity());
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  if (v.size() % 2 == 1) return v[m];
  return 0.5 * (v[m - 1] + v[m]);
}

/// Cells in (μ, w, d_k) row-major order. Inputs for seed s depend only on
/// (s, d_k), so every cell of one d_k sees the same noise draws shifted by μ.
inline std::vector<SweepCell> controlled_sweep(const ControlledGrid& grid, const std::vector<std::uint64_t>& seeds,
                                               const ControlledConfig& base) {
  if (grid.size() == 0) throw std::invalid_argument("controlled sweep grid is empty");
  if (seeds.empty()) throw std::invalid_argument("controlled sweep needs at least one seed");
  std::vector<SweepCell> cells;
  for (double mu : grid.mus)
    for (double w : grid.ws)
      for (std::size_t dk : grid.d_ks) {
        ControlledConfig c = base;
        c.mu = mu;
        c.w = w;
        c.d_k = dk;
        SweepCell cell{mu, w, dk, c.n, seeds, {}, 0.0};
        for (std::uint64_t s : seeds) cell.epsilons.push_back(min_epsilon_bisect(c, s));
        cell.median = median_with_inf(cell.epsilons);
        cells.push_back(std::move(cell));
      }
  return cells;
}

/// One failed comparison of the monotonicity check.
struct MonotonicityViolation {
  std::string axis;
  std::size_t from = 0;  // cell indices
  std::size_t to = 0;
};

/// Checks that the median ε* does not increase along each axis, allowing
/// `slack`·max(a, b) per comparison.
inline std::vector<MonotonicityViolation> check_sweep_monotone(const std::vector<SweepCell>& cells, const ControlledGrid& g,
                                                               double slack) {
  std::vector<MonotonicityViolation> out;
  const std::size_t nm = g.mus.size(), nw = g.ws.size(), nd = g.d_ks.size();
  auto at = [&](std::size_t i, std::size_t j, std::size_t k) { return (i * nw + j) * nd + k; };
  auto cmp = [&](const char* axis, std::size_t a, std::size_t b) {
    const double ea = cells[a].median, eb = cells[b].median;
    if (std::isinf(eb) && std::isinf(ea)) return;
    if (std::isinf(eb) || eb > ea + slack * std::max(ea, eb)) out.push_back({axis, a, b});
  };
  for (std::size_t i = 0; i < nm; ++i)
    for (std::size_t j = 0; j < nw; ++j)
      for (std::size_t k = 0; k < nd; ++k) {
        if (i + 1 < nm) cmp("mu", at(i, j, k), at(i + 1, j, k));
        if (j + 1 < nw) cmp("w", at(i, j, k), at(i, j + 1, k));
        if (k + 1 < nd) cmp("d_k", at(i, j, k), at(i, j, k + 1));
      }
  return out;
}

/// Mean silhouette of two labelled point sets under Euclidean distance.
/// A point alone in its cluster scores 0.
inline double silhouette_score(const Tensor& first, const Tensor& second) {
  if (first.rank() != 2 || second.rank() != 2 || first.cols() != second.cols()) {
    throw DimensionError("silhouette: point sets " + shape_str(first.shape()) + " and " + shape_str(second.shape()));
  }
  const std::size_t na = first.rows(), nb = second.rows(), d = first.cols();
  auto dist = [d](const double* p, const double* q) {
    double s = 0.0;
    for (std::size_t f = 0; f < d; ++f) s += (p[f] - q[f]) * (p[f] - q[f]);
    return std::sqrt(s);
  };
  auto point_score = [&](const Tensor& own, std::size_t i, const Tensor& other) {
    if (own.rows() == 1) return 0.0;
    const double* p = own.data() + i * d;
    double a = 0.0, b = 0.0;
    for (std::size_t k = 0; k < own.rows(); ++k)
      if (k != i) a += dist(p, own.data() + k * d);
    for (std::size_t k = 0; k < other.rows(); ++k) b += dist(p, other.data() + k * d);
    a /= static_cast<double>(own.rows() - 1);
    b /= static_cast<double>(other.rows());
    const double m = std::max(a, b);
    return m > 0.0 ? (b - a) / m : 0.0;
  };
  double total = 0.0;
  for (std::size_t i = 0; i < na; ++i) total += point_score(first, i, second);
  for (std::size_t i = 0; i < nb; ++i) total += point_score(second, i, first);
  return total / static_cast<double>(na + nb);
}

/// Silhouette between projected keys (w·X) and queries (−w·X) of clean inputs.
inline double controlled_silhouette(const ControlledConfig& c, std::uint64_t seed) {
  const Tensor x = sample_inputs(c, seed);
  Tensor keys = x, queries = x;
  for (double& v : keys.values()) v *= c.w;
  for (double& v : queries.values()) v *= -c.w;
  return silhouette_score(keys, queries);
}

}  // namespace afool
