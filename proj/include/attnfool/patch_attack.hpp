#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "attnfool/losses.hpp"
#include "attnfool/vit.hpp"

namespace afool {

class AttackError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Top-left anchor and size of the patch box in pixel coordinates.
struct PatchPlacement {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t height = 4;
  std::size_t width = 4;
};

/// Patch pixels p ∈ [0,1]^{C×h×w} at a placement.
struct PatchSpec {
  Tensor pixels;
  PatchPlacement placement;
};

inline void validate_placement(const PatchPlacement& pl, const Shape& image_shape) {
  if (image_shape.size() != 3) throw DimensionError("image must be C×H×W, got " + shape_str(image_shape));
  if (pl.height == 0 || pl.width == 0) throw std::invalid_argument("patch size must be positive");
  if (pl.row + pl.height > image_shape[1] || pl.col + pl.width > image_shape[2]) {
    throw std::out_of_range("patch " + std::to_string(pl.height) + "x" + std::to_string(pl.width) + " at (" +
                            std::to_string(pl.row) + "," + std::to_string(pl.col) + ") exceeds image " +
                            shape_str(image_shape));
  }
}

/// Overwrites the placement box of `image` with `patch`; differentiable in both
/// (the image only outside the box).
inline Var apply_patch(Var image, Var patch, const PatchPlacement& pl) {
  const Shape& is = image.shape();
  validate_placement(pl, is);
  const Shape ps{is[0], pl.height, pl.width};
  if (patch.shape() != ps) throw DimensionError("patch " + shape_str(patch.shape()) + " for placement " + shape_str(ps));
  const std::size_t c = is[0], h = is[1], w = is[2];
  const std::size_t base = c * h * w;
  std::vector<std::size_t> index(base);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t q = 0; q < w; ++q) {
        const bool inside = r >= pl.row && r < pl.row + pl.height && q >= pl.col && q < pl.col + pl.width;
        index[(ch * h + r) * w + q] =
            inside ? base + (ch * pl.height + (r - pl.row)) * pl.width + (q - pl.col) : (ch * h + r) * w + q;
      }
  Var joined = concat({reshape(image, Shape{base}), reshape(patch, Shape{patch.value().numel()})}, 0);
  return gather(joined, std::move(index), is);
}

inline Tensor apply_patch(const Tensor& image, const PatchSpec& patch) {
  Tape tape;
  return apply_patch(tape.constant(image), tape.constant(patch.pixels), patch.placement).value();
}

/// α⁰·½(1 + cos(π t / N)).
inline double cosine_step(double alpha0, std::size_t t, std::size_t n) {
  if (n == 0) throw std::invalid_argument("cosine_step: N must be >= 1");
  if (t > n) throw std::out_of_range("cosine_step: t=" + std::to_string(t) + " exceeds N=" + std::to_string(n));
  return alpha0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(n)));
}

struct AttackConfig {
  std::size_t iterations = 250;
  double step_size = 8.0 / 255.0;
  double momentum = 0.9;
  bool use_momentum = true;
  LossConfig loss;
  std::uint64_t seed = 0;

  void validate() const {
    if (iterations == 0) throw std::invalid_argument("attack needs at least one iteration");
    if (!(step_size >= 0.0)) throw std::invalid_argument("step size must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0, 1)");
  }
};

struct IterationRecord {
  double total = 0.0;
  std::map<std::string, double> terms;
};

struct AttackResult {
  PatchSpec patch;  // final iterate p^N
  std::vector<IterationRecord> history;  // loss at p^t, t = 0..N-1
  IterationRecord final_loss;  // loss at p^N
};

inline double sgn(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

namespace detail {

inline IterationRecord to_record(const LossBreakdown& lb) {
  IterationRecord r;
  r.total = lb.total.value().item();
  for (const auto& [name, v] : lb.terms) r.terms[name] = v.value().item();
  return r;
}

}  // namespace detail

/// Loss at the given patch and, when `gradient` is non-null, its gradient
/// with respect to the patch pixels.
inline IterationRecord evaluate_patch(const ViTModel& model, const Tensor& image, std::size_t label, const Tensor& pixels,
                                      const PatchPlacement& pl, const LossConfig& loss, Tensor* gradient) {
  Tape tape;
  Var p = gradient ? tape.leaf(pixels) : tape.constant(pixels);
  Var x = apply_patch(tape.constant(image), p, pl);
  ForwardResult fr = forward(tape, model, x);
  LossBreakdown lb = total_loss(fr.logits, fr.trace, label, loss);
  IterationRecord rec = detail::to_record(lb);
  if (gradient) *gradient = tape.backward(lb.total)[p];
  return rec;
}

/// Sign-gradient ascent on the patch with cosine step decay, optional
/// normalized momentum, and projection onto [0,1] after every step.
/// `stream` selects the p⁰ sub-stream (one per image). `on_iterate` sees
/// every iterate p^t, t = 0..N.
inline AttackResult pgd_attack(const ViTModel& model, const Tensor& image, std::size_t label, const PatchPlacement& pl,
                               const AttackConfig& cfg, std::uint64_t stream = 0,
                               const std::function<void(std::size_t, const Tensor&)>& on_iterate = {}) {
  cfg.validate();
  validate_placement(pl, image.shape());
  cfg.loss.validate(model.config.seq_len(), model.config.depth);
  Rng rng = make_rng(cfg.seed, "patch-init", stream);
  AttackResult result;
  result.patch.placement = pl;
  Tensor& p = result.patch.pixels;
  p = random_uniform(Shape{image.dim(0), pl.height, pl.width}, rng);
  Tensor m(p.shape());
  Tensor g;
  result.history.reserve(cfg.iterations);
  for (std::size_t t = 0; t < cfg.iterations; ++t) {
    if (on_iterate) on_iterate(t, p);
    IterationRecord rec = evaluate_patch(model, image, label, p, pl, cfg.loss, &g);
    if (!std::isfinite(rec.total)) throw AttackError("non-finite attack loss at iteration " + std::to_string(t));
    result.history.push_back(std::move(rec));
    const double alpha = cosine_step(cfg.step_size, t, cfg.iterations);
    const Tensor* direction = &g;
    if (cfg.use_momentum) {
      const double norm = l2_norm(g.values());
      for (std::size_t i = 0; i < m.numel(); ++i) {
        m[i] = cfg.momentum * m[i] + (norm > 0.0 ? (1.0 - cfg.momentum) * (g[i] / norm) : 0.0);
      }
      direction = &m;
    }
    for (std::size_t i = 0; i < p.numel(); ++i) p[i] = std::clamp(p[i] + alpha * sgn((*direction)[i]), 0.0, 1.0);
  }
  if (on_iterate) on_iterate(cfg.iterations, p);
  result.final_loss = evaluate_patch(model, image, label, p, pl, cfg.loss, nullptr);
  return result;
}

/// Mean over heads and queries of the weight that layer `layer` puts on key `key`.
inline double mean_attention_to_key(const AttentionTrace& trace, std::size_t layer, std::size_t key) {
  if (layer >= trace.size()) throw IndexError("layer " + std::to_string(layer) + " not traced");
  double s = 0.0;
  std::size_t count = 0;
  for (const HeadTrace& h : trace[layer]) {
    const Tensor& a = h.weights.value();
    if (key >= a.cols()) throw IndexError("key " + std::to_string(key) + " outside " + std::to_string(a.cols()) + " tokens");
    for (std::size_t j = 0; j < a.rows(); ++j, ++count) s += a.at(j, key);
  }
  return s / static_cast<double>(count);
}

/// Final-layer attention drawn by `key` on `image`.
inline double final_layer_attention(const ViTModel& model, const Tensor& image, std::size_t key) {
  Tape tape;
  ForwardResult fr = forward(tape, model, tape.constant(image));
  return mean_attention_to_key(fr.trace, fr.trace.size() - 1, key);
}

struct ImageRecord {
  std::size_t image_id = 0;
  std::size_t label = 0;
  std::size_t clean_pred = 0;
  std::size_t attacked_pred = 0;
  std::optional<std::size_t> target;
  bool success = false;
  IterationRecord final_loss;
  double attn_clean = 0.0;     // final-layer attention drawn by i★, clean image
  double attn_attacked = 0.0;  // same, with the optimized patch
  PatchSpec patch;
};

struct RobustnessReport {
  double clean_accuracy = 0.0;
  double robust_accuracy = 0.0;
  std::optional<double> targeted_success_rate;
  std::vector<ImageRecord> records;  // sorted by image_id
};

inline ImageRecord attack_one(const ViTModel& model, const Tensor& image, std::size_t label, std::size_t image_id,
                              const PatchPlacement& pl, const AttackConfig& cfg) {
  ImageRecord rec;
  rec.image_id = image_id;
  rec.label = label;
  rec.clean_pred = predict(model, image);
  const bool targeted = cfg.loss.ce && cfg.loss.ce_mode == CeMode::targeted_minimize;
  if (targeted) rec.target = cfg.loss.target_class;
  AttackResult ar = pgd_attack(model, image, label, pl, cfg, image_id);
  const Tensor attacked = apply_patch(image, ar.patch);
  rec.attacked_pred = predict(model, attacked);
  rec.success = targeted ? rec.attacked_pred == *rec.target : rec.attacked_pred != label;
  rec.final_loss = ar.final_loss;
  const std::size_t key = cfg.loss.target_key;
  rec.attn_clean = final_layer_attention(model, image, key);
  rec.attn_attacked = final_layer_attention(model, attacked, key);
  rec.patch = std::move(ar.patch);
  return rec;
}

/// Attacks every image independently (fresh p⁰ per image, sub-stream =
/// image index) and aggregates clean / robust accuracy. Results do not depend
/// on `threads`.
inline RobustnessReport evaluate_robust_accuracy(const ViTModel& model, const std::vector<Tensor>& images,
                                                 const std::vector<std::size_t>& labels, const PatchPlacement& pl,
                                                 const AttackConfig& cfg, std::size_t threads = 1) {
  if (images.size() != labels.size()) throw std::invalid_argument("images and labels differ in length");
  cfg.validate();
  if (!images.empty()) validate_placement(pl, images.front().shape());
  RobustnessReport report;
  report.records.resize(images.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < images.size(); i = next++) {
      try {
        report.records[i] = attack_one(model, images[i], labels[i], i, pl, cfg);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(threads, images.size()));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < n_threads; ++k) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  if (images.empty()) return report;
  std::size_t clean = 0, robust = 0, success = 0;
  for (const ImageRecord& r : report.records) {
    clean += r.clean_pred == r.label;
    robust += r.attacked_pred == r.label;
    success += r.success;
  }
  const double n = static_cast<double>(images.size());
  report.clean_accuracy = clean / n;
  report.robust_accuracy = robust / n;
  if (cfg.loss.ce && cfg.loss.ce_mode == CeMode::targeted_minimize) report.targeted_success_rate = success / n;
  return report;
}

}  // namespace afool
