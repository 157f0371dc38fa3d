#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "attnfool/dataset.hpp"
#include "attnfool/vit.hpp"

namespace afool {

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t epoch) : std::runtime_error(what), epoch_(epoch) {}
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t epoch_;
};

struct TrainOptions {
  std::size_t epochs = 8;
  double lr = 0.05;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
};

struct TrainResult {
  ViTModel model;
  double train_accuracy = 0.0;
  std::optional<double> val_accuracy;
  double final_loss = 0.0;  // mean cross-entropy of the last epoch
};

inline double accuracy(const ViTModel& model, const SyntheticDataset& ds) {
  if (ds.size() == 0) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) correct += predict(model, ds.images[i]) == ds.labels[i];
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

/// Cross-entropy and parameter gradients for one sample.
inline double sample_gradients(const ViTModel& model, const Tensor& image, std::size_t label, ViTParams& grad_sum) {
  Tape tape;
  ForwardOptions opts;
  opts.trainable = true;
  ForwardResult fr = forward(tape, model, tape.constant(image), opts);
  Var loss = cross_entropy(fr.logits, label);
  const Gradients grads = tape.backward(loss);
  auto accumulate = [&grads](const std::string&, Tensor& sum, const Var& v) {
    const Tensor g = grads[v];
    for (std::size_t i = 0; i < sum.numel(); ++i) sum[i] += g[i];
  };
  visit_vit_params(accumulate, grad_sum, fr.params);
  return loss.value().item();
}

/// Mini-batch SGD on cross-entropy from a seed-determined initialization.
inline TrainResult train_toy(const ViTConfig& config, const SyntheticDataset& data, const TrainOptions& opts,
                             const SyntheticDataset* validation = nullptr) {
  if (data.size() == 0) throw std::invalid_argument("training set is empty");
  if (opts.batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  config.validate();
  TrainResult result{init_vit(config, opts.seed), 0.0, std::nullopt, 0.0};
  ViTModel& model = result.model;
  Rng shuffle_rng = make_rng(opts.seed, "shuffle");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t stop = std::min(order.size(), start + opts.batch_size);
      ViTParams grad = zero_params(config);
      auto zero = [](const std::string&, Tensor& t) { std::fill(t.values().begin(), t.values().end(), 0.0); };
      visit_vit_params(zero, grad);
      for (std::size_t k = start; k < stop; ++k) loss_sum += sample_gradients(model, data.images[order[k]], data.labels[order[k]], grad);
      if (!std::isfinite(loss_sum)) {
        throw TrainingError("training diverged (non-finite loss) in epoch " + std::to_string(epoch), epoch);
      }
      const double step = opts.lr / static_cast<double>(stop - start);
      auto update = [step](const std::string&, Tensor& p, const Tensor& g) {
        for (std::size_t i = 0; i < p.numel(); ++i) p[i] -= step * g[i];
      };
      visit_vit_params(update, model.params, grad);
    }
    result.final_loss = loss_sum / static_cast<double>(data.size());
  }
  result.train_accuracy = accuracy(model, data);
  if (validation) result.val_accuracy = accuracy(model, *validation);
  return result;
}

}  // namespace afool
