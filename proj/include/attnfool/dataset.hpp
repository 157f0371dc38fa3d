#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "attnfool/random.hpp"
#include "attnfool/tensor.hpp"

namespace afool {

/// Class-prototype generator: each class owns a fixed random image, samples
/// add uniform noise in [-noise, noise] and clip to [0, 1].
struct DatasetSpec {
  std::size_t num_classes = 4;
  std::size_t channels = 3;
  std::size_t image_size = 16;
  std::size_t samples_per_class = 64;
  double noise = 0.3;
};

struct SyntheticDataset {
  DatasetSpec spec;
  std::uint64_t seed = 0;
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;

  std::size_t size() const { return images.size(); }
};

/// Prototypes depend only on (seed, class), so a train and a test split drawn
/// with the same `seed` and different `split` share prototypes.
inline SyntheticDataset generate_synthetic_dataset(const DatasetSpec& spec, std::uint64_t seed, std::uint64_t split = 0) {
  if (!(spec.noise >= 0.0)) throw std::invalid_argument("dataset noise must be >= 0");
  if (spec.num_classes == 0 || spec.channels == 0 || spec.image_size == 0) {
    throw std::invalid_argument("dataset dimensions must be positive");
  }
  const Shape shape{spec.channels, spec.image_size, spec.image_size};
  std::vector<Tensor> prototypes;
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    Rng rng = make_rng(seed, "prototype", k);
    prototypes.push_back(random_uniform(shape, rng));
  }
  SyntheticDataset ds{spec, seed, {}, {}};
  Rng rng = make_rng(seed, "samples", split);
  std::uniform_real_distribution<double> noise(-spec.noise, spec.noise);
  for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
    for (std::size_t k = 0; k < spec.num_classes; ++k) {
      Tensor img = prototypes[k];
      if (spec.noise > 0.0) {
        for (double& v : img.values()) v = std::clamp(v + noise(rng), 0.0, 1.0);
      }
      ds.images.push_back(std::move(img));
      ds.labels.push_back(k);
    }
  }
  return ds;
}

}  // namespace afool
