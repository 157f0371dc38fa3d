#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "attnfool/vit.hpp"

namespace afool {

inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointMetrics {
  double train_accuracy = 0.0;
  std::optional<double> val_accuracy;
  double final_loss = 0.0;
};

struct Checkpoint {
  ViTModel model;
  std::uint64_t seed = 0;
  CheckpointMetrics metrics;
};

inline nlohmann::json config_to_json(const ViTConfig& c) {
  return {{"image_size", c.image_size}, {"channels", c.channels},     {"patch_size", c.patch_size},
          {"d_model", c.d_model},       {"depth", c.depth},           {"heads", c.heads},
          {"mlp_hidden", c.mlp_hidden}, {"num_classes", c.num_classes}, {"layernorm_eps", c.layernorm_eps}};
}

inline ViTConfig config_from_json(const nlohmann::json& j) {
  ViTConfig c;
  c.image_size = j.at("image_size").get<std::size_t>();
  c.channels = j.at("channels").get<std::size_t>();
  c.patch_size = j.at("patch_size").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.depth = j.at("depth").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.mlp_hidden = j.at("mlp_hidden").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.layernorm_eps = j.at("layernorm_eps").get<double>();
  c.validate();
  return c;
}

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  nlohmann::json params = nlohmann::json::array();
  auto emit = [&params](const std::string& name, const Tensor& t) {
    params.push_back({{"name", name},
                      {"shape", t.shape()},
                      {"values", std::vector<double>(t.values().begin(), t.values().end())}});
  };
  visit_vit_params(emit, ck.model.params);
  nlohmann::json metrics = {{"train_accuracy", ck.metrics.train_accuracy}, {"final_loss", ck.metrics.final_loss}};
  metrics["val_accuracy"] = ck.metrics.val_accuracy ? nlohmann::json(*ck.metrics.val_accuracy) : nlohmann::json(nullptr);
  nlohmann::json j = {{"version", kCheckpointVersion},
                      {"config", config_to_json(ck.model.config)},
                      {"params", std::move(params)},
                      {"seed", ck.seed},
                      {"metrics", std::move(metrics)}};
  return j.dump() + "\n";
}

inline Checkpoint parse_checkpoint(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  }
  try {
    const int version = j.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw CheckpointError("checkpoint version " + std::to_string(version) + " (expected " +
                            std::to_string(kCheckpointVersion) + ")");
    }
    Checkpoint ck;
    ck.model.config = config_from_json(j.at("config"));
    ck.model.params = zero_params(ck.model.config);
    const auto& params = j.at("params");
    std::size_t k = 0;
    auto fill = [&](const std::string& name, Tensor& t) {
      if (k >= params.size()) throw CheckpointError("malformed checkpoint: missing parameter " + name);
      const auto& entry = params[k++];
      if (entry.at("name").get<std::string>() != name) {
        throw CheckpointError("malformed checkpoint: expected parameter " + name + ", found " +
                              entry.at("name").get<std::string>());
      }
      const Shape shape = entry.at("shape").get<Shape>();
      if (shape != t.shape()) {
        throw CheckpointError("malformed checkpoint: " + name + " has shape " + shape_str(shape) + ", config implies " +
                              shape_str(t.shape()));
      }
      t = Tensor(shape, entry.at("values").get<std::vector<double>>());
    };
    visit_vit_params(fill, ck.model.params);
    if (k != params.size()) throw CheckpointError("malformed checkpoint: unexpected extra parameters");
    ck.seed = j.at("seed").get<std::uint64_t>();
    const auto& m = j.at("metrics");
    ck.metrics.train_accuracy = m.at("train_accuracy").get<double>();
    ck.metrics.final_loss = m.at("final_loss").get<double>();
    if (!m.at("val_accuracy").is_null()) ck.metrics.val_accuracy = m.at("val_accuracy").get<double>();
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  } catch (const DimensionError& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open " + path + " for writing");
  out << serialize_checkpoint(ck);
  if (!out) throw CheckpointError("failed writing " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

}  // namespace afool
