#pragma once

#include <string>

#include <json.hpp>

#include "attnfool/attention.hpp"

namespace afool {

/// {"shape": [...], "values": [...]} with values in row-major order.
inline nlohmann::json tensor_to_json(const Tensor& t) {
  return {{"shape", t.shape()}, {"values", std::vector<double>(t.values().begin(), t.values().end())}};
}

/// One entry per layer and head holding P_Q, P_K, B and A.
inline nlohmann::json trace_to_json(const AttentionTrace& trace) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < trace.size(); ++l) {
    nlohmann::json heads = nlohmann::json::array();
    for (std::size_t h = 0; h < trace[l].size(); ++h) {
      const HeadTrace& t = trace[l][h];
      heads.push_back({{"layer", l},
                       {"head", h},
                       {"p_q", tensor_to_json(t.p_q.value())},
                       {"p_k", tensor_to_json(t.p_k.value())},
                       {"logits", tensor_to_json(t.logits.value())},
                       {"weights", tensor_to_json(t.weights.value())}});
    }
    layers.push_back(std::move(heads));
  }
  return {{"layers", layers}};
}

/// Writes the trace of one forward pass as JSON text.
inline std::string export_trace(const AttentionTrace& trace) { return trace_to_json(trace).dump() + "\n"; }

}  // namespace afool
