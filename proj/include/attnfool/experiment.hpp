#pragma once

// Subcommand runners behind the command-line tool. Each runner parses its
// config sections, computes every artifact in memory, and only then writes
// the output directory (results, config echo, manifest).

#include <algorithm>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnfool/checkpoint.hpp"
#include "attnfool/config.hpp"
#include "attnfool/controlled.hpp"
#include "attnfool/dataset.hpp"
#include "attnfool/diagnostics.hpp"
#include "attnfool/io.hpp"
#include "attnfool/losses.hpp"
#include "attnfool/patch_attack.hpp"
#include "attnfool/trace_export.hpp"
#include "attnfool/train.hpp"
#include "attnfool/vit.hpp"

namespace afool {

/// Flags shared by every subcommand.
struct CommonOptions {
  std::optional<std::string> config_path;
  std::string out_dir = "out";
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
};

enum ExitCode : int { kExitOk = 0, kExitRuntime = 1, kExitConfig = 2 };

struct DataSettings {
  std::size_t samples_per_class = 64;
  std::size_t test_samples_per_class = 16;
  double noise = 0.3;
};

struct AttackSettings {
  std::string checkpoint;
  std::size_t images = 64;
  AttackConfig attack;
  PatchPlacement placement;
  bool auto_key = true;  // i★ follows the patch's top-left pixel
};

struct ControlledSettings {
  ControlledConfig base;
  ControlledGrid grid;
  std::size_t seeds = 5;
  double slack = 0.02;
  bool silhouette = true;
};

struct DiagnoseSettings {
  std::string checkpoint;
  std::string init_checkpoint;
  bool compare_init = false;
  std::set<std::string> reports;
  std::size_t images = 16;         // images for the gradient-ratio report
  std::size_t attack_images = 16;  // attacked images for key replacement
  std::size_t token_image = 0;
  std::optional<std::size_t> token_layer;  // default: last layer
  std::size_t token_head = 0;
  std::optional<std::size_t> replace_layer;  // key surgery in one layer; all layers when empty
};

inline const std::vector<std::string>& all_reports() {
  static const std::vector<std::string> r{"singular_values", "gradient_ratio", "tokens", "key_replacement"};
  return r;
}

/// Effective settings of one run.
struct RunConfig {
  std::string command;
  std::uint64_t seed = 0;
  ViTConfig model;
  DataSettings data;
  TrainOptions train;
  AttackSettings attack;
  ControlledSettings controlled;
  DiagnoseSettings diagnose;
};

namespace detail {

inline Aggregation parse_aggregation(const std::string& key, const std::string& v) {
  if (v == "smax") return Aggregation::smax;
  if (v == "mean") return Aggregation::mean;
  if (v == "max") return Aggregation::max;
  throw ConfigError(key + ": expected smax, mean or max, got '" + v + "'");
}

inline std::size_t parse_index(const std::string& key, const std::string& v, const std::string& expected) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected " + expected + ", got '" + v + "'");
  return out;
}

inline void parse_data(IniConfig& ini, DataSettings& d) {
  d.samples_per_class = ini.get_uint<std::size_t>("data.samples_per_class", d.samples_per_class);
  d.test_samples_per_class = ini.get_uint<std::size_t>("data.test_samples_per_class", d.test_samples_per_class);
  d.noise = ini.get_double("data.noise", d.noise);
  if (d.samples_per_class == 0 || d.test_samples_per_class == 0) throw ConfigError("data: sample counts must be positive");
  if (!(d.noise >= 0.0)) throw ConfigError("data.noise must be >= 0");
}

inline void parse_loss(IniConfig& ini, LossConfig& l, bool& auto_key, const std::vector<std::string>& default_terms) {
  const auto terms = ini.get_list("loss.terms", default_terms);
  l.ce = l.kq = l.kq_star = l.patch_fool = false;
  for (const std::string& t : terms) {
    if (t == "ce") l.ce = true;
    else if (t == "kq") l.kq = true;
    else if (t == "kq_star") l.kq_star = true;
    else if (t == "patch_fool") l.patch_fool = true;
    else throw ConfigError("loss.terms: unknown term '" + t + "'");
  }
  if (!l.any_term()) throw ConfigError("loss.terms: at least one term is required");
  const std::string mode = ini.get_string("loss.ce_mode", "untargeted");
  if (mode == "untargeted") l.ce_mode = CeMode::untargeted_maximize;
  else if (mode == "targeted") l.ce_mode = CeMode::targeted_minimize;
  else throw ConfigError("loss.ce_mode: expected untargeted or targeted, got '" + mode + "'");
  if (ini.has("loss.target_class")) l.target_class = ini.get_uint<std::size_t>("loss.target_class", 0);
  if (l.ce && l.ce_mode == CeMode::targeted_minimize && !l.target_class) {
    throw ConfigError("loss.ce_mode = targeted needs loss.target_class");
  }
  const std::string key = ini.get_string("loss.target_key", "auto");
  auto_key = key == "auto";
  if (!auto_key) {
    l.target_key = parse_index("loss.target_key", key, "auto or a token index");
  }
  l.target_query = ini.get_uint<std::size_t>("loss.target_query", l.target_query);
  const std::string layer = ini.get_string("loss.layer", "all");
  if (layer == "all") {
    l.layer.reset();
  } else {
    l.layer = parse_index("loss.layer", layer, "all or a layer index");
  }
  l.head_aggregation = parse_aggregation("loss.head_aggregation", ini.get_string("loss.head_aggregation", "smax"));
  l.layer_aggregation = parse_aggregation("loss.layer_aggregation", ini.get_string("loss.layer_aggregation", "smax"));
  l.normalize = ini.get_bool("loss.normalize", l.normalize);
  l.weight_ce = ini.get_double("loss.weight_ce", l.weight_ce);
  l.weight_kq = ini.get_double("loss.weight_kq", l.weight_kq);
  l.weight_kq_star = ini.get_double("loss.weight_kq_star", l.weight_kq_star);
  l.weight_patch_fool = ini.get_double("loss.weight_patch_fool", l.weight_patch_fool);
}

inline void parse_attack(IniConfig& ini, AttackSettings& a, bool needs_checkpoint, const std::vector<std::string>& default_terms) {
  if (needs_checkpoint) {
    a.checkpoint = ini.get_string("attack.checkpoint", "");
    if (a.checkpoint.empty()) throw ConfigError("attack.checkpoint is required");
  }
  a.images = ini.get_uint<std::size_t>("attack.images", a.images);
  if (a.images == 0) throw ConfigError("attack.images must be positive");
  AttackConfig& c = a.attack;
  c.iterations = ini.get_uint<std::size_t>("attack.iterations", c.iterations);
  c.step_size = ini.get_double("attack.step_size", c.step_size);
  c.momentum = ini.get_double("attack.momentum", c.momentum);
  c.use_momentum = ini.get_bool("attack.use_momentum", c.use_momentum);
  a.placement.row = ini.get_uint<std::size_t>("attack.patch_row", a.placement.row);
  a.placement.col = ini.get_uint<std::size_t>("attack.patch_col", a.placement.col);
  a.placement.height = ini.get_uint<std::size_t>("attack.patch_height", a.placement.height);
  a.placement.width = ini.get_uint<std::size_t>("attack.patch_width", a.placement.width);
  if (a.placement.height == 0 || a.placement.width == 0) throw ConfigError("attack: patch size must be positive");
  parse_loss(ini, c.loss, a.auto_key, default_terms);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("attack: ") + e.what());
  }
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ", ";
    if constexpr (std::is_floating_point_v<T>) s += fmt_double(v[i]);
    else s += std::to_string(v[i]);
  }
  return s;
}

inline std::string bool_str(bool b) { return b ? "true" : "false"; }

inline std::vector<std::string> enabled_terms(const LossConfig& l) {
  std::vector<std::string> t;
  if (l.ce) t.push_back("ce");
  if (l.kq) t.push_back("kq");
  if (l.kq_star) t.push_back("kq_star");
  if (l.patch_fool) t.push_back("patch_fool");
  return t;
}

inline std::string loss_terms(const LossConfig& l) {
  const std::vector<std::string> t = enabled_terms(l);
  std::string s;
  for (std::size_t i = 0; i < t.size(); ++i) s += (i ? ", " : "") + t[i];
  return s;
}

class IniWriter {
 public:
  IniWriter& section(const std::string& name) {
    if (!first_) out_ << '\n';
    first_ = false;
    out_ << '[' << name << "]\n";
    return *this;
  }
  IniWriter& kv(const std::string& k, const std::string& v) {
    out_ << k << " = " << v << '\n';
    return *this;
  }
  IniWriter& kv(const std::string& k, double v) { return kv(k, fmt_double(v)); }
  IniWriter& kv(const std::string& k, std::size_t v) { return kv(k, std::to_string(v)); }
  IniWriter& kv(const std::string& k, std::uint64_t v, int) { return kv(k, std::to_string(v)); }
  std::string str() const { return out_.str(); }

 private:
  std::ostringstream out_;
  bool first_ = true;
};

inline void echo_data(IniWriter& w, const DataSettings& d) {
  w.section("data").kv("samples_per_class", d.samples_per_class).kv("test_samples_per_class", d.test_samples_per_class).kv("noise", d.noise);
}

inline void echo_attack(IniWriter& w, const AttackSettings& a, bool with_checkpoint) {
  w.section("attack");
  if (with_checkpoint) w.kv("checkpoint", a.checkpoint);
  const AttackConfig& c = a.attack;
  w.kv("images", a.images).kv("iterations", c.iterations).kv("step_size", c.step_size).kv("momentum", c.momentum);
  w.kv("use_momentum", bool_str(c.use_momentum));
  w.kv("patch_row", a.placement.row).kv("patch_col", a.placement.col);
  w.kv("patch_height", a.placement.height).kv("patch_width", a.placement.width);
  const LossConfig& l = c.loss;
  w.section("loss").kv("terms", loss_terms(l)).kv("ce_mode", std::string(to_string(l.ce_mode)));
  if (l.target_class) w.kv("target_class", *l.target_class);
  w.kv("target_key", a.auto_key ? std::string("auto") : std::to_string(l.target_key));
  w.kv("target_query", l.target_query);
  w.kv("layer", l.layer ? std::to_string(*l.layer) : std::string("all"));
  w.kv("head_aggregation", std::string(to_string(l.head_aggregation)));
  w.kv("layer_aggregation", std::string(to_string(l.layer_aggregation)));
  w.kv("normalize", bool_str(l.normalize));
  w.kv("weight_ce", l.weight_ce).kv("weight_kq", l.weight_kq).kv("weight_kq_star", l.weight_kq_star).kv("weight_patch_fool", l.weight_patch_fool);
}

}  // namespace detail

/// Reads the sections used by `command`; unknown sections and keys are errors.
inline RunConfig parse_run_config(const std::string& command, IniConfig ini, std::optional<std::uint64_t> seed_override) {
  RunConfig rc;
  rc.command = command;
  rc.seed = ini.get_uint<std::uint64_t>("global.seed", 0);
  if (seed_override) rc.seed = *seed_override;
  std::set<std::string> sections{"global"};
  if (command == "train") {
    sections.insert({"model", "data", "train"});
    ViTConfig& m = rc.model;
    m.image_size = ini.get_uint<std::size_t>("model.image_size", m.image_size);
    m.channels = ini.get_uint<std::size_t>("model.channels", m.channels);
    m.patch_size = ini.get_uint<std::size_t>("model.patch_size", m.patch_size);
    m.d_model = ini.get_uint<std::size_t>("model.d_model", m.d_model);
    m.depth = ini.get_uint<std::size_t>("model.depth", m.depth);
    m.heads = ini.get_uint<std::size_t>("model.heads", m.heads);
    m.mlp_hidden = ini.get_uint<std::size_t>("model.mlp_hidden", m.mlp_hidden);
    m.num_classes = ini.get_uint<std::size_t>("model.num_classes", m.num_classes);
    m.layernorm_eps = ini.get_double("model.layernorm_eps", m.layernorm_eps);
    try {
      m.validate();
    } catch (const DimensionError& e) {
      throw ConfigError(std::string("model: ") + e.what());
    }
    detail::parse_data(ini, rc.data);
    rc.train.epochs = ini.get_uint<std::size_t>("train.epochs", rc.train.epochs);
    rc.train.lr = ini.get_double("train.lr", rc.train.lr);
    rc.train.batch_size = ini.get_uint<std::size_t>("train.batch_size", rc.train.batch_size);
    if (rc.train.batch_size == 0) throw ConfigError("train.batch_size must be positive");
    if (!(rc.train.lr > 0.0)) throw ConfigError("train.lr must be positive");
    rc.train.seed = rc.seed;
  } else if (command == "attack") {
    sections.insert({"data", "attack", "loss"});
    detail::parse_data(ini, rc.data);
    detail::parse_attack(ini, rc.attack, true, {"ce"});
    rc.attack.attack.seed = rc.seed;
  } else if (command == "controlled") {
    sections.insert({"controlled"});
    ControlledSettings& s = rc.controlled;
    ControlledConfig& c = s.base;
    s.grid.mus = ini.get_double_list("controlled.mus", s.grid.mus);
    s.grid.ws = ini.get_double_list("controlled.ws", s.grid.ws);
    s.grid.d_ks = ini.get_uint_list("controlled.d_ks", s.grid.d_ks);
    if (s.grid.size() == 0) throw ConfigError("controlled: the grid is empty (mus, ws and d_ks need at least one value each)");
    for (std::size_t dk : s.grid.d_ks)
      if (dk == 0) throw ConfigError("controlled.d_ks: values must be positive");
    for (double w : s.grid.ws)
      if (!(w >= 0.0)) throw ConfigError("controlled.ws: values must be >= 0");
    c.n = ini.get_uint<std::size_t>("controlled.n", c.n);
    s.seeds = ini.get_uint<std::size_t>("controlled.seeds", s.seeds);
    if (s.seeds == 0) throw ConfigError("controlled.seeds must be positive");
    c.attention_threshold = ini.get_double("controlled.attention_threshold", c.attention_threshold);
    c.success_fraction = ini.get_double("controlled.success_fraction", c.success_fraction);
    c.tolerance = ini.get_double("controlled.tolerance", c.tolerance);
    c.scaled = ini.get_bool("controlled.scaled", c.scaled);
    c.perturbation_sign = ini.get_double("controlled.perturbation_sign", c.perturbation_sign);
    c.search_start = ini.get_double("controlled.search_start", c.search_start);
    c.search_cap = ini.get_double("controlled.search_cap", c.search_cap);
    s.slack = ini.get_double("controlled.slack", s.slack);
    s.silhouette = ini.get_bool("controlled.silhouette", s.silhouette);
    if (!(s.slack >= 0.0)) throw ConfigError("controlled.slack must be >= 0");
    try {
      c.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("controlled: ") + e.what());
    }
  } else if (command == "diagnose") {
    sections.insert({"data", "diagnose", "attack", "loss"});
    DiagnoseSettings& d = rc.diagnose;
    d.checkpoint = ini.get_string("diagnose.checkpoint", "");
    if (d.checkpoint.empty()) throw ConfigError("diagnose.checkpoint is required");
    d.init_checkpoint = ini.get_string("diagnose.init_checkpoint", "");
    d.compare_init = ini.get_bool("diagnose.compare_init", d.compare_init);
    if (d.compare_init && d.init_checkpoint.empty()) {
      throw ConfigError("diagnose.compare_init needs diagnose.init_checkpoint (a second checkpoint)");
    }
    for (const std::string& r : ini.get_list("diagnose.reports", {"all"})) {
      if (r == "all") {
        d.reports.insert(all_reports().begin(), all_reports().end());
      } else if (std::find(all_reports().begin(), all_reports().end(), r) != all_reports().end()) {
        d.reports.insert(r);
      } else {
        throw ConfigError("diagnose.reports: unknown report '" + r + "'");
      }
    }
    if (d.reports.empty()) throw ConfigError("diagnose.reports selects nothing");
    d.images = ini.get_uint<std::size_t>("diagnose.images", d.images);
    d.attack_images = ini.get_uint<std::size_t>("diagnose.attack_images", d.attack_images);
    if (d.images == 0 || d.attack_images == 0) throw ConfigError("diagnose: image counts must be positive");
    d.token_image = ini.get_uint<std::size_t>("diagnose.token_image", d.token_image);
    if (ini.has("diagnose.token_layer")) d.token_layer = ini.get_uint<std::size_t>("diagnose.token_layer", 0);
    d.token_head = ini.get_uint<std::size_t>("diagnose.token_head", d.token_head);
    const std::string rl = ini.get_string("diagnose.replace_layer", "all");
    if (rl != "all") d.replace_layer = detail::parse_index("diagnose.replace_layer", rl, "all or a layer index");
    detail::parse_data(ini, rc.data);
    detail::parse_attack(ini, rc.attack, false, {"kq"});
    rc.attack.attack.seed = rc.seed;
  } else {
    throw ConfigError("unknown subcommand '" + command + "'");
  }
  ini.reject_unknown(sections);
  return rc;
}

/// Effective configuration in the same format the parser reads.
inline std::string echo_config(const RunConfig& rc) {
  detail::IniWriter w;
  w.section("global").kv("seed", rc.seed, 0);
  if (rc.command == "train") {
    const ViTConfig& m = rc.model;
    w.section("model").kv("image_size", m.image_size).kv("channels", m.channels).kv("patch_size", m.patch_size);
    w.kv("d_model", m.d_model).kv("depth", m.depth).kv("heads", m.heads).kv("mlp_hidden", m.mlp_hidden);
    w.kv("num_classes", m.num_classes).kv("layernorm_eps", m.layernorm_eps);
    detail::echo_data(w, rc.data);
    w.section("train").kv("epochs", rc.train.epochs).kv("lr", rc.train.lr).kv("batch_size", rc.train.batch_size);
  } else if (rc.command == "attack") {
    detail::echo_data(w, rc.data);
    detail::echo_attack(w, rc.attack, true);
  } else if (rc.command == "controlled") {
    const ControlledSettings& s = rc.controlled;
    const ControlledConfig& c = s.base;
    w.section("controlled").kv("mus", detail::join(s.grid.mus)).kv("ws", detail::join(s.grid.ws)).kv("d_ks", detail::join(s.grid.d_ks));
    w.kv("n", c.n).kv("seeds", s.seeds).kv("attention_threshold", c.attention_threshold).kv("success_fraction", c.success_fraction);
    w.kv("tolerance", c.tolerance).kv("scaled", detail::bool_str(c.scaled)).kv("perturbation_sign", c.perturbation_sign);
    w.kv("search_start", c.search_start).kv("search_cap", c.search_cap).kv("slack", s.slack);
    w.kv("silhouette", detail::bool_str(s.silhouette));
  } else if (rc.command == "diagnose") {
    const DiagnoseSettings& d = rc.diagnose;
    w.section("diagnose").kv("checkpoint", d.checkpoint);
    if (!d.init_checkpoint.empty()) w.kv("init_checkpoint", d.init_checkpoint);
    w.kv("compare_init", detail::bool_str(d.compare_init));
    std::string reports;
    for (const std::string& r : all_reports())
      if (d.reports.count(r)) reports += (reports.empty() ? "" : ", ") + r;
    w.kv("reports", reports).kv("images", d.images).kv("attack_images", d.attack_images).kv("token_image", d.token_image);
    if (d.token_layer) w.kv("token_layer", *d.token_layer);
    w.kv("token_head", d.token_head);
    w.kv("replace_layer", d.replace_layer ? std::to_string(*d.replace_layer) : std::string("all"));
    detail::echo_data(w, rc.data);
    detail::echo_attack(w, rc.attack, false);
  }
  return w.str();
}

namespace detail {

inline SyntheticDataset test_split(const ViTConfig& model, std::uint64_t data_seed, const DataSettings& d) {
  DatasetSpec spec;
  spec.num_classes = model.num_classes;
  spec.channels = model.channels;
  spec.image_size = model.image_size;
  spec.samples_per_class = d.test_samples_per_class;
  spec.noise = d.noise;
  return generate_synthetic_dataset(spec, data_seed, 1);
}

/// Attack config with i★ resolved against the model's token grid.
inline AttackConfig resolve_attack(const AttackSettings& a, const ViTConfig& model) {
  validate_placement(a.placement, model.image_shape());
  AttackConfig c = a.attack;
  if (a.auto_key) c.loss.target_key = token_for_pixel(model, a.placement.row, a.placement.col);
  c.loss.validate(model.seq_len(), model.depth);
  if (c.loss.ce && c.loss.ce_mode == CeMode::targeted_minimize && *c.loss.target_class >= model.num_classes) {
    throw std::out_of_range("target class " + std::to_string(*c.loss.target_class) + " for " + std::to_string(model.num_classes) + " classes");
  }
  return c;
}

inline nlohmann::json token_export_json(const TokenExport& e) {
  return {{"layer", e.layer},
          {"head", e.head},
          {"key", e.key},
          {"queries", tensor_to_json(e.queries)},
          {"keys", tensor_to_json(e.keys)},
          {"projection", tensor_to_json(e.projection)},
          {"final_attention", e.final_attention}};
}

}  // namespace detail

// ---------------------------------------------------------------- runners

inline OutputBundle run_train(const RunConfig& rc, std::ostream& log) {
  DatasetSpec spec;
  spec.num_classes = rc.model.num_classes;
  spec.channels = rc.model.channels;
  spec.image_size = rc.model.image_size;
  spec.samples_per_class = rc.data.samples_per_class;
  spec.noise = rc.data.noise;
  const SyntheticDataset train = generate_synthetic_dataset(spec, rc.seed, 0);
  spec.samples_per_class = rc.data.test_samples_per_class;
  const SyntheticDataset val = generate_synthetic_dataset(spec, rc.seed, 1);
  TrainResult tr = train_toy(rc.model, train, rc.train, &val);
  log << "train: accuracy " << fmt_double(tr.train_accuracy) << ", held-out " << fmt_double(*tr.val_accuracy) << "\n";

  Checkpoint ck{tr.model, rc.seed, {tr.train_accuracy, tr.val_accuracy, tr.final_loss}};
  Checkpoint init{init_vit(rc.model, rc.seed), rc.seed, {}};
  init.metrics.train_accuracy = accuracy(init.model, train);
  init.metrics.val_accuracy = accuracy(init.model, val);
  nlohmann::json metrics = {{"train_accuracy", tr.train_accuracy},
                            {"val_accuracy", *tr.val_accuracy},
                            {"final_loss", tr.final_loss},
                            {"epochs", rc.train.epochs},
                            {"train_images", train.size()},
                            {"val_images", val.size()},
                            {"parameters", tr.model.num_parameters()},
                            {"seed", rc.seed}};
  OutputBundle out;
  out.add("checkpoint.json", serialize_checkpoint(ck));
  out.add("init_checkpoint.json", serialize_checkpoint(init));
  out.add("metrics.json", metrics.dump(2) + "\n");
  return out;
}

inline OutputBundle run_attack(const RunConfig& rc, std::size_t threads, std::ostream& log) {
  const AttackSettings& a = rc.attack;
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const AttackConfig cfg = detail::resolve_attack(a, ck.model.config);
  const SyntheticDataset test = detail::test_split(ck.model.config, ck.seed, rc.data);
  if (a.images > test.size()) {
    throw std::out_of_range("attack.images = " + std::to_string(a.images) + " but the test split has " + std::to_string(test.size()) +
                            " images (raise data.test_samples_per_class)");
  }
  const std::vector<Tensor> images(test.images.begin(), test.images.begin() + static_cast<std::ptrdiff_t>(a.images));
  const std::vector<std::size_t> labels(test.labels.begin(), test.labels.begin() + static_cast<std::ptrdiff_t>(a.images));
  const RobustnessReport rep = evaluate_robust_accuracy(ck.model, images, labels, a.placement, cfg, threads);

  const std::vector<std::string> terms = detail::enabled_terms(cfg.loss);
  std::vector<std::string> header{"image_id", "clean_pred", "attacked_pred", "label", "target", "success", "final_loss"};
  for (const std::string& t : terms) header.push_back("final_" + t);
  header.insert(header.end(), {"attn_clean", "attn_attacked"});
  CsvWriter csv(header);
  double attn_clean = 0.0, attn_attacked = 0.0;
  for (const ImageRecord& r : rep.records) {
    std::vector<std::string> row{std::to_string(r.image_id), std::to_string(r.clean_pred), std::to_string(r.attacked_pred),
                                 std::to_string(r.label),    r.target ? std::to_string(*r.target) : "",
                                 r.success ? "1" : "0",      fmt_double(r.final_loss.total)};
    for (const std::string& t : terms) row.push_back(fmt_double(r.final_loss.terms.at(t)));
    row.push_back(fmt_double(r.attn_clean));
    row.push_back(fmt_double(r.attn_attacked));
    csv.row(row);
    attn_clean += r.attn_clean;
    attn_attacked += r.attn_attacked;
  }
  const double n = static_cast<double>(rep.records.size());
  nlohmann::json summary = {
      {"images", rep.records.size()},
      {"clean_accuracy", rep.clean_accuracy},
      {"robust_accuracy", rep.robust_accuracy},
      {"targeted_success_rate", rep.targeted_success_rate ? nlohmann::json(*rep.targeted_success_rate) : nlohmann::json(nullptr)},
      {"mean_attn_clean", attn_clean / n},
      {"mean_attn_attacked", attn_attacked / n},
      {"attack",
       {{"iterations", cfg.iterations},
        {"step_size", cfg.step_size},
        {"step_size_x255", cfg.step_size * 255.0},
        {"momentum", cfg.momentum},
        {"use_momentum", cfg.use_momentum},
        {"seed", cfg.seed}}},
      {"loss",
       {{"terms", terms},
        {"ce_mode", to_string(cfg.loss.ce_mode)},
        {"target_key", cfg.loss.target_key},
        {"target_query", cfg.loss.target_query},
        {"layer", cfg.loss.layer ? nlohmann::json(*cfg.loss.layer) : nlohmann::json("all")},
        {"head_aggregation", to_string(cfg.loss.head_aggregation)},
        {"layer_aggregation", to_string(cfg.loss.layer_aggregation)},
        {"normalize", cfg.loss.normalize}}},
      {"patch", {{"row", a.placement.row}, {"col", a.placement.col}, {"height", a.placement.height}, {"width", a.placement.width}}},
      {"checkpoint", a.checkpoint},
      {"config", echo_config(rc)}};
  log << "attack: clean " << fmt_double(rep.clean_accuracy) << ", robust " << fmt_double(rep.robust_accuracy) << "\n";
  OutputBundle out;
  out.add("per_image.csv", csv.str());
  out.add("summary.json", summary.dump(2) + "\n");
  return out;
}

inline std::vector<std::uint64_t> controlled_seeds(std::uint64_t base, std::size_t count) {
  std::vector<std::uint64_t> s;
  for (std::size_t i = 0; i < count; ++i) s.push_back(derive_seed(base, "controlled", i));
  return s;
}

inline OutputBundle run_controlled(const RunConfig& rc, std::ostream& log) {
  const ControlledSettings& s = rc.controlled;
  const std::vector<std::uint64_t> seeds = controlled_seeds(rc.seed, s.seeds);
  const std::vector<SweepCell> cells = controlled_sweep(s.grid, seeds, s.base);

  CsvWriter sweep({"mu", "w", "d_k", "n", "seed_or_median", "epsilon_star", "attained"});
  for (const SweepCell& c : cells) {
    for (std::size_t k = 0; k < c.seeds.size(); ++k) {
      const auto& e = c.epsilons[k];
      sweep.row({fmt_double(c.mu), fmt_double(c.w), std::to_string(c.d_k), std::to_string(c.n), std::to_string(c.seeds[k]),
                 e ? fmt_double(*e) : "inf", e ? "1" : "0"});
    }
    sweep.row({fmt_double(c.mu), fmt_double(c.w), std::to_string(c.d_k), std::to_string(c.n), "median", fmt_double(c.median),
               c.attained() ? "1" : "0"});
  }

  std::ostringstream report;
  const auto violations = check_sweep_monotone(cells, s.grid, s.slack);
  report << "epsilon_star monotonicity (median non-increasing in mu, w, d_k; slack " << fmt_double(s.slack) << ")\n";
  report << "violations: " << violations.size() << "\n";
  for (const auto& v : violations) {
    const SweepCell& a = cells[v.from];
    const SweepCell& b = cells[v.to];
    report << "  axis " << v.axis << ": (mu=" << fmt_double(a.mu) << ", w=" << fmt_double(a.w) << ", d_k=" << a.d_k << ") "
           << fmt_double(a.median) << " -> (mu=" << fmt_double(b.mu) << ", w=" << fmt_double(b.w) << ", d_k=" << b.d_k << ") "
           << fmt_double(b.median) << "\n";
  }

  OutputBundle out;
  if (s.silhouette) {
    CsvWriter sil({"mu", "w", "d_k", "seed", "score"});
    const std::size_t nw = s.grid.ws.size(), nd = s.grid.d_ks.size();
    std::vector<double> medians;
    for (const SweepCell& c : cells) {
      ControlledConfig cc = s.base;
      cc.mu = c.mu;
      cc.w = c.w;
      cc.d_k = c.d_k;
      std::vector<std::optional<double>> scores;
      for (std::uint64_t seed : seeds) {
        const double v = controlled_silhouette(cc, seed);
        scores.push_back(v);
        sil.row({fmt_double(c.mu), fmt_double(c.w), std::to_string(c.d_k), std::to_string(seed), fmt_double(v)});
      }
      medians.push_back(median_with_inf(scores));
      sil.row({fmt_double(c.mu), fmt_double(c.w), std::to_string(c.d_k), "median", fmt_double(medians.back())});
    }
    std::size_t sil_violations = 0;
    std::ostringstream detail_lines;
    for (std::size_t i = 0; i + 1 < s.grid.mus.size(); ++i)
      for (std::size_t j = 0; j < nw; ++j)
        for (std::size_t k = 0; k < nd; ++k) {
          const std::size_t a = (i * nw + j) * nd + k, b = ((i + 1) * nw + j) * nd + k;
          if (!(medians[b] > medians[a])) {
            ++sil_violations;
            detail_lines << "  (w=" << fmt_double(cells[a].w) << ", d_k=" << cells[a].d_k << ") mu " << fmt_double(cells[a].mu) << " -> "
                         << fmt_double(cells[b].mu) << ": " << fmt_double(medians[a]) << " -> " << fmt_double(medians[b]) << "\n";
          }
        }
    report << "silhouette monotonicity (median strictly increasing in mu)\n";
    report << "violations: " << sil_violations << "\n" << detail_lines.str();
    out.add("silhouette.csv", sil.str());
  }
  log << "controlled: " << cells.size() << " cells, " << violations.size() << " monotonicity violations\n";
  out.add("sweep.csv", sweep.str());
  out.add("monotonicity.txt", report.str());
  return out;
}

inline OutputBundle run_diagnose(const RunConfig& rc, std::size_t threads, std::ostream& log) {
  const DiagnoseSettings& d = rc.diagnose;
  const Checkpoint ck = load_checkpoint(d.checkpoint);
  std::optional<Checkpoint> init;
  if (d.compare_init) {
    init = load_checkpoint(d.init_checkpoint);
    if (!(init->model.config == ck.model.config)) throw CheckpointError("init and trained checkpoints have different model configs");
  }
  const ViTModel& model = ck.model;
  const SyntheticDataset test = detail::test_split(model.config, ck.seed, rc.data);
  OutputBundle out;

  if (d.reports.count("singular_values")) {
    CsvWriter csv({"model", "layer", "head", "sigma_max"});
    auto emit = [&csv](const std::string& tag, const ViTModel& m) {
      const SingularValueReport r = singular_value_report(m);
      for (const auto& row : r.rows) csv.row({tag, std::to_string(row.layer), std::to_string(row.head), fmt_double(row.sigma)});
      for (std::size_t l = 0; l < r.layer_max.size(); ++l) csv.row({tag, std::to_string(l), "max", fmt_double(r.layer_max[l])});
    };
    emit("trained", model);
    if (init) emit("init", init->model);
    out.add("singular_values.csv", csv.str());
  }

  if (d.reports.count("gradient_ratio")) {
    const std::size_t n = std::min(d.images, test.size());
    const std::vector<Tensor> imgs(test.images.begin(), test.images.begin() + static_cast<std::ptrdiff_t>(n));
    CsvWriter csv({"model", "layer", "mean_median_ratio", "std_error", "images", "undefined_images", "excluded_entries"});
    auto emit = [&](const std::string& tag, const ViTModel& m) {
      for (const RatioLayerSummary& s : gradient_ratio_report(m, imgs).layers) {
        csv.row({tag, std::to_string(s.layer), fmt_double(s.mean), fmt_double(s.std_error), std::to_string(s.images),
                 std::to_string(s.undefined), std::to_string(s.excluded_entries)});
      }
    };
    emit("trained", model);
    if (init) emit("init", init->model);
    out.add("gradient_ratio.csv", csv.str());
  }

  const bool want_tokens = d.reports.count("tokens") > 0;
  const bool want_replacement = d.reports.count("key_replacement") > 0;
  if (want_tokens || want_replacement) {
    const AttackConfig cfg = detail::resolve_attack(rc.attack, model.config);
    const std::size_t key = cfg.loss.target_key;
    std::size_t n = want_replacement ? d.attack_images : 0;
    if (want_tokens) n = std::max(n, d.token_image + 1);
    if (n > test.size()) {
      throw std::out_of_range("diagnose needs " + std::to_string(n) + " test images but the split has " + std::to_string(test.size()));
    }
    const std::vector<Tensor> imgs(test.images.begin(), test.images.begin() + static_cast<std::ptrdiff_t>(n));
    const std::vector<std::size_t> labels(test.labels.begin(), test.labels.begin() + static_cast<std::ptrdiff_t>(n));
    const RobustnessReport rep = evaluate_robust_accuracy(model, imgs, labels, rc.attack.placement, cfg, threads);

    if (want_tokens) {
      const std::size_t layer = d.token_layer.value_or(model.config.depth - 1);
      if (layer >= model.config.depth) throw IndexError("diagnose.token_layer " + std::to_string(layer) + " for depth " + std::to_string(model.config.depth));
      if (d.token_head >= model.config.heads) throw IndexError("diagnose.token_head " + std::to_string(d.token_head) + " for " + std::to_string(model.config.heads) + " heads");
      const Tensor& clean = imgs[d.token_image];
      const Tensor patched = apply_patch(clean, rep.records[d.token_image].patch);
      nlohmann::json j;
      {
        Tape tape;
        ForwardResult fr = forward(tape, model, tape.constant(clean));
        j["clean"] = detail::token_export_json(export_projected_tokens(fr.trace, layer, d.token_head, key));
        j["clean_trace"] = trace_to_json(fr.trace);
      }
      {
        Tape tape;
        ForwardResult fr = forward(tape, model, tape.constant(patched));
        j["patched"] = detail::token_export_json(export_projected_tokens(fr.trace, layer, d.token_head, key));
        j["patched_trace"] = trace_to_json(fr.trace);
      }
      j["image_id"] = d.token_image;
      out.add("tokens.json", j.dump() + "\n");
    }

    if (want_replacement) {
      CsvWriter csv({"image_id", "label", "clean_pred", "attacked_pred", "success", "attn_clean", "attn_adv", "attn_replaced"});
      if (d.replace_layer && *d.replace_layer >= model.config.depth) {
        throw IndexError("diagnose.replace_layer " + std::to_string(*d.replace_layer) + " for depth " + std::to_string(model.config.depth));
      }
      std::size_t successes = 0, lowered = 0;
      for (std::size_t i = 0; i < d.attack_images; ++i) {
        const ImageRecord& r = rep.records[i];
        const KeyReplacementRecord k = key_replacement_ablation(model, imgs[i], r.patch, d.replace_layer);
        csv.row({std::to_string(i), std::to_string(r.label), std::to_string(r.clean_pred), std::to_string(r.attacked_pred), r.success ? "1" : "0",
                 fmt_double(k.attn_clean), fmt_double(k.attn_adv), fmt_double(k.attn_replaced)});
        if (r.success) {
          ++successes;
          lowered += k.attn_replaced < k.attn_adv;
        }
      }
      log << "diagnose: key replacement lowered attention on " << lowered << " of " << successes << " successful attacks\n";
      out.add("key_replacement.csv", csv.str());
    }
  }
  return out;
}

/// Runs one subcommand end to end and returns the process exit code. Nothing
/// is written unless every requested artifact was produced.
inline int run_command(const std::string& command, const CommonOptions& opts, std::ostream& log, std::ostream& err) {
  RunConfig rc;
  try {
    IniConfig ini = opts.config_path ? IniConfig::load(*opts.config_path) : IniConfig{};
    rc = parse_run_config(command, std::move(ini), opts.seed);
    if (opts.threads == 0) throw ConfigError("--threads must be >= 1");
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
  try {
    OutputBundle out;
    if (command == "train") out = run_train(rc, log);
    else if (command == "attack") out = run_attack(rc, opts.threads, log);
    else if (command == "controlled") out = run_controlled(rc, log);
    else out = run_diagnose(rc, opts.threads, log);
    out.add("config.ini", echo_config(rc));
    out.write(opts.out_dir);
    log << "wrote " << out.files().size() + 1 << " files to " << opts.out_dir << "\n";
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace afool
