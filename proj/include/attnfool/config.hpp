#pragma once

// Flat sectioned config files:
//
//   # comment
//   [section]
//   key = value
//
// Every key must be consumed by the subcommand reading the file; leftovers are
// reported as unknown keys.

#include <algorithm>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace afool {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace detail

class IniConfig {
 public:
  static IniConfig parse(const std::string& text, const std::string& origin = "<config>") {
    IniConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string t = detail::trim(line);
      if (t.empty() || t[0] == '#' || t[0] == ';') continue;
      const std::string where = origin + ":" + std::to_string(lineno);
      if (t.front() == '[') {
        if (t.back() != ']' || t.size() < 3) throw ConfigError(where + ": malformed section header");
        section = detail::trim(std::string_view(t).substr(1, t.size() - 2));
        cfg.sections_.insert(section);
        continue;
      }
      const auto eq = t.find('=');
      if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
      if (section.empty()) throw ConfigError(where + ": key outside of any [section]");
      const std::string key = detail::trim(std::string_view(t).substr(0, eq));
      if (key.empty()) throw ConfigError(where + ": empty key");
      const std::string full = section + "." + key;
      if (cfg.values_.count(full)) throw ConfigError(where + ": duplicate key " + full);
      cfg.values_[full] = detail::trim(std::string_view(t).substr(eq + 1));
    }
    return cfg;
  }

  static IniConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::optional<std::string> take(const std::string& key) {
    auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    consumed_.insert(key);
    return it->second;
  }

  std::string get_string(const std::string& key, const std::string& fallback) { return take(key).value_or(fallback); }

  template <class Int>
  Int get_uint(const std::string& key, Int fallback) {
    auto v = take(key);
    if (!v) return fallback;
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc() || p != v->data() + v->size()) throw ConfigError(key + ": expected a non-negative integer, got '" + *v + "'");
    return static_cast<Int>(out);
  }

  /// Accepts decimals and simple fractions such as 8/255.
  double get_double(const std::string& key, double fallback) {
    auto v = take(key);
    return v ? parse_number(key, *v) : fallback;
  }

  bool get_bool(const std::string& key, bool fallback) {
    auto v = take(key);
    if (!v) return fallback;
    if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") return true;
    if (*v == "false" || *v == "0" || *v == "no" || *v == "off") return false;
    throw ConfigError(key + ": expected a boolean, got '" + *v + "'");
  }

  std::vector<double> get_double_list(const std::string& key, std::vector<double> fallback) {
    auto v = take(key);
    if (!v) return fallback;
    std::vector<double> out;
    for (const std::string& item : detail::split_list(*v)) out.push_back(parse_number(key, item));
    return out;
  }

  std::vector<std::size_t> get_uint_list(const std::string& key, std::vector<std::size_t> fallback) {
    auto v = take(key);
    if (!v) return fallback;
    std::vector<std::size_t> out;
    for (const std::string& item : detail::split_list(*v)) {
      std::uint64_t x = 0;
      auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), x);
      if (ec != std::errc() || p != item.data() + item.size()) throw ConfigError(key + ": bad integer '" + item + "'");
      out.push_back(static_cast<std::size_t>(x));
    }
    return out;
  }

  std::vector<std::string> get_list(const std::string& key, std::vector<std::string> fallback) {
    auto v = take(key);
    return v ? detail::split_list(*v) : fallback;
  }

  /// Throws on keys nobody consumed or sections outside `allowed`.
  void reject_unknown(const std::set<std::string>& allowed_sections) const {
    for (const std::string& s : sections_) {
      if (!allowed_sections.count(s)) throw ConfigError("unknown section [" + s + "]");
    }
    for (const auto& [k, v] : values_) {
      if (!consumed_.count(k)) throw ConfigError("unknown key " + k);
    }
  }

 private:
  static double parse_number(const std::string& key, const std::string& text) {
    auto one = [&](std::string_view s) {
      double out = 0.0;
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
      if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(key + ": expected a number, got '" + text + "'");
      return out;
    };
    const auto slash = text.find('/');
    if (slash == std::string::npos) return one(text);
    const double den = one(detail::trim(std::string_view(text).substr(slash + 1)));
    if (den == 0.0) throw ConfigError(key + ": division by zero in '" + text + "'");
    return one(detail::trim(std::string_view(text).substr(0, slash))) / den;
  }

  std::map<std::string, std::string> values_;
  std::set<std::string> sections_;
  std::set<std::string> consumed_;
};

}  // namespace afool
