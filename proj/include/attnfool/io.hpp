#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "attnfool/random.hpp"

namespace afool {

/// Shortest round-trip decimal form, independent of the C locale.
inline std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::array<char, 64> buf{};
  auto [p, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc()) throw std::runtime_error("number formatting failed");
  return std::string(buf.data(), p);
}

inline std::string hex64(std::uint64_t h) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) s[static_cast<std::size_t>(i)] = digits[h & 0xf];
  return s;
}

/// Content hash used by output manifests.
inline std::string content_hash(const std::string& bytes) { return hex64(fnv1a64(bytes)); }

class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header) : columns_(header.size()) { row(header); }

  CsvWriter& row(const std::vector<std::string>& cells) {
    if (cells.size() != columns_) throw std::logic_error("csv row has " + std::to_string(cells.size()) + " cells, header has " + std::to_string(columns_));
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << cells[i];
    }
    out_ << '\n';
    return *this;
  }

  std::string str() const { return out_.str(); }

 private:
  std::size_t columns_;
  std::ostringstream out_;
};

/// Collects result files in memory and writes them together with a manifest
/// (name + content hash per file) once every artifact exists.
class OutputBundle {
 public:
  void add(const std::string& name, std::string content) { files_[name] = std::move(content); }

  const std::map<std::string, std::string>& files() const { return files_; }

  std::string manifest() const {
    std::ostringstream os;
    for (const auto& [name, content] : files_) os << content_hash(content) << "  " << name << '\n';
    return os.str();
  }

  void write(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    auto put = [&dir](const std::string& name, const std::string& content) {
      std::ofstream out(dir / name, std::ios::binary);
      out << content;
      if (!out) throw std::runtime_error("failed writing " + (dir / name).string());
    };
    for (const auto& [name, content] : files_) put(name, content);
    put(kManifestName, manifest());
  }

  static constexpr const char* kManifestName = "MANIFEST.txt";

 private:
  std::map<std::string, std::string> files_;
};

}  // namespace afool
