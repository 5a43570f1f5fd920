#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "covmerge/errors.hpp"

namespace covmerge {

// Flat key-value configuration: UTF-8 text, '#' comments, [section] headers,
// "key = value" lines. Keys are exposed as "section.key" ("" section for
// keys before any header). Command-line flags override file values.
class RunConfig {
 public:
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.contains(key); }
  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::vector<std::string> get_list(const std::string& key) const;  // comma-separated

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace covmerge
