#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

namespace mmchat {

// Ordered `key=value` text block. Blank lines and lines starting with '#' are
// ignored on parse.
class KeyValues {
 public:
  static KeyValues parse(std::string_view text);
  static KeyValues load(const std::filesystem::path& path);
  std::string to_text() const;

  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  void set(const std::string& key, const char* value) { values_[key] = value; }
  void set(const std::string& key, std::uint64_t value) { values_[key] = std::to_string(value); }
  void set(const std::string& key, double value);
  void set(const std::string& key, bool value) { values_[key] = value ? "true" : "false"; }

  // Throws ParseError when missing or malformed.
  const std::string& get(const std::string& key) const;
  std::uint64_t get_uint(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  std::string get_or(const std::string& key, const std::string& fallback) const;
  std::uint64_t get_uint_or(const std::string& key, std::uint64_t fallback) const;
  double get_double_or(const std::string& key, double fallback) const;
  bool get_bool_or(const std::string& key, bool fallback) const;

  const std::map<std::string, std::string>& entries() const { return values_; }
  void merge(const KeyValues& other);

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace mmchat
