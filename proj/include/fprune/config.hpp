#pragma once

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace fprune {

/// Flat `key = value` text configuration. Blank lines and `#` comments are
/// ignored; a repeated key is an error. Values are typed on access and every
/// parse failure is a ConfigError naming the key.
class Config {
 public:
  Config() = default;

  static Config parse(std::string_view text, const std::string& origin = "<string>");
  static Config load(const std::filesystem::path& path);

  bool has(std::string_view key) const;
  void set(const std::string& key, std::string value);

  std::string get_string(std::string_view key) const;
  std::string get_string(std::string_view key, const std::string& fallback) const;
  double get_double(std::string_view key) const;
  double get_double(std::string_view key, double fallback) const;
  std::int64_t get_int(std::string_view key) const;
  std::int64_t get_int(std::string_view key, std::int64_t fallback) const;
  std::uint64_t get_u64(std::string_view key, std::uint64_t fallback) const;
  bool get_bool(std::string_view key, bool fallback) const;
  /// Comma- or space-separated list.
  std::vector<std::size_t> get_sizes(std::string_view key) const;
  std::vector<double> get_doubles(std::string_view key) const;

  /// Throws ConfigError for any key outside `known`.
  void require_known(std::initializer_list<std::string_view> known) const;

  const std::map<std::string, std::string, std::less<>>& entries() const { return entries_; }
  /// Sorted `key = value` lines; parse(to_text()) round-trips.
  std::string to_text() const;

 private:
  const std::string& raw(std::string_view key) const;

  std::string origin_;
  std::map<std::string, std::string, std::less<>> entries_;
};

/// Splits on commas and whitespace, dropping empty pieces.
std::vector<std::string> split_list(std::string_view text);

}  // namespace fprune
