#include "fprune/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "fprune/tensor.hpp"

namespace fprune {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(std::string_view text, std::string_view key) {
  T v{};
  const char* first = text.data();
  const char* last = text.data() + text.size();
  if (!text.empty() && text.front() == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) {
    throw ConfigError("config key '" + std::string(key) + "': cannot parse '" + std::string(text) +
                      "' as a number");
  }
  return v;
}

}  // namespace

std::vector<std::string> split_list(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (const char ch : text) {
    if (ch == ',' || ch == ' ' || ch == '\t') {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

Config Config::parse(std::string_view text, const std::string& origin) {
  Config c;
  c.origin_ = origin;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? text.npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(line_no);
    if (eq == std::string_view::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key(trim(line.substr(0, eq)));
    const std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (!c.entries_.emplace(key, value).second) {
      throw ConfigError(where + ": duplicate key '" + key + "'");
    }
  }
  return c;
}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FileNotFoundError("config file not found: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

bool Config::has(std::string_view key) const { return entries_.find(key) != entries_.end(); }

void Config::set(const std::string& key, std::string value) { entries_[key] = std::move(value); }

const std::string& Config::raw(std::string_view key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) {
    throw ConfigError("missing config key '" + std::string(key) + "'" +
                      (origin_.empty() ? "" : " in " + origin_));
  }
  return it->second;
}

std::string Config::get_string(std::string_view key) const { return raw(key); }
std::string Config::get_string(std::string_view key, const std::string& fallback) const {
  return has(key) ? raw(key) : fallback;
}

double Config::get_double(std::string_view key) const { return parse_number<double>(raw(key), key); }
double Config::get_double(std::string_view key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

std::int64_t Config::get_int(std::string_view key) const {
  return parse_number<std::int64_t>(raw(key), key);
}
std::int64_t Config::get_int(std::string_view key, std::int64_t fallback) const {
  return has(key) ? get_int(key) : fallback;
}

std::uint64_t Config::get_u64(std::string_view key, std::uint64_t fallback) const {
  return has(key) ? parse_number<std::uint64_t>(raw(key), key) : fallback;
}

bool Config::get_bool(std::string_view key, bool fallback) const {
  if (!has(key)) return fallback;
  const std::string& v = raw(key);
  if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "off" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + std::string(key) + "': expected a boolean, got '" + v + "'");
}

std::vector<std::size_t> Config::get_sizes(std::string_view key) const {
  std::vector<std::size_t> out;
  for (const auto& piece : split_list(raw(key))) out.push_back(parse_number<std::size_t>(piece, key));
  return out;
}

std::vector<double> Config::get_doubles(std::string_view key) const {
  std::vector<double> out;
  for (const auto& piece : split_list(raw(key))) out.push_back(parse_number<double>(piece, key));
  return out;
}

void Config::require_known(std::initializer_list<std::string_view> known) const {
  for (const auto& [key, value] : entries_) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown config key '" + key + "'" + (origin_.empty() ? "" : " in " + origin_));
    }
  }
}

std::string Config::to_text() const {
  std::string out;
  for (const auto& [key, value] : entries_) out += key + " = " + value + "\n";
  return out;
}

}  // namespace fprune
