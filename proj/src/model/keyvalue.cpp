#include "mmchat/keyvalue.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "mmchat/errors.hpp"

namespace mmchat {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

KeyValues KeyValues::parse(std::string_view text) {
  KeyValues kv;
  std::istringstream is{std::string(text)};
  std::string line;
  std::size_t number = 0;
  while (std::getline(is, line)) {
    ++number;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ParseError("line " + std::to_string(number) + ": expected key=value, got '" + t + "'");
    }
    kv.values_[trim(std::string_view(t).substr(0, eq))] = trim(std::string_view(t).substr(eq + 1));
  }
  return kv;
}

KeyValues KeyValues::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string KeyValues::to_text() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
  return out;
}

void KeyValues::set(const std::string& key, double value) {
  std::ostringstream os;
  os.precision(17);
  os << value;
  values_[key] = os.str();
}

const std::string& KeyValues::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ParseError("missing key '" + key + "'");
  return it->second;
}

std::uint64_t KeyValues::get_uint(const std::string& key) const {
  const auto& s = get(key);
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ParseError("key '" + key + "': expected unsigned integer, got '" + s + "'");
  }
  return v;
}

double KeyValues::get_double(const std::string& key) const {
  const auto& s = get(key);
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError("key '" + key + "': expected number, got '" + s + "'");
  }
}

bool KeyValues::get_bool(const std::string& key) const {
  const auto& s = get(key);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ParseError("key '" + key + "': expected boolean, got '" + s + "'");
}

std::string KeyValues::get_or(const std::string& key, const std::string& fallback) const {
  return contains(key) ? get(key) : fallback;
}
std::uint64_t KeyValues::get_uint_or(const std::string& key, std::uint64_t fallback) const {
  return contains(key) ? get_uint(key) : fallback;
}
double KeyValues::get_double_or(const std::string& key, double fallback) const {
  return contains(key) ? get_double(key) : fallback;
}
bool KeyValues::get_bool_or(const std::string& key, bool fallback) const {
  return contains(key) ? get_bool(key) : fallback;
}

void KeyValues::merge(const KeyValues& other) {
  for (const auto& [k, v] : other.values_) values_[k] = v;
}

}  // namespace mmchat
