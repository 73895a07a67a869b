#pragma once

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "xcal/errors.hpp"

namespace xcal {
namespace io {

/// Round-trip-exact double formatting (17 significant digits).
inline std::string fmt_full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string fmt_fixed(double v, int decimals = 3) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

inline std::string fmt_sci(double v, int decimals = 3) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*E", decimals, v);
  return buf;
}

inline double parse_double(const std::string& s, const std::string& context) {
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0' || errno == ERANGE) {
    throw ParseError("not a number: '" + s + "' (" + context + ")");
  }
  return v;
}

inline long parse_int(const std::string& s, const std::string& context) {
  errno = 0;
  char* end = nullptr;
  const long v = std::strtol(s.c_str(), &end, 10);
  if (end == s.c_str() || *end != '\0' || errno == ERANGE) {
    throw ParseError("not an integer: '" + s + "' (" + context + ")");
  }
  return v;
}

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string strip(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

/// Reads a whole file, splitting on LF. CR characters are rejected: the file
/// formats here are specified with LF line endings.
inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  std::string content = ss.str();
  if (content.find('\r') != std::string::npos) {
    throw ParseError("CR line endings in " + path + " (LF required)");
  }
  std::vector<std::string> lines;
  std::string cur;
  for (char c : content) {
    if (c == '\n') {
      lines.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) lines.push_back(cur);
  return lines;
}

class FileWriter {
 public:
  explicit FileWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw ConfigError("cannot open file for writing: " + path);
  }
  void line(const std::string& s) { out_ << s << '\n'; }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ofstream out_;
};

/// Plain-text key-value file: one `key = v0 v1 ...` per line, '#' comments.
struct KeyValueFile {
  std::vector<std::pair<std::string, std::string>> entries;  // insertion order

  void set(const std::string& key, const std::string& value) { entries.emplace_back(key, value); }

  void set_doubles(const std::string& key, const std::vector<double>& vs) {
    std::string joined;
    for (std::size_t i = 0; i < vs.size(); ++i) {
      if (i) joined += ' ';
      joined += fmt_full(vs[i]);
    }
    set(key, joined);
  }

  bool has(const std::string& key) const {
    for (const auto& [k, v] : entries)
      if (k == key) return true;
    return false;
  }

  const std::string& get(const std::string& key) const {
    for (const auto& [k, v] : entries)
      if (k == key) return v;
    throw ParseError("missing key: " + key);
  }

  std::vector<double> get_doubles(const std::string& key) const {
    std::vector<double> out;
    std::istringstream ss(get(key));
    std::string tok;
    while (ss >> tok) out.push_back(parse_double(tok, key));
    return out;
  }

  double get_double(const std::string& key) const {
    auto v = get_doubles(key);
    if (v.size() != 1) throw ParseError("expected one value for key: " + key);
    return v[0];
  }

  void save(const std::string& path) const {
    FileWriter w(path);
    for (const auto& [k, v] : entries) w.line(k + " = " + v);
  }

  static KeyValueFile load(const std::string& path) {
    KeyValueFile kv;
    for (const auto& raw : read_lines(path)) {
      std::string line = strip(raw);
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ParseError("malformed line in " + path + ": " + line);
      kv.set(strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
    }
    return kv;
  }
};

}  // namespace io
}  // namespace xcal
