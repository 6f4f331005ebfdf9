#pragma once

// Experiment configuration files.
//
// Grammar (a TOML subset):
//   file    := { line }
//   line    := ws ( section | pair | "" ) ws [ "#" comment ] "\n"
//   section := "[" name "]"
//   pair    := name ws "=" ws value
//   value   := bare token | "\"" chars "\""
// Keys are addressed as "section.name". Repeated keys are an error.

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedbio {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Config {
 public:
  static Config parse(const std::string& text, const std::string& origin = "<string>");
  static Config load(const std::string& path);

  /// Applies "section.key=value"; later settings win.
  void set(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& raw(const std::string& key) const;
  std::vector<std::string> keys() const;

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  unsigned long long get_u64(const std::string& key, unsigned long long fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace fedbio
