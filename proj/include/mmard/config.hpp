#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace mmard {

// Flat key = value configuration with a fixed schema. Unknown keys are
// rejected; file values are overridden by command-line tokens; the fully
// resolved map (defaults included) is echoed to resolved.cfg by each command.
class Config {
 public:
  static Config defaults();

  void load_file(const std::string& path);
  void apply_override(const std::string& token);  // "key=value"

  bool has(const std::string& key) const;
  const std::string& raw(const std::string& key) const;

  std::string str(const std::string& key) const;
  std::string required_str(const std::string& key) const;  // error if empty
  double number(const std::string& key) const;
  std::uint64_t uinteger(const std::string& key) const;
  bool boolean(const std::string& key) const;
  std::vector<double> number_list(const std::string& key) const;
  std::vector<std::string> str_list(const std::string& key) const;

  void write_resolved(const std::string& path) const;

 private:
  enum class Type { Str, Num, UInt, Bool, NumList, StrList };
  struct Entry {
    Type type;
    std::string value;
  };

  std::map<std::string, Entry> entries_;
  void set(const std::string& key, const std::string& value);
  const Entry& entry(const std::string& key) const;
};

}  // namespace mmard
