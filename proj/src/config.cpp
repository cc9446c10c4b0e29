#include "mmard/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "mmard/errors.hpp"

namespace mmard {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

std::string default_seed() {
  if (const char* env = std::getenv("MMARD_SEED")) return env;
  return "1";
}

}  // namespace

Config Config::defaults() {
  Config c;
  auto def = [&](const std::string& key, Type type, const std::string& value) {
    c.entries_[key] = Entry{type, value};
  };
  const std::string seed = default_seed();

  // dataset
  def("data.kind", Type::Str, "moons");
  def("data.n", Type::UInt, "256");
  def("data.n_test", Type::UInt, "256");
  def("data.classes", Type::UInt, "4");
  def("data.per_class", Type::UInt, "64");
  def("data.spacing", Type::Num, "0.4");
  def("data.noise", Type::Num, "0.1");
  def("data.image", Type::Bool, "false");
  def("data.seed", Type::UInt, seed);
  def("data.train", Type::Str, "");
  def("data.test", Type::Str, "");

  // architectures and teacher checkpoints
  def("student.arch", Type::Str, "mlp:in=2,hidden=16,classes=2");
  def("teacher.arch", Type::Str, "mlp:in=2,hidden=64,classes=2");
  def("teacher.ckpt", Type::Str, "");
  def("teacher.nat_ckpt", Type::Str, "");

  // method (Table-style objective row)
  def("method", Type::Str, "");
  def("method.alpha", Type::Num, "1");
  def("method.beta", Type::Num, "1");
  def("method.lambda", Type::Num, "6");
  def("method.tau", Type::Num, "1");
  def("method.delta", Type::Num, "1");
  def("method.inner", Type::Str, "");

  // attack; negative values resolve from the dataset margin at run time
  def("attack.eps", Type::Num, "-1");
  def("attack.eps_rel", Type::Num, "0.25");
  def("attack.step", Type::Num, "-1");
  def("attack.step_rel", Type::Num, "0.25");
  def("attack.steps", Type::UInt, "10");
  def("attack.eval_steps", Type::UInt, "20");
  def("attack.rand_init", Type::Num, "0.001");

  // trainer
  def("train.mode", Type::Str, "trades");
  def("train.epochs", Type::UInt, "60");
  def("train.batch", Type::UInt, "64");
  def("train.lr", Type::Num, "0.1");
  def("train.momentum", Type::Num, "0.9");
  def("train.weight_decay", Type::Num, "2e-4");
  def("train.schedule", Type::Str, "");
  def("train.step_factor", Type::Num, "0.1");
  def("train.eval_every", Type::UInt, "1");
  def("train.seed", Type::UInt, seed);

  // evaluation
  def("eval.model", Type::Str, "");
  def("eval.seed", Type::UInt, "7");

  // studies
  def("study.methods", Type::StrList, "ard,rslad,mmard");
  def("study.outer_methods", Type::StrList, "ard,iad,rslad");
  def("study.teachers", Type::StrList, "");
  def("study.alphas", Type::NumList, "0,0.5,1,2");
  def("study.epochs", Type::UInt, "20");

  // output
  def("out.dir", Type::Str, "");
  return c;
}

const Config::Entry& Config::entry(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) fail(ErrorKind::Config, "unknown config key '" + key + "'");
  return it->second;
}

void Config::set(const std::string& key, const std::string& value) {
  const auto it = entries_.find(key);
  if (it == entries_.end()) fail(ErrorKind::Config, "unknown config key '" + key + "'");
  it->second.value = value;
  // Validate eagerly so the error names the offending key.
  switch (it->second.type) {
    case Type::Num: number(key); break;
    case Type::UInt: uinteger(key); break;
    case Type::Bool: boolean(key); break;
    case Type::NumList: number_list(key); break;
    case Type::Str:
    case Type::StrList: break;
  }
}

void Config::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open config file: " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(ErrorKind::Config, path + ":" + std::to_string(lineno) + ": expected key = value");
    }
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void Config::apply_override(const std::string& token) {
  const auto eq = token.find('=');
  if (eq == std::string::npos) {
    fail(ErrorKind::Config, "override '" + token + "' is not of the form key=value");
  }
  set(trim(token.substr(0, eq)), trim(token.substr(eq + 1)));
}

bool Config::has(const std::string& key) const { return entries_.count(key) != 0; }

const std::string& Config::raw(const std::string& key) const { return entry(key).value; }

std::string Config::str(const std::string& key) const { return entry(key).value; }

std::string Config::required_str(const std::string& key) const {
  const std::string v = str(key);
  if (v.empty()) fail(ErrorKind::Config, "missing required config key '" + key + "'");
  return v;
}

double Config::number(const std::string& key) const {
  const std::string& v = entry(key).value;
  try {
    std::size_t pos = 0;
    const double parsed = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return parsed;
  } catch (const std::exception&) {
    fail(ErrorKind::Config, "config key '" + key + "': '" + v + "' is not a number");
  }
}

std::uint64_t Config::uinteger(const std::string& key) const {
  const std::string& v = entry(key).value;
  try {
    std::size_t pos = 0;
    const long long parsed = std::stoll(v, &pos);
    if (pos != v.size() || parsed < 0) throw std::invalid_argument(v);
    return static_cast<std::uint64_t>(parsed);
  } catch (const std::exception&) {
    fail(ErrorKind::Config, "config key '" + key + "': '" + v + "' is not a non-negative integer");
  }
}

bool Config::boolean(const std::string& key) const {
  const std::string& v = entry(key).value;
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  fail(ErrorKind::Config, "config key '" + key + "': '" + v + "' is not a boolean");
}

std::vector<double> Config::number_list(const std::string& key) const {
  std::vector<double> out;
  for (const std::string& item : str_list(key)) {
    try {
      std::size_t pos = 0;
      const double parsed = std::stod(item, &pos);
      if (pos != item.size()) throw std::invalid_argument(item);
      out.push_back(parsed);
    } catch (const std::exception&) {
      fail(ErrorKind::Config, "config key '" + key + "': '" + item + "' is not a number");
    }
  }
  return out;
}

std::vector<std::string> Config::str_list(const std::string& key) const {
  const std::string& v = entry(key).value;
  std::vector<std::string> out;
  std::string cur;
  for (char c : v) {
    if (c == ',') {
      const std::string item = trim(cur);
      if (!item.empty()) out.push_back(item);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  const std::string item = trim(cur);
  if (!item.empty()) out.push_back(item);
  return out;
}

void Config::write_resolved(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open resolved config for writing: " + path);
  for (const auto& [key, entry] : entries_) out << key << " = " << entry.value << "\n";
  if (!out) fail(ErrorKind::Io, "write failed: " + path);
}

}  // namespace mmard
