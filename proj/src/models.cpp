#include "mmard/models.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mmard/errors.hpp"
#include "mmard/rng.hpp"

namespace mmard {

namespace {

constexpr char kMagic[4] = {'M', 'M', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  parts.push_back(cur);
  return parts;
}

std::size_t parse_count(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(s, &pos);
    if (pos != s.size() || v <= 0) throw std::invalid_argument(s);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    fail(ErrorKind::Value, "arch: bad " + what + " '" + s + "'");
  }
}

ConvLayerSpec parse_conv_layer(const std::string& token) {
  // e.g. 8k3s2p1 = 8 channels, kernel 3, stride 2, pad 1
  ConvLayerSpec layer;
  std::size_t i = 0;
  auto read_num = [&]() {
    std::size_t start = i;
    while (i < token.size() && std::isdigit(static_cast<unsigned char>(token[i]))) ++i;
    if (i == start) fail(ErrorKind::Value, "arch: bad conv layer '" + token + "'");
    return std::stoul(token.substr(start, i - start));
  };
  layer.out_channels = read_num();
  while (i < token.size()) {
    const char tag = token[i++];
    const unsigned long v = read_num();
    switch (tag) {
      case 'k': layer.kernel = static_cast<int>(v); break;
      case 's': layer.stride = static_cast<int>(v); break;
      case 'p': layer.pad = static_cast<int>(v); break;
      default: fail(ErrorKind::Value, "arch: bad conv layer '" + token + "'");
    }
  }
  return layer;
}

}  // namespace

void ArchSpec::validate() const {
  if (classes < 2) fail(ErrorKind::Value, "arch: class count must be >= 2");
  if (input_shape.empty()) fail(ErrorKind::Shape, "arch: empty input shape");
  for (std::size_t d : input_shape) {
    if (d == 0) fail(ErrorKind::Shape, "arch: zero input dimension");
  }
  if (family == ArchFamily::Mlp) {
    if (input_shape.size() != 1) fail(ErrorKind::Shape, "arch: mlp input must be rank 1");
    for (std::size_t w : hidden) {
      if (w == 0) fail(ErrorKind::Value, "arch: mlp width must be >= 1");
    }
  } else {
    if (input_shape.size() != 3) fail(ErrorKind::Shape, "arch: smallcnn input must be [c,h,w]");
    if (conv.empty()) fail(ErrorKind::Value, "arch: smallcnn needs at least one conv layer");
    for (const ConvLayerSpec& l : conv) {
      if (l.out_channels == 0 || l.kernel < 1 || l.stride < 1 || l.pad < 0) {
        fail(ErrorKind::Value, "arch: bad conv layer parameters");
      }
    }
  }
}

std::string ArchSpec::descriptor() const {
  std::ostringstream out;
  if (family == ArchFamily::Mlp) {
    out << "mlp:in=" << input_shape[0] << ",hidden=";
    for (std::size_t i = 0; i < hidden.size(); ++i) {
      if (i) out << ";";
      out << hidden[i];
    }
    out << ",classes=" << classes;
  } else {
    out << "smallcnn:in=" << input_shape[0] << "x" << input_shape[1] << "x" << input_shape[2]
        << ",conv=";
    for (std::size_t i = 0; i < conv.size(); ++i) {
      if (i) out << ";";
      out << conv[i].out_channels << "k" << conv[i].kernel << "s" << conv[i].stride << "p"
          << conv[i].pad;
    }
    out << ",classes=" << classes;
  }
  return out.str();
}

ArchSpec ArchSpec::parse(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) fail(ErrorKind::Value, "arch: missing family in '" + text + "'");
  const std::string family = text.substr(0, colon);
  ArchSpec spec;
  if (family == "mlp") {
    spec.family = ArchFamily::Mlp;
  } else if (family == "smallcnn") {
    spec.family = ArchFamily::SmallCnn;
  } else {
    fail(ErrorKind::Value, "arch: unknown family '" + family + "'");
  }
  spec.hidden.clear();
  spec.input_shape.clear();
  for (const std::string& field : split(text.substr(colon + 1), ',')) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) fail(ErrorKind::Value, "arch: bad field '" + field + "'");
    const std::string key = field.substr(0, eq);
    const std::string value = field.substr(eq + 1);
    if (key == "in") {
      for (const std::string& d : split(value, 'x')) {
        spec.input_shape.push_back(parse_count(d, "input dimension"));
      }
    } else if (key == "hidden") {
      for (const std::string& w : split(value, ';')) spec.hidden.push_back(parse_count(w, "width"));
    } else if (key == "conv") {
      for (const std::string& l : split(value, ';')) spec.conv.push_back(parse_conv_layer(l));
    } else if (key == "classes") {
      spec.classes = parse_count(value, "class count");
    } else {
      fail(ErrorKind::Value, "arch: unknown field '" + key + "'");
    }
  }
  spec.validate();
  return spec;
}

std::size_t Model::param_count() const {
  std::size_t n = 0;
  for (const Param& p : params) n += p.value.size();
  return n;
}

std::uint64_t Model::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const void* ptr, std::size_t bytes) {
    const auto* b = static_cast<const unsigned char*>(ptr);
    for (std::size_t i = 0; i < bytes; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const Param& p : params) {
    feed(p.name.data(), p.name.size());
    feed(p.value.data.data(), p.value.data.size() * sizeof(double));
  }
  return h;
}

namespace {

Tensor init_weight(const Shape& shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<double> values(shape_size(shape));
  for (double& v : values) v = rng.uniform(-bound, bound);
  return Tensor::from(shape, std::move(values));
}

}  // namespace

Model build_model(const ArchSpec& arch, std::uint64_t seed) {
  arch.validate();
  Model model;
  model.arch = arch;
  Rng rng(mix_seed(seed, 0x6d6f64656cULL));  // "model"
  if (arch.family == ArchFamily::Mlp) {
    std::vector<std::size_t> widths;
    widths.push_back(arch.input_shape[0]);
    for (std::size_t w : arch.hidden) widths.push_back(w);
    widths.push_back(arch.classes);
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      const std::size_t in = widths[i], out = widths[i + 1];
      model.params.push_back({"w" + std::to_string(i), init_weight({in, out}, in, rng)});
      model.params.push_back({"b" + std::to_string(i), Tensor::zeros({out})});
    }
  } else {
    std::size_t cin = arch.input_shape[0];
    std::size_t h = arch.input_shape[1], w = arch.input_shape[2];
    for (std::size_t i = 0; i < arch.conv.size(); ++i) {
      const ConvLayerSpec& l = arch.conv[i];
      const std::size_t kh = static_cast<std::size_t>(l.kernel);
      const std::size_t fan_in = cin * kh * kh;
      model.params.push_back({"conv" + std::to_string(i) + ".w",
                              init_weight({l.out_channels, cin, kh, kh}, fan_in, rng)});
      model.params.push_back({"conv" + std::to_string(i) + ".b", Tensor::zeros({l.out_channels})});
      const long ho = (static_cast<long>(h) + 2 * l.pad - l.kernel) / l.stride + 1;
      const long wo = (static_cast<long>(w) + 2 * l.pad - l.kernel) / l.stride + 1;
      if (ho < 1 || wo < 1) fail(ErrorKind::Shape, "arch: conv layer shrinks input below 1x1");
      h = static_cast<std::size_t>(ho);
      w = static_cast<std::size_t>(wo);
      cin = l.out_channels;
    }
    const std::size_t flat = cin * h * w;
    model.params.push_back({"fc.w", init_weight({flat, arch.classes}, flat, rng)});
    model.params.push_back({"fc.b", Tensor::zeros({arch.classes})});
  }
  return model;
}

AttachedModel attach_model(Graph& g, const Model& m, bool trainable) {
  AttachedModel am;
  am.model = &m;
  const bool requires_grad = trainable && !m.frozen;
  am.params.reserve(m.params.size());
  for (const Param& p : m.params) am.params.push_back(g.leaf(p.value, requires_grad));
  return am;
}

Tensor forward_logits(Graph& g, const AttachedModel& am, const Tensor& batch) {
  const Model& m = *am.model;
  const Shape& in = m.arch.input_shape;
  Shape expected;
  expected.push_back(batch.shape.empty() ? 0 : batch.shape[0]);
  for (std::size_t d : in) expected.push_back(d);
  if (batch.shape != expected) {
    fail(ErrorKind::Shape, "forward: batch " + shape_str(batch.shape) + " does not match input " +
                               shape_str(in));
  }
  Tensor h = batch;
  if (m.arch.family == ArchFamily::Mlp) {
    const std::size_t layers = m.arch.hidden.size() + 1;
    for (std::size_t i = 0; i < layers; ++i) {
      h = affine(g, h, am.params[2 * i], am.params[2 * i + 1]);
      if (i + 1 < layers) h = relu(g, h);
    }
  } else {
    for (std::size_t i = 0; i < m.arch.conv.size(); ++i) {
      const ConvLayerSpec& l = m.arch.conv[i];
      h = conv2d(g, h, am.params[2 * i], am.params[2 * i + 1], l.stride, l.pad);
      h = relu(g, h);
    }
    h = flatten(g, h);
    const std::size_t base = 2 * m.arch.conv.size();
    h = affine(g, h, am.params[base], am.params[base + 1]);
  }
  return h;
}

Tensor forward_logits(Graph& g, const Model& m, const Tensor& batch) {
  return forward_logits(g, attach_model(g, m), batch);
}

namespace {

void write_bytes(std::ofstream& out, const void* ptr, std::size_t n) {
  out.write(static_cast<const char*>(ptr), static_cast<std::streamsize>(n));
}

void write_u32(std::ofstream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  write_bytes(out, b, 4);
}

void write_f64(std::ofstream& out, double v) {
  std::uint64_t bits = 0;
  std::memcpy(&bits, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  write_bytes(out, b, 8);
}

void read_bytes(std::ifstream& in, void* ptr, std::size_t n, const char* what) {
  in.read(static_cast<char*>(ptr), static_cast<std::streamsize>(n));
  if (in.gcount() != static_cast<std::streamsize>(n)) {
    fail(ErrorKind::Io, std::string("corrupt checkpoint: truncated ") + what);
  }
}

std::uint32_t read_u32(std::ifstream& in, const char* what) {
  unsigned char b[4];
  read_bytes(in, b, 4, what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

double read_f64(std::ifstream& in, const char* what) {
  unsigned char b[8];
  read_bytes(in, b, 8, what);
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v = 0.0;
  std::memcpy(&v, &bits, 8);
  return v;
}

std::string read_string(std::ifstream& in, const char* what) {
  const std::uint32_t len = read_u32(in, what);
  if (len > (1u << 20)) fail(ErrorKind::Format, "corrupt checkpoint: unreasonable string length");
  std::string s(len, '\0');
  if (len) read_bytes(in, s.data(), len, what);
  return s;
}

}  // namespace

void save_checkpoint(const Model& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open checkpoint for writing: " + path);
  write_bytes(out, kMagic, 4);
  write_u32(out, kVersion);
  const std::string arch = m.arch.descriptor();
  write_u32(out, static_cast<std::uint32_t>(arch.size()));
  write_bytes(out, arch.data(), arch.size());
  write_u32(out, static_cast<std::uint32_t>(m.params.size()));
  for (const Param& p : m.params) {
    write_u32(out, static_cast<std::uint32_t>(p.name.size()));
    write_bytes(out, p.name.data(), p.name.size());
    const unsigned char rank = static_cast<unsigned char>(p.value.rank());
    write_bytes(out, &rank, 1);
    for (std::size_t d : p.value.shape) write_u32(out, static_cast<std::uint32_t>(d));
    for (double v : p.value.data) write_f64(out, v);
  }
  if (!out) fail(ErrorKind::Io, "write failed: " + path);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) {
    fail(ErrorKind::Format, "not a checkpoint: " + path);
  }
  const std::uint32_t version = read_u32(in, "version");
  if (version != kVersion) {
    fail(ErrorKind::Format, "unsupported checkpoint version " + std::to_string(version));
  }
  Model m;
  m.arch = ArchSpec::parse(read_string(in, "arch descriptor"));
  const std::uint32_t count = read_u32(in, "parameter count");
  for (std::uint32_t i = 0; i < count; ++i) {
    Param p;
    p.name = read_string(in, "parameter name");
    unsigned char rank = 0;
    read_bytes(in, &rank, 1, "parameter rank");
    Shape shape;
    for (unsigned r = 0; r < rank; ++r) shape.push_back(read_u32(in, "parameter dim"));
    std::vector<double> data(shape_size(shape));
    for (double& v : data) v = read_f64(in, "parameter data");
    p.value = Tensor::from(shape, std::move(data));
    m.params.push_back(std::move(p));
  }

  // Shapes in the file must agree with the declared architecture.
  const Model reference = build_model(m.arch, 0);
  if (reference.params.size() != m.params.size()) {
    fail(ErrorKind::Shape, "checkpoint parameter list does not match arch header");
  }
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    if (reference.params[i].name != m.params[i].name ||
        reference.params[i].value.shape != m.params[i].value.shape) {
      fail(ErrorKind::Shape, "checkpoint parameter '" + m.params[i].name +
                                 "' does not match arch header shape");
    }
  }
  return m;
}

}  // namespace mmard
