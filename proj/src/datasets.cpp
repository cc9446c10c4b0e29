#include "mmard/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "mmard/errors.hpp"
#include "mmard/rng.hpp"

namespace mmard {

namespace {

constexpr char kMagic[4] = {'M', 'M', 'D', 'S'};
constexpr std::uint32_t kVersion = 1;

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// The noiseless moons occupy x in [-1,2], y in [-0.5,1]; one fixed affine map
// takes that box into [0,1]^2.
void moons_affine(double x, double y, double& fx, double& fy) {
  fx = (x + 1.0) / 3.0;
  fy = (y + 0.5) / 1.5;
}

void moon_point(std::size_t cls, double t, double& x, double& y) {
  if (cls == 0) {
    x = std::cos(t);
    y = std::sin(t);
  } else {
    x = 1.0 - std::cos(t);
    y = 0.5 - std::sin(t);
  }
}

// Minimum distance between the two noiseless curves in rescaled coordinates.
double moons_margin() {
  static const double margin = [] {
    constexpr std::size_t kSamples = 1024;
    std::vector<double> ax(kSamples), ay(kSamples), bx(kSamples), by(kSamples);
    for (std::size_t i = 0; i < kSamples; ++i) {
      const double t = M_PI * static_cast<double>(i) / static_cast<double>(kSamples - 1);
      double x = 0.0, y = 0.0;
      moon_point(0, t, x, y);
      moons_affine(x, y, ax[i], ay[i]);
      moon_point(1, t, x, y);
      moons_affine(x, y, bx[i], by[i]);
    }
    double best = 1e300;
    for (std::size_t i = 0; i < kSamples; ++i) {
      for (std::size_t j = 0; j < kSamples; ++j) {
        const double dx = ax[i] - bx[j], dy = ay[i] - by[j];
        best = std::min(best, dx * dx + dy * dy);
      }
    }
    return std::sqrt(best);
  }();
  return margin;
}

}  // namespace

Shape DatasetBundle::sample_shape() const {
  Shape s(features.shape.begin() + 1, features.shape.end());
  return s;
}

double DatasetBundle::margin() const {
  const auto it = metadata.find("margin");
  if (it == metadata.end()) fail(ErrorKind::Value, "dataset: no margin metadata");
  return std::stod(it->second);
}

void DatasetBundle::validate() const {
  if (features.shape.empty() || features.shape[0] != labels.size()) {
    fail(ErrorKind::Shape, "dataset: feature rows do not match label count");
  }
  if (classes < 2) fail(ErrorKind::Value, "dataset: class count must be >= 2");
  for (std::size_t l : labels) {
    if (l >= classes) fail(ErrorKind::Value, "dataset: label " + std::to_string(l) + " out of range");
  }
  for (double v : features.data) {
    if (v < 0.0 || v > 1.0) fail(ErrorKind::Value, "dataset: feature outside [0,1]");
  }
}

DatasetBundle gen_two_moons(std::size_t n, double noise, std::uint64_t seed,
                            const std::string& split) {
  if (n < 2) fail(ErrorKind::Value, "two_moons: need at least 2 samples");
  if (noise < 0.0) fail(ErrorKind::Value, "two_moons: noise must be >= 0");
  const std::size_t n0 = (n + 1) / 2;
  Rng rng(mix_seed(seed, 0x6d6f6f6e73ULL));  // "moons"

  DatasetBundle bundle;
  bundle.classes = 2;
  bundle.split = split;
  std::vector<double> feats(n * 2);
  bundle.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = i < n0 ? 0 : 1;
    const double t = rng.uniform(0.0, M_PI);
    double x = 0.0, y = 0.0;
    moon_point(cls, t, x, y);
    x += rng.normal(noise);
    y += rng.normal(noise);
    double fx = 0.0, fy = 0.0;
    moons_affine(x, y, fx, fy);
    feats[i * 2] = std::min(std::max(fx, 0.0), 1.0);
    feats[i * 2 + 1] = std::min(std::max(fy, 0.0), 1.0);
    bundle.labels[i] = cls;
  }
  bundle.features = Tensor::from({n, 2}, std::move(feats));
  bundle.metadata["name"] = "two_moons";
  bundle.metadata["n"] = std::to_string(n);
  bundle.metadata["noise"] = format_double(noise);
  bundle.metadata["seed"] = std::to_string(seed);
  bundle.metadata["margin"] = format_double(moons_margin());
  return bundle;
}

DatasetBundle gen_blob_grid(std::size_t classes, std::size_t per_class, double spacing,
                            double noise, std::uint64_t seed, bool image,
                            const std::string& split) {
  if (classes < 2) fail(ErrorKind::Value, "blob_grid: need at least 2 classes");
  if (per_class < 1) fail(ErrorKind::Value, "blob_grid: need at least 1 sample per class");
  if (spacing <= 0.0) fail(ErrorKind::Value, "blob_grid: spacing must be > 0");
  if (noise < 0.0) fail(ErrorKind::Value, "blob_grid: noise must be >= 0");

  std::size_t side = 1;
  while (side * side < classes) ++side;

  // Translation-only when the padded grid fits in the unit square, so the
  // post-rescale margin equals the requested spacing whenever possible.
  const double extent = static_cast<double>(side) * spacing;
  const double scale = extent > 1.0 ? 1.0 / extent : 1.0;
  const double offset = 0.5 * (1.0 - scale * extent) + scale * spacing * 0.5;

  Rng rng(mix_seed(seed, 0x626c6f62ULL));  // "blob"
  const std::size_t n = classes * per_class;
  std::vector<double> points(n * 2);
  std::vector<std::size_t> labels(n);
  for (std::size_t c = 0; c < classes; ++c) {
    const double cx = static_cast<double>(c % side) * spacing;
    const double cy = static_cast<double>(c / side) * spacing;
    for (std::size_t k = 0; k < per_class; ++k) {
      const std::size_t i = c * per_class + k;
      const double px = scale * (cx + rng.normal(noise)) + offset;
      const double py = scale * (cy + rng.normal(noise)) + offset;
      points[i * 2] = std::min(std::max(px, 0.0), 1.0);
      points[i * 2 + 1] = std::min(std::max(py, 0.0), 1.0);
      labels[i] = c;
    }
  }

  DatasetBundle bundle;
  bundle.classes = classes;
  bundle.split = split;
  bundle.labels = std::move(labels);
  if (!image) {
    bundle.features = Tensor::from({n, 2}, std::move(points));
  } else {
    // Each point rendered as a Gaussian intensity bump on an 8x8 patch.
    constexpr std::size_t kSide = 8;
    constexpr double kWidth = 0.18;
    std::vector<double> pixels(n * kSide * kSide);
    for (std::size_t i = 0; i < n; ++i) {
      const double px = points[i * 2], py = points[i * 2 + 1];
      for (std::size_t r = 0; r < kSide; ++r) {
        for (std::size_t c = 0; c < kSide; ++c) {
          const double gx = static_cast<double>(c) / (kSide - 1);
          const double gy = static_cast<double>(r) / (kSide - 1);
          const double d2 = (gx - px) * (gx - px) + (gy - py) * (gy - py);
          pixels[(i * kSide + r) * kSide + c] = std::exp(-d2 / (2.0 * kWidth * kWidth));
        }
      }
    }
    bundle.features = Tensor::from({n, 1, kSide, kSide}, std::move(pixels));
  }
  bundle.metadata["name"] = "blob_grid";
  bundle.metadata["classes"] = std::to_string(classes);
  bundle.metadata["per_class"] = std::to_string(per_class);
  bundle.metadata["spacing"] = format_double(spacing);
  bundle.metadata["noise"] = format_double(noise);
  bundle.metadata["seed"] = std::to_string(seed);
  bundle.metadata["image"] = image ? "1" : "0";
  bundle.metadata["margin"] = format_double(scale * spacing);
  return bundle;
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

void read_bytes(std::ifstream& in, void* ptr, std::size_t n, const char* what) {
  in.read(static_cast<char*>(ptr), static_cast<std::streamsize>(n));
  if (in.gcount() != static_cast<std::streamsize>(n)) {
    fail(ErrorKind::Io, std::string("corrupt dataset: truncated ") + what);
  }
}

std::uint32_t read_u32(std::ifstream& in, const char* what) {
  unsigned char b[4];
  read_bytes(in, b, 4, what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_dataset(const DatasetBundle& bundle, const std::string& path) {
  bundle.validate();
  if (bundle.classes > 0xffff) fail(ErrorKind::Value, "dataset: too many classes for u16 labels");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open dataset for writing: " + path);
  write_bytes(out, kMagic, 4);
  write_u32(out, kVersion);
  write_u32(out, static_cast<std::uint32_t>(bundle.classes));
  write_u32(out, static_cast<std::uint32_t>(bundle.count()));
  const Shape sample = bundle.sample_shape();
  const unsigned char rank = static_cast<unsigned char>(sample.size());
  write_bytes(out, &rank, 1);
  for (std::size_t d : sample) write_u32(out, static_cast<std::uint32_t>(d));
  for (double v : bundle.features.data) {
    std::uint64_t bits = 0;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
    write_bytes(out, b, 8);
  }
  for (std::size_t l : bundle.labels) {
    unsigned char b[2] = {static_cast<unsigned char>(l), static_cast<unsigned char>(l >> 8)};
    write_bytes(out, b, 2);
  }
  std::string meta = "split=" + bundle.split + "\n";
  for (const auto& [key, value] : bundle.metadata) meta += key + "=" + value + "\n";
  write_u32(out, static_cast<std::uint32_t>(meta.size()));
  write_bytes(out, meta.data(), meta.size());
  if (!out) fail(ErrorKind::Io, "write failed: " + path);
}

DatasetBundle read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open dataset: " + path);
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) {
    fail(ErrorKind::Format, "not a dataset: " + path);
  }
  const std::uint32_t version = read_u32(in, "version");
  if (version != kVersion) fail(ErrorKind::Format, "unsupported dataset version");

  DatasetBundle bundle;
  bundle.classes = read_u32(in, "class count");
  const std::uint32_t count = read_u32(in, "sample count");
  unsigned char rank = 0;
  read_bytes(in, &rank, 1, "feature rank");
  Shape shape{count};
  for (unsigned r = 0; r < rank; ++r) shape.push_back(read_u32(in, "feature dim"));
  std::vector<double> data(shape_size(shape));
  for (double& v : data) {
    unsigned char b[8];
    read_bytes(in, b, 8, "features");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    std::memcpy(&v, &bits, 8);
  }
  bundle.features = Tensor::from(shape, std::move(data));
  bundle.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    unsigned char b[2];
    read_bytes(in, b, 2, "labels");
    bundle.labels[i] = static_cast<std::size_t>(b[0]) | (static_cast<std::size_t>(b[1]) << 8);
  }
  const std::uint32_t meta_len = read_u32(in, "metadata");
  std::string meta(meta_len, '\0');
  if (meta_len) read_bytes(in, meta.data(), meta_len, "metadata");
  std::size_t pos = 0;
  while (pos < meta.size()) {
    auto nl = meta.find('\n', pos);
    if (nl == std::string::npos) nl = meta.size();
    const std::string line = meta.substr(pos, nl - pos);
    pos = nl + 1;
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    if (key == "split") {
      bundle.split = line.substr(eq + 1);
    } else {
      bundle.metadata[key] = line.substr(eq + 1);
    }
  }
  bundle.validate();
  return bundle;
}

std::pair<Tensor, std::vector<std::size_t>> gather_batch(const DatasetBundle& data,
                                                         const std::vector<std::size_t>& indices,
                                                         std::size_t begin, std::size_t end) {
  const std::size_t sample = shape_size(data.sample_shape());
  const std::size_t n = end - begin;
  std::vector<double> feats(n * sample);
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t src = indices[begin + i];
    std::copy(data.features.data.begin() + static_cast<std::ptrdiff_t>(src * sample),
              data.features.data.begin() + static_cast<std::ptrdiff_t>((src + 1) * sample),
              feats.begin() + static_cast<std::ptrdiff_t>(i * sample));
    labels[i] = data.labels[src];
  }
  Shape shape{n};
  for (std::size_t d : data.sample_shape()) shape.push_back(d);
  return {Tensor::from(shape, std::move(feats)), std::move(labels)};
}

}  // namespace mmard
