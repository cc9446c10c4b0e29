#include "mmard/tensor.hpp"

#include <cmath>
#include <sstream>

#include "mmard/errors.hpp"

namespace mmard {

namespace {

constexpr double kNormEps = 1e-12;  // degenerate-row threshold for Normalize

bool all_finite(const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

// Rows over the last axis: a rank-r tensor is (rows x cols) with cols = last dim.
void row_view(const Shape& shape, std::size_t& rows, std::size_t& cols) {
  cols = shape.back();
  rows = 1;
  for (std::size_t i = 0; i + 1 < shape.size(); ++i) rows *= shape[i];
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ",";
    out << shape[i];
  }
  out << "]";
  return out.str();
}

Tensor Tensor::zeros(const Shape& shape) {
  return from(shape, std::vector<double>(shape_size(shape), 0.0));
}

Tensor Tensor::full(const Shape& shape, double value) {
  return from(shape, std::vector<double>(shape_size(shape), value));
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values) {
  if (shape.empty()) fail(ErrorKind::Shape, "tensor: empty shape");
  for (std::size_t d : shape) {
    if (d == 0) fail(ErrorKind::Shape, "tensor: zero dimension in " + shape_str(shape));
  }
  if (shape_size(shape) != values.size()) {
    fail(ErrorKind::Shape, "tensor: shape " + shape_str(shape) + " does not match " +
                               std::to_string(values.size()) + " values");
  }
  if (!all_finite(values)) fail(ErrorKind::Numeric, "tensor: non-finite value");
  return Tensor{shape, std::move(values), -1};
}

double Tensor::item() const {
  if (data.size() != 1) fail(ErrorKind::Shape, "item: tensor " + shape_str(shape) + " is not scalar");
  return data[0];
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::ScalarMul: return "scalar_mul";
    case OpKind::Mul: return "elementwise_mul";
    case OpKind::MatMul: return "matmul";
    case OpKind::Affine: return "affine";
    case OpKind::Relu: return "relu";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Flatten: return "flatten";
    case OpKind::SoftmaxTau: return "softmax_tau";
    case OpKind::LogSoftmaxTau: return "log_softmax_tau";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Log: return "log";
    case OpKind::Abs: return "abs";
    case OpKind::Square: return "square";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Dot: return "dot";
    case OpKind::Clamp: return "clamp";
    case OpKind::Normalize: return "normalize";
  }
  return "?";
}

const Tensor& GradientMap::at(int node) const {
  auto it = grads_.find(node);
  if (it == grads_.end()) fail(ErrorKind::Value, "gradient map: no entry for node " + std::to_string(node));
  return it->second;
}

int Graph::record(Node node) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(node));
  return id;
}

int Graph::input_id(const Tensor& t) const {
  if (t.node < 0 || t.node >= static_cast<int>(nodes_.size())) {
    fail(ErrorKind::Value, "graph: tensor is not recorded in this graph");
  }
  return t.node;
}

const Tensor& Graph::value(int node) const {
  if (node < 0 || node >= static_cast<int>(nodes_.size())) {
    fail(ErrorKind::Value, "graph: bad node id " + std::to_string(node));
  }
  return nodes_[static_cast<std::size_t>(node)].value;
}

bool Graph::requires_grad(int node) const {
  if (node < 0 || node >= static_cast<int>(nodes_.size())) return false;
  return nodes_[static_cast<std::size_t>(node)].requires_grad;
}

Tensor Graph::leaf(const Tensor& value, bool requires_grad) {
  if (!all_finite(value.data)) fail(ErrorKind::Numeric, "leaf: non-finite value");
  Node node;
  node.kind = OpKind::Leaf;
  node.value = value.detached();
  node.requires_grad = requires_grad;
  const int id = record(std::move(node));
  Tensor out = nodes_.back().value;
  out.node = id;
  return out;
}

Tensor Graph::constant(const Shape& shape, std::vector<double> values) {
  return leaf(Tensor::from(shape, std::move(values)), false);
}

namespace {

[[noreturn]] void shape_error(OpKind kind, const std::string& detail) {
  fail(ErrorKind::Shape, std::string(op_name(kind)) + ": " + detail);
}

}  // namespace

Tensor Graph::apply(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs) {
  if (kind == OpKind::Leaf) fail(ErrorKind::Value, "apply: leaf is not an operation");
  std::vector<int> ids;
  ids.reserve(inputs.size());
  for (const Tensor& t : inputs) ids.push_back(input_id(t));

  auto expect_inputs = [&](std::size_t n) {
    if (inputs.size() != n) {
      fail(ErrorKind::Value, std::string(op_name(kind)) + ": expected " + std::to_string(n) +
                                 " inputs, got " + std::to_string(inputs.size()));
    }
  };
  auto expect_same_shape = [&](const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) {
      shape_error(kind, "shapes " + shape_str(a.shape) + " and " + shape_str(b.shape) + " differ");
    }
  };

  Tensor out;
  switch (kind) {
    case OpKind::Add:
    case OpKind::Sub: {
      expect_inputs(2);
      expect_same_shape(inputs[0], inputs[1]);
      out = Tensor{inputs[0].shape, std::vector<double>(inputs[0].size()), -1};
      const double sign = kind == OpKind::Add ? 1.0 : -1.0;
      for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = inputs[0].data[i] + sign * inputs[1].data[i];
      }
      break;
    }
    case OpKind::ScalarMul: {
      expect_inputs(1);
      out = Tensor{inputs[0].shape, std::vector<double>(inputs[0].size()), -1};
      for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = attrs.scalar * inputs[0].data[i];
      break;
    }
    case OpKind::Mul: {
      expect_inputs(2);
      expect_same_shape(inputs[0], inputs[1]);
      out = Tensor{inputs[0].shape, std::vector<double>(inputs[0].size()), -1};
      for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = inputs[0].data[i] * inputs[1].data[i];
      }
      break;
    }
    case OpKind::MatMul: {
      expect_inputs(2);
      const Tensor& a = inputs[0];
      const Tensor& b = inputs[1];
      if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0]) {
        shape_error(kind, "lhs " + shape_str(a.shape) + " incompatible with rhs " + shape_str(b.shape));
      }
      const std::size_t n = a.shape[0], k = a.shape[1], m = b.shape[1];
      out = Tensor{{n, m}, std::vector<double>(n * m, 0.0), -1};
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
          const double av = a.data[i * k + kk];
          for (std::size_t j = 0; j < m; ++j) out.data[i * m + j] += av * b.data[kk * m + j];
        }
      }
      break;
    }
    case OpKind::Affine: {
      expect_inputs(3);
      const Tensor& x = inputs[0];
      const Tensor& w = inputs[1];
      const Tensor& b = inputs[2];
      if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || x.shape[1] != w.shape[0] ||
          b.shape[0] != w.shape[1]) {
        shape_error(kind, "x " + shape_str(x.shape) + ", w " + shape_str(w.shape) + ", b " +
                              shape_str(b.shape));
      }
      const std::size_t n = x.shape[0], k = x.shape[1], m = w.shape[1];
      out = Tensor{{n, m}, std::vector<double>(n * m), -1};
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) out.data[i * m + j] = b.data[j];
        for (std::size_t kk = 0; kk < k; ++kk) {
          const double xv = x.data[i * k + kk];
          for (std::size_t j = 0; j < m; ++j) out.data[i * m + j] += xv * w.data[kk * m + j];
        }
      }
      break;
    }
    case OpKind::Relu: {
      expect_inputs(1);
      out = Tensor{inputs[0].shape, std::vector<double>(inputs[0].size()), -1};
      for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = inputs[0].data[i] > 0.0 ? inputs[0].data[i] : 0.0;
      }
      break;
    }
    case OpKind::Conv2d: {
      expect_inputs(3);
      const Tensor& x = inputs[0];
      const Tensor& w = inputs[1];
      const Tensor& b = inputs[2];
      if (x.rank() != 4 || w.rank() != 4 || b.rank() != 1) {
        shape_error(kind, "x " + shape_str(x.shape) + ", w " + shape_str(w.shape) + ", b " +
                              shape_str(b.shape));
      }
      const std::size_t n = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3];
      const std::size_t cout = w.shape[0], kh = w.shape[2], kw = w.shape[3];
      if (w.shape[1] != cin || b.shape[0] != cout) {
        shape_error(kind, "kernel " + shape_str(w.shape) + " does not match input " + shape_str(x.shape));
      }
      const int stride = attrs.stride, pad = attrs.pad;
      if (stride < 1 || pad < 0) fail(ErrorKind::Value, "conv2d: stride must be >=1 and pad >=0");
      const long ho_l = (static_cast<long>(h) + 2 * pad - static_cast<long>(kh)) / stride + 1;
      const long wo_l = (static_cast<long>(wd) + 2 * pad - static_cast<long>(kw)) / stride + 1;
      if (ho_l < 1 || wo_l < 1) shape_error(kind, "kernel larger than padded input");
      const std::size_t ho = static_cast<std::size_t>(ho_l), wo = static_cast<std::size_t>(wo_l);
      out = Tensor{{n, cout, ho, wo}, std::vector<double>(n * cout * ho * wo), -1};
      for (std::size_t nn = 0; nn < n; ++nn) {
        for (std::size_t co = 0; co < cout; ++co) {
          for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
              double acc = b.data[co];
              for (std::size_t ci = 0; ci < cin; ++ci) {
                for (std::size_t ky = 0; ky < kh; ++ky) {
                  const long iy = static_cast<long>(oy) * stride + static_cast<long>(ky) - pad;
                  if (iy < 0 || iy >= static_cast<long>(h)) continue;
                  for (std::size_t kx = 0; kx < kw; ++kx) {
                    const long ix = static_cast<long>(ox) * stride + static_cast<long>(kx) - pad;
                    if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                    acc += x.data[((nn * cin + ci) * h + iy) * wd + ix] *
                           w.data[((co * cin + ci) * kh + ky) * kw + kx];
                  }
                }
              }
              out.data[((nn * cout + co) * ho + oy) * wo + ox] = acc;
            }
          }
        }
      }
      break;
    }
    case OpKind::Flatten: {
      expect_inputs(1);
      if (inputs[0].rank() < 2) shape_error(kind, "needs rank >= 2, got " + shape_str(inputs[0].shape));
      const std::size_t n = inputs[0].shape[0];
      out = Tensor{{n, inputs[0].size() / n}, inputs[0].data, -1};
      break;
    }
    case OpKind::SoftmaxTau:
    case OpKind::LogSoftmaxTau: {
      expect_inputs(1);
      if (attrs.tau <= 0.0) fail(ErrorKind::Value, std::string(op_name(kind)) + ": tau must be > 0");
      out = kind == OpKind::SoftmaxTau ? softmax_values(inputs[0], attrs.tau)
                                       : log_softmax_values(inputs[0], attrs.tau);
      break;
    }
    case OpKind::Sum:
    case OpKind::Mean: {
      expect_inputs(1);
      double acc = 0.0;
      for (double v : inputs[0].data) acc += v;
      if (kind == OpKind::Mean) acc /= static_cast<double>(inputs[0].size());
      out = Tensor{{1}, {acc}, -1};
      break;
    }
    case OpKind::Log: {
      expect_inputs(1);
      out = Tensor{inputs[0].shape, std::vector<double>(inputs[0].size()), -1};
      for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::log(inputs[0].data[i]);
      break;
    }
    case OpKind::Abs: {
      expect_inputs(1);
      out = Tensor{inputs[0].shape, std::vector<double>(inputs[0].size()), -1};
      for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::fabs(inputs[0].data[i]);
      break;
    }
    case OpKind::Square: {
      expect_inputs(1);
      out = Tensor{inputs[0].shape, std::vector<double>(inputs[0].size()), -1};
      for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = inputs[0].data[i] * inputs[0].data[i];
      }
      break;
    }
    case OpKind::Sqrt: {
      expect_inputs(1);
      out = Tensor{inputs[0].shape, std::vector<double>(inputs[0].size()), -1};
      for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::sqrt(inputs[0].data[i]);
      break;
    }
    case OpKind::Dot: {
      expect_inputs(2);
      expect_same_shape(inputs[0], inputs[1]);
      double acc = 0.0;
      for (std::size_t i = 0; i < inputs[0].size(); ++i) acc += inputs[0].data[i] * inputs[1].data[i];
      out = Tensor{{1}, {acc}, -1};
      break;
    }
    case OpKind::Clamp: {
      expect_inputs(1);
      if (!(attrs.lo < attrs.hi)) fail(ErrorKind::Value, "clamp: lo must be < hi");
      out = Tensor{inputs[0].shape, std::vector<double>(inputs[0].size()), -1};
      for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = std::min(std::max(inputs[0].data[i], attrs.lo), attrs.hi);
      }
      break;
    }
    case OpKind::Normalize: {
      expect_inputs(1);
      std::size_t rows = 0, cols = 0;
      row_view(inputs[0].shape, rows, cols);
      out = Tensor{inputs[0].shape, std::vector<double>(inputs[0].size(), 0.0), -1};
      for (std::size_t r = 0; r < rows; ++r) {
        double sq = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          const double v = inputs[0].data[r * cols + c];
          sq += v * v;
        }
        const double norm = std::sqrt(sq);
        if (norm < kNormEps) continue;  // degenerate row maps to zero
        for (std::size_t c = 0; c < cols; ++c) out.data[r * cols + c] = inputs[0].data[r * cols + c] / norm;
      }
      break;
    }
    case OpKind::Leaf:
      break;
  }

  if (!all_finite(out.data)) {
    fail(ErrorKind::Numeric, std::string(op_name(kind)) + ": non-finite output");
  }

  Node node;
  node.kind = kind;
  node.inputs = std::move(ids);
  node.attrs = attrs;
  node.value = out;
  for (int id : node.inputs) {
    node.requires_grad = node.requires_grad || nodes_[static_cast<std::size_t>(id)].requires_grad;
  }
  const int id = record(std::move(node));
  out.node = id;
  return out;
}

GradientMap Graph::backward(const Tensor& root) const {
  const int root_id = input_id(root);
  const Node& root_node = nodes_[static_cast<std::size_t>(root_id)];
  if (root_node.value.size() != 1) {
    fail(ErrorKind::Value, "backward: root must be scalar, got " + shape_str(root_node.value.shape));
  }

  std::vector<std::vector<double>> grads(nodes_.size());
  auto buf = [&](int id) -> std::vector<double>& {
    auto& g = grads[static_cast<std::size_t>(id)];
    if (g.empty()) g.assign(nodes_[static_cast<std::size_t>(id)].value.size(), 0.0);
    return g;
  };

  buf(root_id)[0] = 1.0;

  for (int i = root_id; i >= 0; --i) {
    const Node& node = nodes_[static_cast<std::size_t>(i)];
    const auto& g = grads[static_cast<std::size_t>(i)];
    if (g.empty() || !node.requires_grad || node.kind == OpKind::Leaf) continue;
    auto needs = [&](std::size_t slot) {
      return nodes_[static_cast<std::size_t>(node.inputs[slot])].requires_grad;
    };
    auto in_val = [&](std::size_t slot) -> const Tensor& {
      return nodes_[static_cast<std::size_t>(node.inputs[slot])].value;
    };

    switch (node.kind) {
      case OpKind::Add: {
        for (std::size_t slot = 0; slot < 2; ++slot) {
          if (!needs(slot)) continue;
          auto& gi = buf(node.inputs[slot]);
          for (std::size_t j = 0; j < g.size(); ++j) gi[j] += g[j];
        }
        break;
      }
      case OpKind::Sub: {
        if (needs(0)) {
          auto& gi = buf(node.inputs[0]);
          for (std::size_t j = 0; j < g.size(); ++j) gi[j] += g[j];
        }
        if (needs(1)) {
          auto& gi = buf(node.inputs[1]);
          for (std::size_t j = 0; j < g.size(); ++j) gi[j] -= g[j];
        }
        break;
      }
      case OpKind::ScalarMul: {
        if (needs(0)) {
          auto& gi = buf(node.inputs[0]);
          for (std::size_t j = 0; j < g.size(); ++j) gi[j] += node.attrs.scalar * g[j];
        }
        break;
      }
      case OpKind::Mul: {
        if (needs(0)) {
          auto& gi = buf(node.inputs[0]);
          const auto& b = in_val(1).data;
          for (std::size_t j = 0; j < g.size(); ++j) gi[j] += g[j] * b[j];
        }
        if (needs(1)) {
          auto& gi = buf(node.inputs[1]);
          const auto& a = in_val(0).data;
          for (std::size_t j = 0; j < g.size(); ++j) gi[j] += g[j] * a[j];
        }
        break;
      }
      case OpKind::MatMul: {
        const Tensor& a = in_val(0);
        const Tensor& b = in_val(1);
        const std::size_t n = a.shape[0], k = a.shape[1], m = b.shape[1];
        if (needs(0)) {
          auto& ga = buf(node.inputs[0]);
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t j = 0; j < m; ++j) {
              const double gv = g[r * m + j];
              for (std::size_t kk = 0; kk < k; ++kk) ga[r * k + kk] += gv * b.data[kk * m + j];
            }
          }
        }
        if (needs(1)) {
          auto& gb = buf(node.inputs[1]);
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t kk = 0; kk < k; ++kk) {
              const double av = a.data[r * k + kk];
              for (std::size_t j = 0; j < m; ++j) gb[kk * m + j] += av * g[r * m + j];
            }
          }
        }
        break;
      }
      case OpKind::Affine: {
        const Tensor& x = in_val(0);
        const Tensor& w = in_val(1);
        const std::size_t n = x.shape[0], k = x.shape[1], m = w.shape[1];
        if (needs(0)) {
          auto& gx = buf(node.inputs[0]);
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t j = 0; j < m; ++j) {
              const double gv = g[r * m + j];
              for (std::size_t kk = 0; kk < k; ++kk) gx[r * k + kk] += gv * w.data[kk * m + j];
            }
          }
        }
        if (needs(1)) {
          auto& gw = buf(node.inputs[1]);
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t kk = 0; kk < k; ++kk) {
              const double xv = x.data[r * k + kk];
              for (std::size_t j = 0; j < m; ++j) gw[kk * m + j] += xv * g[r * m + j];
            }
          }
        }
        if (needs(2)) {
          auto& gb = buf(node.inputs[2]);
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t j = 0; j < m; ++j) gb[j] += g[r * m + j];
          }
        }
        break;
      }
      case OpKind::Relu: {
        if (needs(0)) {
          auto& gi = buf(node.inputs[0]);
          const auto& x = in_val(0).data;
          for (std::size_t j = 0; j < g.size(); ++j) {
            if (x[j] > 0.0) gi[j] += g[j];
          }
        }
        break;
      }
      case OpKind::Conv2d: {
        const Tensor& x = in_val(0);
        const Tensor& w = in_val(1);
        const std::size_t n = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3];
        const std::size_t cout = w.shape[0], kh = w.shape[2], kw = w.shape[3];
        const std::size_t ho = node.value.shape[2], wo = node.value.shape[3];
        const int stride = node.attrs.stride, pad = node.attrs.pad;
        std::vector<double>* gx = needs(0) ? &buf(node.inputs[0]) : nullptr;
        std::vector<double>* gw = needs(1) ? &buf(node.inputs[1]) : nullptr;
        std::vector<double>* gb = needs(2) ? &buf(node.inputs[2]) : nullptr;
        for (std::size_t nn = 0; nn < n; ++nn) {
          for (std::size_t co = 0; co < cout; ++co) {
            for (std::size_t oy = 0; oy < ho; ++oy) {
              for (std::size_t ox = 0; ox < wo; ++ox) {
                const double gv = g[((nn * cout + co) * ho + oy) * wo + ox];
                if (gv == 0.0 && gb == nullptr) continue;
                if (gb) (*gb)[co] += gv;
                for (std::size_t ci = 0; ci < cin; ++ci) {
                  for (std::size_t ky = 0; ky < kh; ++ky) {
                    const long iy = static_cast<long>(oy) * stride + static_cast<long>(ky) - pad;
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                      const long ix = static_cast<long>(ox) * stride + static_cast<long>(kx) - pad;
                      if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                      const std::size_t xi = ((nn * cin + ci) * h + iy) * wd + ix;
                      const std::size_t wi = ((co * cin + ci) * kh + ky) * kw + kx;
                      if (gx) (*gx)[xi] += gv * w.data[wi];
                      if (gw) (*gw)[wi] += gv * x.data[xi];
                    }
                  }
                }
              }
            }
          }
        }
        break;
      }
      case OpKind::Flatten: {
        if (needs(0)) {
          auto& gi = buf(node.inputs[0]);
          for (std::size_t j = 0; j < g.size(); ++j) gi[j] += g[j];
        }
        break;
      }
      case OpKind::SoftmaxTau: {
        if (needs(0)) {
          auto& gi = buf(node.inputs[0]);
          const auto& p = node.value.data;
          std::size_t rows = 0, cols = 0;
          row_view(node.value.shape, rows, cols);
          for (std::size_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < cols; ++c) s += g[r * cols + c] * p[r * cols + c];
            for (std::size_t c = 0; c < cols; ++c) {
              gi[r * cols + c] += p[r * cols + c] * (g[r * cols + c] - s) / node.attrs.tau;
            }
          }
        }
        break;
      }
      case OpKind::LogSoftmaxTau: {
        if (needs(0)) {
          auto& gi = buf(node.inputs[0]);
          std::size_t rows = 0, cols = 0;
          row_view(node.value.shape, rows, cols);
          for (std::size_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < cols; ++c) s += g[r * cols + c];
            for (std::size_t c = 0; c < cols; ++c) {
              const double p = std::exp(node.value.data[r * cols + c]);
              gi[r * cols + c] += (g[r * cols + c] - p * s) / node.attrs.tau;
            }
          }
        }
        break;
      }
      case OpKind::Sum: {
        if (needs(0)) {
          auto& gi = buf(node.inputs[0]);
          for (std::size_t j = 0; j < gi.size(); ++j) gi[j] += g[0];
        }
        break;
      }
      case OpKind::Mean: {
        if (needs(0)) {
          auto& gi = buf(node.inputs[0]);
          const double gv = g[0] / static_cast<double>(gi.size());
          for (std::size_t j = 0; j < gi.size(); ++j) gi[j] += gv;
        }
        break;
      }
      case OpKind::Log: {
        if (needs(0)) {
          auto& gi = buf(node.inputs[0]);
          const auto& x = in_val(0).data;
          for (std::size_t j = 0; j < g.size(); ++j) gi[j] += g[j] / x[j];
        }
        break;
      }
      case OpKind::Abs: {
        if (needs(0)) {
          auto& gi = buf(node.inputs[0]);
          const auto& x = in_val(0).data;
          for (std::size_t j = 0; j < g.size(); ++j) {
            if (x[j] > 0.0) gi[j] += g[j];
            else if (x[j] < 0.0) gi[j] -= g[j];
          }
        }
        break;
      }
      case OpKind::Square: {
        if (needs(0)) {
          auto& gi = buf(node.inputs[0]);
          const auto& x = in_val(0).data;
          for (std::size_t j = 0; j < g.size(); ++j) gi[j] += 2.0 * x[j] * g[j];
        }
        break;
      }
      case OpKind::Sqrt: {
        if (needs(0)) {
          auto& gi = buf(node.inputs[0]);
          const auto& y = node.value.data;
          for (std::size_t j = 0; j < g.size(); ++j) gi[j] += 0.5 * g[j] / y[j];
        }
        break;
      }
      case OpKind::Dot: {
        if (needs(0)) {
          auto& gi = buf(node.inputs[0]);
          const auto& b = in_val(1).data;
          for (std::size_t j = 0; j < gi.size(); ++j) gi[j] += g[0] * b[j];
        }
        if (needs(1)) {
          auto& gi = buf(node.inputs[1]);
          const auto& a = in_val(0).data;
          for (std::size_t j = 0; j < gi.size(); ++j) gi[j] += g[0] * a[j];
        }
        break;
      }
      case OpKind::Clamp: {
        if (needs(0)) {
          auto& gi = buf(node.inputs[0]);
          const auto& x = in_val(0).data;
          for (std::size_t j = 0; j < g.size(); ++j) {
            if (x[j] > node.attrs.lo && x[j] < node.attrs.hi) gi[j] += g[j];
          }
        }
        break;
      }
      case OpKind::Normalize: {
        if (needs(0)) {
          auto& gi = buf(node.inputs[0]);
          const auto& x = in_val(0).data;
          std::size_t rows = 0, cols = 0;
          row_view(node.value.shape, rows, cols);
          for (std::size_t r = 0; r < rows; ++r) {
            double sq = 0.0;
            for (std::size_t c = 0; c < cols; ++c) sq += x[r * cols + c] * x[r * cols + c];
            const double norm = std::sqrt(sq);
            if (norm < kNormEps) continue;  // degenerate rows carry no gradient
            double vg = 0.0;
            for (std::size_t c = 0; c < cols; ++c) vg += x[r * cols + c] * g[r * cols + c];
            const double n3 = norm * norm * norm;
            for (std::size_t c = 0; c < cols; ++c) {
              gi[r * cols + c] += g[r * cols + c] / norm - x[r * cols + c] * vg / n3;
            }
          }
        }
        break;
      }
      case OpKind::Leaf:
        break;
    }
  }

  GradientMap map;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& node = nodes_[i];
    if (node.kind != OpKind::Leaf || !node.requires_grad) continue;
    Tensor grad;
    grad.shape = node.value.shape;
    if (grads[i].empty()) {
      grad.data.assign(node.value.size(), 0.0);
    } else {
      grad.data = std::move(grads[i]);
    }
    map.set(static_cast<int>(i), std::move(grad));
  }
  return map;
}

Tensor add(Graph& g, const Tensor& a, const Tensor& b) { return g.apply(OpKind::Add, {a, b}); }
Tensor sub(Graph& g, const Tensor& a, const Tensor& b) { return g.apply(OpKind::Sub, {a, b}); }

Tensor scalar_mul(Graph& g, const Tensor& a, double c) {
  OpAttrs attrs;
  attrs.scalar = c;
  return g.apply(OpKind::ScalarMul, {a}, attrs);
}

Tensor mul(Graph& g, const Tensor& a, const Tensor& b) { return g.apply(OpKind::Mul, {a, b}); }
Tensor matmul(Graph& g, const Tensor& a, const Tensor& b) { return g.apply(OpKind::MatMul, {a, b}); }

Tensor affine(Graph& g, const Tensor& x, const Tensor& w, const Tensor& b) {
  return g.apply(OpKind::Affine, {x, w, b});
}

Tensor relu(Graph& g, const Tensor& x) { return g.apply(OpKind::Relu, {x}); }

Tensor conv2d(Graph& g, const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  OpAttrs attrs;
  attrs.stride = stride;
  attrs.pad = pad;
  return g.apply(OpKind::Conv2d, {x, w, b}, attrs);
}

Tensor flatten(Graph& g, const Tensor& x) { return g.apply(OpKind::Flatten, {x}); }

Tensor softmax(Graph& g, const Tensor& logits, double tau) {
  OpAttrs attrs;
  attrs.tau = tau;
  return g.apply(OpKind::SoftmaxTau, {logits}, attrs);
}

Tensor log_softmax(Graph& g, const Tensor& logits, double tau) {
  OpAttrs attrs;
  attrs.tau = tau;
  return g.apply(OpKind::LogSoftmaxTau, {logits}, attrs);
}

Tensor sum(Graph& g, const Tensor& x) { return g.apply(OpKind::Sum, {x}); }
Tensor mean(Graph& g, const Tensor& x) { return g.apply(OpKind::Mean, {x}); }
Tensor log(Graph& g, const Tensor& x) { return g.apply(OpKind::Log, {x}); }
Tensor abs(Graph& g, const Tensor& x) { return g.apply(OpKind::Abs, {x}); }
Tensor square(Graph& g, const Tensor& x) { return g.apply(OpKind::Square, {x}); }
Tensor sqrt(Graph& g, const Tensor& x) { return g.apply(OpKind::Sqrt, {x}); }
Tensor dot(Graph& g, const Tensor& a, const Tensor& b) { return g.apply(OpKind::Dot, {a, b}); }

Tensor clamp(Graph& g, const Tensor& x, double lo, double hi) {
  OpAttrs attrs;
  attrs.lo = lo;
  attrs.hi = hi;
  return g.apply(OpKind::Clamp, {x}, attrs);
}

Tensor normalize(Graph& g, const Tensor& x) { return g.apply(OpKind::Normalize, {x}); }

Tensor log_softmax_values(const Tensor& logits, double tau) {
  if (tau <= 0.0) fail(ErrorKind::Value, "log_softmax: tau must be > 0");
  std::size_t rows = 0, cols = 0;
  row_view(logits.shape, rows, cols);
  Tensor out{logits.shape, std::vector<double>(logits.size()), -1};
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = logits.data[r * cols] / tau;
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, logits.data[r * cols + c] / tau);
    double lse = 0.0;
    for (std::size_t c = 0; c < cols; ++c) lse += std::exp(logits.data[r * cols + c] / tau - mx);
    lse = std::log(lse);
    for (std::size_t c = 0; c < cols; ++c) {
      out.data[r * cols + c] = logits.data[r * cols + c] / tau - mx - lse;
    }
  }
  return out;
}

Tensor softmax_values(const Tensor& logits, double tau) {
  Tensor out = log_softmax_values(logits, tau);
  for (double& v : out.data) v = std::exp(v);
  return out;
}

double grad_check(const ScalarFn& f, const Tensor& x, double h) {
  Graph g;
  const Tensor leaf = g.leaf(x, true);
  const Tensor out = f(g, leaf);
  const GradientMap grads = g.backward(out);
  const Tensor analytic =
      grads.contains(leaf.node) ? grads.at(leaf.node) : Tensor::zeros(x.shape);

  auto eval = [&](const Tensor& point) {
    Graph gf;
    const Tensor l = gf.leaf(point, false);
    return f(gf, l).item();
  };

  double max_rel = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor xp = x.detached();
    Tensor xm = x.detached();
    xp.data[i] += h;
    xm.data[i] -= h;
    const double fd = (eval(xp) - eval(xm)) / (2.0 * h);
    const double rel = std::fabs(analytic.data[i] - fd) / (std::fabs(fd) + 1e-12);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace mmard
