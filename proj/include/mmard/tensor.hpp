#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

namespace mmard {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major 64-bit float tensor. `node` links the tensor to the graph
// that recorded it; -1 means a plain value outside any graph.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  int node{-1};

  Tensor() = default;

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor from(const Shape& shape, std::vector<double> values);
  static Tensor scalar(double value) { return from({1}, {value}); }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  bool is_scalar() const { return data.size() == 1; }
  double item() const;

  // Same tensor with the graph handle stripped.
  Tensor detached() const { return Tensor{shape, data, -1}; }

  Tensor(Shape s, std::vector<double> d, int n) : shape(std::move(s)), data(std::move(d)), node(n) {}
};

enum class OpKind {
  Leaf,
  Add,
  Sub,
  ScalarMul,
  Mul,       // elementwise
  MatMul,
  Affine,    // x*W + b
  Relu,
  Conv2d,
  Flatten,
  SoftmaxTau,
  LogSoftmaxTau,
  Sum,
  Mean,
  Log,
  Abs,
  Square,
  Sqrt,
  Dot,
  Clamp,
  Normalize,  // row-wise L2 unit vectors over the last axis
};

const char* op_name(OpKind kind);

struct OpAttrs {
  double tau{1.0};
  double scalar{0.0};
  double lo{0.0};
  double hi{0.0};
  int stride{1};
  int pad{0};
};

// ∂(scalar root)/∂(leaf) for every leaf that requires gradients. Stop-gradient
// leaves never appear.
class GradientMap {
 public:
  bool contains(int node) const { return grads_.count(node) != 0; }
  const Tensor& at(int node) const;
  void set(int node, Tensor grad) { grads_[node] = std::move(grad); }
  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<int, Tensor> grads_;
};

// Recording tape. Nodes are appended in topological order (inputs always
// precede consumers); backward walks the tape once in reverse.
class Graph {
 public:
  Tensor leaf(const Tensor& value, bool requires_grad);
  Tensor constant(const Tensor& value) { return leaf(value, false); }
  Tensor constant(const Shape& shape, std::vector<double> values);
  // Re-registers the forward value of `t` as a fresh constant leaf.
  Tensor detach(const Tensor& t) { return leaf(t.detached(), false); }

  Tensor apply(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs = {});
  GradientMap backward(const Tensor& root) const;

  std::size_t node_count() const { return nodes_.size(); }
  const Tensor& value(int node) const;
  bool requires_grad(int node) const;

 private:
  struct Node {
    OpKind kind;
    std::vector<int> inputs;
    OpAttrs attrs;
    Tensor value;  // forward value, node handle not set
    bool requires_grad{false};
  };

  std::vector<Node> nodes_;
  int record(Node node);
  int input_id(const Tensor& t) const;
};

// Expression helpers; every tensor argument must be recorded in `g`.
Tensor add(Graph& g, const Tensor& a, const Tensor& b);
Tensor sub(Graph& g, const Tensor& a, const Tensor& b);
Tensor scalar_mul(Graph& g, const Tensor& a, double c);
Tensor mul(Graph& g, const Tensor& a, const Tensor& b);
Tensor matmul(Graph& g, const Tensor& a, const Tensor& b);
Tensor affine(Graph& g, const Tensor& x, const Tensor& w, const Tensor& b);
Tensor relu(Graph& g, const Tensor& x);
Tensor conv2d(Graph& g, const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor flatten(Graph& g, const Tensor& x);
Tensor softmax(Graph& g, const Tensor& logits, double tau);
Tensor log_softmax(Graph& g, const Tensor& logits, double tau);
Tensor sum(Graph& g, const Tensor& x);
Tensor mean(Graph& g, const Tensor& x);
Tensor log(Graph& g, const Tensor& x);
Tensor abs(Graph& g, const Tensor& x);
Tensor square(Graph& g, const Tensor& x);
Tensor sqrt(Graph& g, const Tensor& x);
Tensor dot(Graph& g, const Tensor& a, const Tensor& b);
Tensor clamp(Graph& g, const Tensor& x, double lo, double hi);
Tensor normalize(Graph& g, const Tensor& x);

// Value-level softmax over the last axis (max-subtraction stable form).
Tensor softmax_values(const Tensor& logits, double tau);
Tensor log_softmax_values(const Tensor& logits, double tau);

// Max over coordinates of |analytic - central difference| / (|cd| + 1e-12)
// for a scalar-valued function of one tensor. The finite-difference side uses
// forward evaluation only, independent of backward().
using ScalarFn = std::function<Tensor(Graph&, const Tensor&)>;
double grad_check(const ScalarFn& f, const Tensor& x, double h);

}  // namespace mmard
