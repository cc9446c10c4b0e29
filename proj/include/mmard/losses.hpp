#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mmard/tensor.hpp"

namespace mmard {

enum class Method { Sat, Trades, Ard, Iad, Rslad, Mtard, Mmard };

Method method_from_string(const std::string& name);
const char* method_name(Method m);
const std::vector<Method>& all_methods();

// One row of the objective table: which inner/outer pair to run plus its
// hyperparameters. `inner_override` swaps in another method's inner objective
// for the cross-combination study.
struct MethodSpec {
  Method method{Method::Mmard};
  std::optional<Method> inner_override;
  double alpha{1.0};
  double beta{1.0};
  double lambda{6.0};
  double tau{1.0};
  double huber_delta{1.0};

  Method inner_method() const { return inner_override.value_or(method); }
  void validate() const;
};

// Logit blocks for one batch. Blocks a method does not use may be absent;
// dispatch reports the missing block by name.
struct BatchOutputs {
  std::optional<Tensor> student_nat;        // S(x)
  std::optional<Tensor> student_adv;        // S(x')
  std::optional<Tensor> teacher_nat;        // T(x)
  std::optional<Tensor> teacher_adv;        // T(x')
  std::optional<Tensor> clean_teacher_nat;  // T_nat(x), two-teacher methods
  std::vector<std::size_t> labels;
};

// Mean over the batch of -log softmax(logits/tau)[label].
Tensor cross_entropy(Graph& g, const Tensor& logits, const std::vector<std::size_t>& labels,
                     double tau = 1.0);

// Mean over the batch of KL(P || Q) with P = softmax(reference/tau) treated as
// a constant and Q = softmax(trainee/tau); gradients flow only into the
// trainee. `tau_squared` applies the temperature-scaled distillation factor.
Tensor kl_div(Graph& g, const Tensor& reference_logits, const Tensor& trainee_logits, double tau,
              bool tau_squared = false);

// Elementwise Huber: 0.5 d^2 inside |d| <= delta, delta(|d| - delta/2) outside.
Tensor huber(Graph& g, const Tensor& a, const Tensor& b, double delta);

// Cosine of the angle at the one-hot label vertex between (pred_nat - y) and
// (pred_adv - y); rows with vanishing difference norm contribute 0.
Tensor psi(Graph& g, const Tensor& pred_nat, const Tensor& pred_adv, std::size_t label);

// Raw normalized-dot kernel behind psi; inputs are unnormalized difference
// vectors over the last axis, output is [rows,1].
Tensor psi_kernel(Graph& g, const Tensor& diff_nat, const Tensor& diff_adv);

// Mean over the batch of huber(psi_teacher, psi_student); the teacher side is
// fully stop-gradient.
Tensor trd_loss(Graph& g, const BatchOutputs& batch, double delta);

// Outer minimization objective for the configured method.
Tensor outer_loss(Graph& g, const MethodSpec& spec, const BatchOutputs& batch);

// Inner maximization objective (to ascend w.r.t. x'). Every distributional
// reference is stop-gradient; the only gradient path is through S(x').
Tensor inner_objective(Graph& g, const MethodSpec& spec, const BatchOutputs& batch);

}  // namespace mmard
