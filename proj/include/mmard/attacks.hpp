#pragma once

#include <cstdint>
#include <vector>

#include "mmard/losses.hpp"
#include "mmard/models.hpp"
#include "mmard/tensor.hpp"

namespace mmard {

enum class AttackFamily { Fgsm, Pgd, Cw };

enum class EvalObjective { Ce, TradesKl, CwMargin };

// Objective ascended by the attack: either a training method's inner row or
// one of the fixed evaluation objectives.
struct AttackObjective {
  enum class Kind { Method, Eval };
  Kind kind{Kind::Eval};
  MethodSpec method;
  EvalObjective eval{EvalObjective::Ce};

  static AttackObjective from_method(const MethodSpec& spec) {
    AttackObjective o;
    o.kind = Kind::Method;
    o.method = spec;
    return o;
  }
  static AttackObjective evaluation(EvalObjective e) {
    AttackObjective o;
    o.kind = Kind::Eval;
    o.eval = e;
    return o;
  }
};

struct AttackSpec {
  AttackFamily family{AttackFamily::Pgd};
  double epsilon{0.0};
  double step{0.0};
  std::size_t steps{1};
  double random_start{0.0};
  AttackObjective objective;
  double clamp_lo{0.0};
  double clamp_hi{1.0};

  void validate() const;
};

struct AttackModels {
  const Model* attacked{nullptr};
  const Model* teacher{nullptr};
  const Model* teacher_nat{nullptr};
};

struct AdversarialBatch {
  Tensor x;
  Tensor x_adv;
  std::vector<double> objective_trace;  // ascended objective per step
};

// Componentwise clip of `cand` into [x - eps, x + eps] ∩ [lo, hi]; idempotent.
Tensor project_linf(const Tensor& cand, const Tensor& x, double eps, double lo, double hi);

AdversarialBatch pgd_attack(const AttackModels& models, const AttackSpec& spec, const Tensor& x,
                            const std::vector<std::size_t>& y, std::uint64_t seed);
AdversarialBatch fgsm_attack(const AttackModels& models, const AttackSpec& spec, const Tensor& x,
                             const std::vector<std::size_t>& y);
AdversarialBatch cw_linf_attack(const AttackModels& models, const AttackSpec& spec, const Tensor& x,
                                const std::vector<std::size_t>& y, std::uint64_t seed);

// Dispatch on spec.family.
AdversarialBatch run_attack(const AttackModels& models, const AttackSpec& spec, const Tensor& x,
                            const std::vector<std::size_t>& y, std::uint64_t seed);

}  // namespace mmard
