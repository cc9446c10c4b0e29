#include "mmard/attacks.hpp"

#include <cmath>

#include "mmard/errors.hpp"
#include "mmard/rng.hpp"

namespace mmard {

namespace {

// Fixed (per attack) reference logits; recomputed blocks are forwarded per
// step on detached inputs so the only gradient path runs through x'.
struct FixedRefs {
  std::optional<Tensor> attacked_nat;  // S(x) / f(x)
  std::optional<Tensor> teacher_nat;   // T(x)
};

Tensor forward_values(const Model& m, const Tensor& batch) {
  Graph g;
  return forward_logits(g, m, g.constant(batch)).detached();
}

bool objective_needs(const AttackObjective& objective, Method row) {
  return objective.kind == AttackObjective::Kind::Method &&
         objective.method.inner_method() == row;
}

FixedRefs prepare_refs(const AttackModels& models, const AttackSpec& spec, const Tensor& x) {
  FixedRefs refs;
  const bool wants_trades = objective_needs(spec.objective, Method::Trades) ||
                            (spec.objective.kind == AttackObjective::Kind::Eval &&
                             spec.objective.eval == EvalObjective::TradesKl);
  if (wants_trades) refs.attacked_nat = forward_values(*models.attacked, x);
  if (objective_needs(spec.objective, Method::Rslad)) {
    if (models.teacher == nullptr) {
      fail(ErrorKind::Value, "attack: rslad inner objective requires a teacher model");
    }
    refs.teacher_nat = forward_values(*models.teacher, x);
  }
  if (objective_needs(spec.objective, Method::Mmard) && models.teacher == nullptr) {
    fail(ErrorKind::Value, "attack: mmard inner objective requires a teacher model");
  }
  return refs;
}

// CW margin at kappa = 0: mean over the batch of min(max_{j!=y} z_j - z_y, 0).
// The runner-up class is picked from the current forward values, so the
// objective is the usual per-step linearization of the margin.
Tensor margin_objective(Graph& g, const Tensor& logits, const std::vector<std::size_t>& y) {
  const std::size_t n = logits.shape[0], c = logits.shape[1];
  if (y.size() != n) fail(ErrorKind::Shape, "attack: label count does not match batch");
  std::vector<double> mask(n * c, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (y[i] >= c) fail(ErrorKind::Value, "attack: label out of range");
    std::size_t best = y[i] == 0 ? 1 : 0;
    for (std::size_t j = 0; j < c; ++j) {
      if (j != y[i] && logits.data[i * c + j] > logits.data[i * c + best]) best = j;
    }
    mask[i * c + best] = 1.0;
    mask[i * c + y[i]] -= 1.0;
  }
  const Tensor m = g.constant({n, c}, std::move(mask));
  const Tensor ones = g.constant({c, 1}, std::vector<double>(c, 1.0));
  const Tensor margins = matmul(g, mul(g, m, logits), ones);  // [n,1]
  return mean(g, clamp(g, margins, -1e30, 0.0));
}

// One objective evaluation at `x_cur` plus its gradient w.r.t. x_cur.
double objective_gradient(const AttackModels& models, const AttackSpec& spec, const FixedRefs& refs,
                          const Tensor& x_cur, const std::vector<std::size_t>& y, Tensor& grad_out) {
  Graph g;
  const Tensor xa = g.leaf(x_cur, true);
  const Tensor s_adv = forward_logits(g, attach_model(g, *models.attacked, /*trainable=*/false), xa);

  Tensor objective;
  if (spec.objective.kind == AttackObjective::Kind::Eval) {
    switch (spec.objective.eval) {
      case EvalObjective::Ce:
        objective = cross_entropy(g, s_adv, y);
        break;
      case EvalObjective::TradesKl:
        objective = kl_div(g, g.constant(*refs.attacked_nat), s_adv, 1.0);
        break;
      case EvalObjective::CwMargin:
        objective = margin_objective(g, s_adv, y);
        break;
    }
  } else {
    BatchOutputs batch;
    batch.labels = y;
    batch.student_adv = s_adv;
    switch (spec.objective.method.inner_method()) {
      case Method::Trades:
        batch.student_nat = g.constant(*refs.attacked_nat);
        break;
      case Method::Rslad:
        batch.teacher_nat = g.constant(*refs.teacher_nat);
        break;
      case Method::Mmard:
        // The teacher's robust prediction tracks the current x'; forwarded on
        // a detached copy so it stays a pure reference.
        batch.teacher_adv =
            forward_logits(g, attach_model(g, *models.teacher, /*trainable=*/false),
                           g.constant(x_cur));
        break;
      default:
        break;
    }
    objective = inner_objective(g, spec.objective.method, batch);
  }

  const GradientMap grads = g.backward(objective);
  grad_out = grads.at(xa.node);
  return objective.item();
}

AdversarialBatch ascend(const AttackModels& models, const AttackSpec& spec, const Tensor& x,
                        const std::vector<std::size_t>& y, std::uint64_t seed, std::size_t steps,
                        double step_size, double random_start) {
  spec.validate();
  if (models.attacked == nullptr) fail(ErrorKind::Value, "attack: no model to attack");
  const FixedRefs refs = prepare_refs(models, spec, x);

  Tensor x_cur = x.detached();
  if (random_start > 0.0) {
    Rng rng(mix_seed(seed, 0x617474ULL));  // "att"
    for (double& v : x_cur.data) v += rng.uniform(-random_start, random_start);
    x_cur = project_linf(x_cur, x, spec.epsilon, spec.clamp_lo, spec.clamp_hi);
  }

  AdversarialBatch result;
  result.x = x.detached();
  result.objective_trace.reserve(steps);
  for (std::size_t s = 0; s < steps; ++s) {
    Tensor grad;
    result.objective_trace.push_back(objective_gradient(models, spec, refs, x_cur, y, grad));
    for (std::size_t i = 0; i < x_cur.data.size(); ++i) {
      const double gi = grad.data[i];
      const double sign = gi > 0.0 ? 1.0 : (gi < 0.0 ? -1.0 : 0.0);
      x_cur.data[i] += step_size * sign;
    }
    x_cur = project_linf(x_cur, x, spec.epsilon, spec.clamp_lo, spec.clamp_hi);
  }
  result.x_adv = x_cur;
  return result;
}

}  // namespace

void AttackSpec::validate() const {
  if (epsilon < 0.0) fail(ErrorKind::Value, "attack: epsilon must be >= 0");
  if (steps < 1) fail(ErrorKind::Value, "attack: steps must be >= 1");
  if (step <= 0.0 && family != AttackFamily::Fgsm) {
    fail(ErrorKind::Value, "attack: step size must be > 0");
  }
  if (random_start < 0.0) fail(ErrorKind::Value, "attack: random start must be >= 0");
  if (!(clamp_lo < clamp_hi)) fail(ErrorKind::Value, "attack: clamp range is empty");
}

Tensor project_linf(const Tensor& cand, const Tensor& x, double eps, double lo, double hi) {
  if (cand.shape != x.shape) {
    fail(ErrorKind::Shape, "project_linf: " + shape_str(cand.shape) + " vs " + shape_str(x.shape));
  }
  Tensor out = cand.detached();
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const double floor = std::max(x.data[i] - eps, lo);
    const double ceil = std::min(x.data[i] + eps, hi);
    out.data[i] = std::min(std::max(out.data[i], floor), ceil);
  }
  return out;
}

AdversarialBatch pgd_attack(const AttackModels& models, const AttackSpec& spec, const Tensor& x,
                            const std::vector<std::size_t>& y, std::uint64_t seed) {
  if (spec.family != AttackFamily::Pgd) fail(ErrorKind::Value, "pgd_attack: spec family is not pgd");
  return ascend(models, spec, x, y, seed, spec.steps, spec.step, spec.random_start);
}

AdversarialBatch fgsm_attack(const AttackModels& models, const AttackSpec& spec, const Tensor& x,
                             const std::vector<std::size_t>& y) {
  if (spec.family != AttackFamily::Fgsm) {
    fail(ErrorKind::Value, "fgsm_attack: spec family is not fgsm");
  }
  // Single full-radius signed step, no random start: PGD(steps=1, r0=0, step=eps).
  return ascend(models, spec, x, y, /*seed=*/0, /*steps=*/1, /*step_size=*/spec.epsilon,
                /*random_start=*/0.0);
}

AdversarialBatch cw_linf_attack(const AttackModels& models, const AttackSpec& spec, const Tensor& x,
                                const std::vector<std::size_t>& y, std::uint64_t seed) {
  if (spec.family != AttackFamily::Cw) fail(ErrorKind::Value, "cw_linf_attack: spec family is not cw");
  AttackSpec margin_spec = spec;
  margin_spec.objective = AttackObjective::evaluation(EvalObjective::CwMargin);
  return ascend(models, margin_spec, x, y, seed, spec.steps, spec.step, spec.random_start);
}

AdversarialBatch run_attack(const AttackModels& models, const AttackSpec& spec, const Tensor& x,
                            const std::vector<std::size_t>& y, std::uint64_t seed) {
  switch (spec.family) {
    case AttackFamily::Fgsm: return fgsm_attack(models, spec, x, y);
    case AttackFamily::Pgd: return pgd_attack(models, spec, x, y, seed);
    case AttackFamily::Cw: return cw_linf_attack(models, spec, x, y, seed);
  }
  fail(ErrorKind::Value, "attack: unknown family");
}

}  // namespace mmard
