#include "mmard/losses.hpp"

#include <cmath>

#include "mmard/errors.hpp"

namespace mmard {

namespace {

const Tensor& require_block(const std::optional<Tensor>& block, const char* method,
                            const char* name) {
  if (!block.has_value()) {
    fail(ErrorKind::Value, std::string(method) + ": missing batch block " + name);
  }
  return *block;
}

void check_logits(const Tensor& t, const std::vector<std::size_t>& labels, const char* name) {
  if (t.rank() != 2) fail(ErrorKind::Shape, std::string(name) + " must be [N,C], got " + shape_str(t.shape));
  if (t.shape[0] != labels.size()) {
    fail(ErrorKind::Shape, std::string(name) + " rows do not match label count");
  }
}

std::vector<double> onehot_rows(const std::vector<std::size_t>& labels, std::size_t classes) {
  std::vector<double> y(labels.size() * classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) {
      fail(ErrorKind::Value, "label " + std::to_string(labels[i]) + " out of range [0," +
                                 std::to_string(classes) + ")");
    }
    y[i * classes + labels[i]] = 1.0;
  }
  return y;
}

// [N,C] -> [N,1] row sums via matmul with a ones column.
Tensor row_sums(Graph& g, const Tensor& m) {
  const Tensor ones = g.constant({m.shape[1], 1}, std::vector<double>(m.shape[1], 1.0));
  return matmul(g, m, ones);
}

// Per-example KL rows [N,1]; the reference distribution is taken from the
// forward values of `reference_logits`, never from its graph node.
Tensor kl_rows(Graph& g, const Tensor& reference_logits, const Tensor& trainee_logits, double tau) {
  if (reference_logits.shape != trainee_logits.shape) {
    fail(ErrorKind::Shape, "kl_div: reference " + shape_str(reference_logits.shape) +
                               " vs trainee " + shape_str(trainee_logits.shape));
  }
  if (reference_logits.rank() != 2) {
    fail(ErrorKind::Shape, "kl_div: logits must be [N,C], got " + shape_str(reference_logits.shape));
  }
  if (tau <= 0.0) fail(ErrorKind::Value, "kl_div: tau must be > 0");
  const std::size_t n = reference_logits.shape[0], c = reference_logits.shape[1];

  const Tensor log_p = log_softmax_values(reference_logits.detached(), tau);
  std::vector<double> p(log_p.data.size());
  std::vector<double> neg_entropy(n, 0.0);  // sum_j p log p per row
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const double pj = std::exp(log_p.data[i * c + j]);
      p[i * c + j] = pj;
      neg_entropy[i] += pj * log_p.data[i * c + j];
    }
  }

  const Tensor p_const = g.constant({n, c}, std::move(p));
  const Tensor ne_const = g.constant({n, 1}, std::move(neg_entropy));
  const Tensor log_q = log_softmax(g, trainee_logits, tau);
  const Tensor cross = row_sums(g, mul(g, p_const, log_q));  // sum_j p log q
  return sub(g, ne_const, cross);
}

// [N,1] psi rows for a (natural, adversarial) probability pair.
Tensor psi_rows(Graph& g, const Tensor& prob_nat, const Tensor& prob_adv, const Tensor& onehot) {
  return psi_kernel(g, sub(g, prob_nat, onehot), sub(g, prob_adv, onehot));
}

}  // namespace

Method method_from_string(const std::string& name) {
  for (Method m : all_methods()) {
    if (name == method_name(m)) return m;
  }
  fail(ErrorKind::Value, "unknown method '" + name + "'");
}

const char* method_name(Method m) {
  switch (m) {
    case Method::Sat: return "sat";
    case Method::Trades: return "trades";
    case Method::Ard: return "ard";
    case Method::Iad: return "iad";
    case Method::Rslad: return "rslad";
    case Method::Mtard: return "mtard";
    case Method::Mmard: return "mmard";
  }
  return "?";
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> methods = {Method::Sat,   Method::Trades, Method::Ard,
                                              Method::Iad,   Method::Rslad,  Method::Mtard,
                                              Method::Mmard};
  return methods;
}

void MethodSpec::validate() const {
  if (tau <= 0.0) fail(ErrorKind::Value, "method: tau must be > 0");
  if (huber_delta <= 0.0) fail(ErrorKind::Value, "method: delta must be > 0");
  if (alpha < 0.0 || beta < 0.0 || lambda < 0.0) {
    fail(ErrorKind::Value, "method: alpha, beta and lambda must be >= 0");
  }
}

Tensor cross_entropy(Graph& g, const Tensor& logits, const std::vector<std::size_t>& labels,
                     double tau) {
  check_logits(logits, labels, "cross_entropy: logits");
  const std::size_t n = logits.shape[0], c = logits.shape[1];
  const Tensor y = g.constant({n, c}, onehot_rows(labels, c));
  const Tensor picked = sum(g, mul(g, y, log_softmax(g, logits, tau)));
  return scalar_mul(g, picked, -1.0 / static_cast<double>(n));
}

Tensor kl_div(Graph& g, const Tensor& reference_logits, const Tensor& trainee_logits, double tau,
              bool tau_squared) {
  Tensor result = mean(g, kl_rows(g, reference_logits, trainee_logits, tau));
  if (tau_squared) result = scalar_mul(g, result, tau * tau);
  return result;
}

Tensor huber(Graph& g, const Tensor& a, const Tensor& b, double delta) {
  if (delta <= 0.0) fail(ErrorKind::Value, "huber: delta must be > 0");
  // 0.5 * c * (2d - c) with c = clamp(d) equals the Huber loss on both branches.
  const Tensor d = sub(g, a, b);
  const Tensor c = clamp(g, d, -delta, delta);
  return scalar_mul(g, mul(g, c, sub(g, scalar_mul(g, d, 2.0), c)), 0.5);
}

Tensor psi_kernel(Graph& g, const Tensor& diff_nat, const Tensor& diff_adv) {
  if (diff_nat.shape != diff_adv.shape) {
    fail(ErrorKind::Shape, "psi: difference vectors " + shape_str(diff_nat.shape) + " vs " +
                               shape_str(diff_adv.shape));
  }
  Tensor e_nat = normalize(g, diff_nat);
  Tensor e_adv = normalize(g, diff_adv);
  if (diff_nat.rank() == 1) {
    return dot(g, e_nat, e_adv);
  }
  return row_sums(g, mul(g, e_nat, e_adv));
}

Tensor psi(Graph& g, const Tensor& pred_nat, const Tensor& pred_adv, std::size_t label) {
  if (pred_nat.rank() != 1 || pred_nat.shape != pred_adv.shape) {
    fail(ErrorKind::Shape, "psi: predictions must share a rank-1 shape");
  }
  const std::size_t c = pred_nat.shape[0];
  if (label >= c) {
    fail(ErrorKind::Value, "psi: label " + std::to_string(label) + " out of range [0," +
                               std::to_string(c) + ")");
  }
  std::vector<double> onehot(c, 0.0);
  onehot[label] = 1.0;
  const Tensor y = g.constant({c}, std::move(onehot));
  return psi_kernel(g, sub(g, pred_nat, y), sub(g, pred_adv, y));
}

Tensor trd_loss(Graph& g, const BatchOutputs& batch, double delta) {
  const Tensor& s_nat = require_block(batch.student_nat, "trd_loss", "S(x)");
  const Tensor& s_adv = require_block(batch.student_adv, "trd_loss", "S(x')");
  const Tensor& t_nat = require_block(batch.teacher_nat, "trd_loss", "T(x)");
  const Tensor& t_adv = require_block(batch.teacher_adv, "trd_loss", "T(x')");
  check_logits(s_nat, batch.labels, "trd_loss: S(x)");
  const std::size_t n = s_nat.shape[0], c = s_nat.shape[1];
  const Tensor y = g.constant({n, c}, onehot_rows(batch.labels, c));

  // Teacher psi from detached probabilities, via the same kernel.
  const Tensor pt_nat = g.constant(softmax_values(t_nat.detached(), 1.0));
  const Tensor pt_adv = g.constant(softmax_values(t_adv.detached(), 1.0));
  const Tensor psi_teacher = psi_rows(g, pt_nat, pt_adv, y);

  const Tensor ps_nat = softmax(g, s_nat, 1.0);
  const Tensor ps_adv = softmax(g, s_adv, 1.0);
  const Tensor psi_student = psi_rows(g, ps_nat, ps_adv, y);

  return mean(g, huber(g, psi_teacher, psi_student, delta));
}

Tensor outer_loss(Graph& g, const MethodSpec& spec, const BatchOutputs& batch) {
  spec.validate();
  const char* row = method_name(spec.method);
  switch (spec.method) {
    case Method::Sat: {
      const Tensor& s_adv = require_block(batch.student_adv, row, "S(x')");
      return cross_entropy(g, s_adv, batch.labels);
    }
    case Method::Trades: {
      const Tensor& s_nat = require_block(batch.student_nat, row, "S(x)");
      const Tensor& s_adv = require_block(batch.student_adv, row, "S(x')");
      const Tensor natural = cross_entropy(g, s_nat, batch.labels);
      const Tensor consistency = kl_div(g, s_nat, s_adv, 1.0);
      return add(g, natural, scalar_mul(g, consistency, spec.lambda));
    }
    case Method::Ard: {
      const Tensor& s_nat = require_block(batch.student_nat, row, "S(x)");
      const Tensor& s_adv = require_block(batch.student_adv, row, "S(x')");
      const Tensor& t_nat = require_block(batch.teacher_nat, row, "T(x)");
      const Tensor natural = cross_entropy(g, s_nat, batch.labels, spec.tau);
      const Tensor distill = kl_div(g, t_nat, s_adv, spec.tau, /*tau_squared=*/true);
      return add(g, scalar_mul(g, natural, 1.0 - spec.alpha), scalar_mul(g, distill, spec.alpha));
    }
    case Method::Iad: {
      const Tensor& s_nat = require_block(batch.student_nat, row, "S(x)");
      const Tensor& s_adv = require_block(batch.student_adv, row, "S(x')");
      const Tensor& t_nat = require_block(batch.teacher_nat, row, "T(x)");
      const Tensor& t_adv = require_block(batch.teacher_adv, row, "T(x')");
      check_logits(s_adv, batch.labels, "iad: S(x')");
      const std::size_t n = s_adv.shape[0];
      // Per-example weight: frozen teacher's probability of the true class on
      // x', raised to beta.
      const Tensor pt_adv = softmax_values(t_adv.detached(), 1.0);
      std::vector<double> w(n), w_inv(n);
      const std::size_t c = s_adv.shape[1];
      for (std::size_t i = 0; i < n; ++i) {
        if (batch.labels[i] >= c) fail(ErrorKind::Value, "iad: label out of range");
        w[i] = std::pow(pt_adv.data[i * c + batch.labels[i]], spec.beta);
        w_inv[i] = 1.0 - w[i];
      }
      const Tensor teacher_rows = kl_rows(g, t_nat, s_adv, spec.tau);
      const Tensor self_rows = kl_rows(g, s_nat, s_adv, spec.tau);
      const Tensor weighted =
          add(g, mul(g, g.constant({n, 1}, std::move(w)), teacher_rows),
              mul(g, g.constant({n, 1}, std::move(w_inv)), self_rows));
      return scalar_mul(g, mean(g, weighted), spec.tau * spec.tau);
    }
    case Method::Rslad: {
      const Tensor& s_nat = require_block(batch.student_nat, row, "S(x)");
      const Tensor& s_adv = require_block(batch.student_adv, row, "S(x')");
      const Tensor& t_nat = require_block(batch.teacher_nat, row, "T(x)");
      const Tensor natural = kl_div(g, t_nat, s_nat, 1.0);
      const Tensor robust = kl_div(g, t_nat, s_adv, 1.0);
      return add(g, scalar_mul(g, natural, 1.0 - spec.alpha), scalar_mul(g, robust, spec.alpha));
    }
    case Method::Mtard: {
      const Tensor& s_nat = require_block(batch.student_nat, row, "S(x)");
      const Tensor& s_adv = require_block(batch.student_adv, row, "S(x')");
      const Tensor& tn = require_block(batch.clean_teacher_nat, row, "T_nat(x)");
      const Tensor& ta = require_block(batch.teacher_adv, row, "T_adv(x')");
      const Tensor natural = kl_div(g, tn, s_nat, 1.0);
      const Tensor robust = kl_div(g, ta, s_adv, 1.0);
      return add(g, scalar_mul(g, natural, spec.alpha), scalar_mul(g, robust, 1.0 - spec.alpha));
    }
    case Method::Mmard: {
      const Tensor& s_adv = require_block(batch.student_adv, row, "S(x')");
      const Tensor& t_adv = require_block(batch.teacher_adv, row, "T(x')");
      const Tensor ard_term = kl_div(g, t_adv, s_adv, 1.0);
      if (spec.alpha == 0.0) return ard_term;  // exactly the agreement term
      const Tensor trd = trd_loss(g, batch, spec.huber_delta);
      return add(g, ard_term, scalar_mul(g, trd, spec.alpha));
    }
  }
  fail(ErrorKind::Value, "outer_loss: unknown method");
}

Tensor inner_objective(Graph& g, const MethodSpec& spec, const BatchOutputs& batch) {
  spec.validate();
  const Method inner = spec.inner_method();
  const char* row = method_name(inner);
  switch (inner) {
    case Method::Sat:
    case Method::Ard:
    case Method::Iad:
    case Method::Mtard: {
      const Tensor& s_adv = require_block(batch.student_adv, row, "S(x')");
      return cross_entropy(g, s_adv, batch.labels);
    }
    case Method::Trades: {
      const Tensor& s_nat = require_block(batch.student_nat, row, "S(x)");
      const Tensor& s_adv = require_block(batch.student_adv, row, "S(x')");
      return kl_div(g, s_nat, s_adv, 1.0);
    }
    case Method::Rslad: {
      const Tensor& s_adv = require_block(batch.student_adv, row, "S(x')");
      const Tensor& t_nat = require_block(batch.teacher_nat, row, "T(x)");
      return kl_div(g, t_nat, s_adv, 1.0);
    }
    case Method::Mmard: {
      const Tensor& s_adv = require_block(batch.student_adv, row, "S(x')");
      const Tensor& t_adv = require_block(batch.teacher_adv, row, "T(x')");
      return kl_div(g, t_adv, s_adv, 1.0);
    }
  }
  fail(ErrorKind::Value, "inner_objective: unknown method");
}

}  // namespace mmard
