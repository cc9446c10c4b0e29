#include "mmard/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mmard/errors.hpp"
#include "mmard/evalbench.hpp"
#include "mmard/rng.hpp"

namespace mmard {

namespace {

constexpr std::uint64_t kSaltInit = 0x696e6974ULL;     // "init"
constexpr std::uint64_t kSaltShuffle = 0x73687566ULL;  // "shuf"
constexpr std::uint64_t kSaltAttack = 0x61747461ULL;   // "atta"
constexpr std::uint64_t kSaltEval = 0x6576616cULL;     // "eval"

double step_lr(std::size_t epoch, const std::vector<std::size_t>& milestones, double lr0,
               double factor) {
  double lr = lr0;
  for (std::size_t m : milestones) {
    if (epoch >= m) lr *= factor;
  }
  return lr;
}

std::vector<std::size_t> default_milestones(std::size_t epochs) {
  return {(3 * epochs) / 4, (9 * epochs) / 10};
}

double schedule_lr(const TrainConfig& config, std::size_t epoch) {
  if (config.schedule == LrSchedule::Cosine) return cosine_lr(epoch, config.epochs, config.lr0);
  const std::vector<std::size_t> milestones =
      config.step_milestones.empty() ? default_milestones(config.epochs) : config.step_milestones;
  return step_lr(epoch, milestones, config.lr0, config.step_factor);
}

struct BestTracker {
  double pgdt{-1.0};
  std::size_t epoch{0};
  Model model;

  void offer(double acc, std::size_t e, const Model& m) {
    if (acc > pgdt) {
      pgdt = acc;
      epoch = e;
      model = m;
    }
  }
};

// Shared epoch loop. `step_batch` consumes one (x, y) mini-batch and returns
// (outer loss, inner objective) for the record.
template <typename StepFn>
TrainResult run_epochs(const TrainConfig& config, const DatasetBundle& train,
                       const DatasetBundle& test, Model student, StepFn step_batch) {
  const std::size_t n = train.count();
  std::vector<std::size_t> order(n);
  RunRecord record;
  BestTracker best;

  AttackSpec pgdt_spec = config.eval_attack;
  pgdt_spec.family = AttackFamily::Pgd;
  pgdt_spec.objective = AttackObjective::evaluation(EvalObjective::TradesKl);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = schedule_lr(config, epoch);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(mix_seed(config.seed, kSaltShuffle, epoch));
    shuffle(order, shuffle_rng);

    double outer_sum = 0.0, inner_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < n; begin += config.batch_size, ++batches) {
      const std::size_t end = std::min(begin + config.batch_size, n);
      auto [x, y] = gather_batch(train, order, begin, end);
      const std::uint64_t attack_seed = mix_seed(config.seed, kSaltAttack, epoch * 1000003ULL + batches);
      const auto [outer, inner] = step_batch(student, x, y, lr, attack_seed);
      outer_sum += outer;
      inner_sum += inner;
    }

    EpochRow row;
    row.epoch = epoch;
    row.lr = lr;
    row.outer_loss = outer_sum / static_cast<double>(batches);
    row.inner_obj = inner_sum / static_cast<double>(batches);
    if (epoch % config.eval_every == 0 || epoch + 1 == config.epochs) {
      row.clean_acc = evaluate(student, test, std::nullopt, mix_seed(config.seed, kSaltEval, epoch),
                               config.batch_size);
      row.pgdt_acc = evaluate(student, test, pgdt_spec, mix_seed(config.seed, kSaltEval, epoch),
                              config.batch_size);
      best.offer(row.pgdt_acc, epoch, student);
    }
    record.rows.push_back(row);
  }

  record.best_epoch = select_best(record);
  TrainResult result{best.model, student, std::move(record)};
  if (!config.out_dir.empty()) {
    std::filesystem::create_directories(config.out_dir);
    write_run_record(result.record, config.out_dir + "/run.csv");
    save_checkpoint(result.best, config.out_dir + "/best.ckpt");
    save_checkpoint(result.last, config.out_dir + "/last.ckpt");
  }
  return result;
}

// One SGD step on `loss_root`; gradients are read off the attached parameter
// leaves in declaration order.
void apply_sgd_step(Model& student, const AttachedModel& attached, Graph& g, const Tensor& loss_root,
                    std::vector<Tensor>& velocity, double lr, const TrainConfig& config) {
  const GradientMap grads = g.backward(loss_root);
  std::vector<Tensor> ordered;
  ordered.reserve(student.params.size());
  for (const Tensor& leaf : attached.params) ordered.push_back(grads.at(leaf.node));
  sgd_update(student.params, ordered, velocity, lr, config.momentum, config.weight_decay);
}

}  // namespace

TeacherMode teacher_mode_from_string(const std::string& name) {
  if (name == "natural") return TeacherMode::Natural;
  if (name == "sat") return TeacherMode::Sat;
  if (name == "trades") return TeacherMode::Trades;
  fail(ErrorKind::Value, "unknown teacher mode '" + name + "'");
}

const char* teacher_mode_name(TeacherMode mode) {
  switch (mode) {
    case TeacherMode::Natural: return "natural";
    case TeacherMode::Sat: return "sat";
    case TeacherMode::Trades: return "trades";
  }
  return "?";
}

void TrainConfig::validate() const {
  if (epochs < 1) fail(ErrorKind::Value, "train: epochs must be >= 1");
  if (batch_size < 1) fail(ErrorKind::Value, "train: batch size must be >= 1");
  if (lr0 <= 0.0) fail(ErrorKind::Value, "train: lr must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) fail(ErrorKind::Value, "train: momentum must be in [0,1)");
  if (weight_decay < 0.0) fail(ErrorKind::Value, "train: weight decay must be >= 0");
  if (eval_every < 1) fail(ErrorKind::Value, "train: eval_every must be >= 1");
  method.validate();
}

double cosine_lr(std::size_t epoch, std::size_t total_epochs, double lr0) {
  if (epoch >= total_epochs) {
    fail(ErrorKind::Value, "cosine_lr: epoch " + std::to_string(epoch) + " out of range [0," +
                               std::to_string(total_epochs) + ")");
  }
  return lr0 * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(epoch) /
                                     static_cast<double>(total_epochs)));
}

void sgd_update(std::vector<Param>& params, const std::vector<Tensor>& grads,
                std::vector<Tensor>& velocity, double lr, double momentum, double weight_decay) {
  if (params.size() != grads.size()) fail(ErrorKind::Shape, "sgd: gradient list size mismatch");
  if (velocity.empty()) {
    velocity.reserve(params.size());
    for (const Param& p : params) velocity.push_back(Tensor::zeros(p.value.shape));
  }
  if (velocity.size() != params.size()) fail(ErrorKind::Shape, "sgd: velocity list size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = params[i];
    if (grads[i].shape != p.value.shape || velocity[i].shape != p.value.shape) {
      fail(ErrorKind::Shape, "sgd: shape mismatch for parameter " + p.name);
    }
    for (std::size_t j = 0; j < p.value.data.size(); ++j) {
      const double g = grads[i].data[j] + weight_decay * p.value.data[j];
      velocity[i].data[j] = momentum * velocity[i].data[j] + g;
      p.value.data[j] -= lr * velocity[i].data[j];
      if (!std::isfinite(p.value.data[j])) fail(ErrorKind::Numeric, "sgd: non-finite parameter");
    }
  }
}

std::size_t select_best(const RunRecord& record) {
  std::size_t best = record.rows.size();
  double best_acc = -1.0;
  for (const EpochRow& row : record.rows) {
    if (row.pgdt_acc < 0.0) continue;  // not evaluated
    if (row.pgdt_acc > best_acc) {
      best_acc = row.pgdt_acc;
      best = row.epoch;
    }
  }
  if (best == record.rows.size()) fail(ErrorKind::Value, "select_best: no evaluated epochs");
  return best;
}

TrainResult train_teacher(const TrainConfig& config, const DatasetBundle& train,
                          const DatasetBundle& test) {
  config.validate();
  train.validate();
  if (config.arch.classes != train.classes) {
    fail(ErrorKind::Shape, "train: arch classes do not match dataset");
  }
  Model student = build_model(config.arch, mix_seed(config.seed, kSaltInit));
  std::vector<Tensor> velocity;

  const TeacherMode mode = config.teacher_mode;
  MethodSpec row;
  row.method = mode == TeacherMode::Trades ? Method::Trades : Method::Sat;
  row.lambda = config.method.lambda;
  AttackSpec attack = config.train_attack;
  attack.family = AttackFamily::Pgd;
  attack.objective = AttackObjective::from_method(row);

  auto step_batch = [&](Model& model, const Tensor& x, const std::vector<std::size_t>& y, double lr,
                        std::uint64_t attack_seed) {
    Graph g;
    const AttachedModel attached = attach_model(g, model, /*trainable=*/true);
    BatchOutputs batch;
    batch.labels = y;
    double inner_value = 0.0;

    Tensor loss;
    if (mode == TeacherMode::Natural) {
      loss = cross_entropy(g, forward_logits(g, attached, g.constant(x)), y);
    } else {
      AttackModels targets;
      targets.attacked = &model;
      const AdversarialBatch adv = pgd_attack(targets, attack, x, y, attack_seed);
      inner_value = adv.objective_trace.back();
      batch.student_nat = forward_logits(g, attached, g.constant(x));
      batch.student_adv = forward_logits(g, attached, g.constant(adv.x_adv));
      loss = outer_loss(g, row, batch);
    }
    const double outer_value = loss.item();
    apply_sgd_step(model, attached, g, loss, velocity, lr, config);
    return std::pair<double, double>(outer_value, inner_value);
  };

  return run_epochs(config, train, test, std::move(student), step_batch);
}

TrainResult distill(const TrainConfig& config, const DatasetBundle& train,
                    const DatasetBundle& test, const Model& teacher, const Model* clean_teacher) {
  config.validate();
  train.validate();
  if (config.method.method == Method::Mtard && clean_teacher == nullptr) {
    fail(ErrorKind::Value, "distill: mtard requires a clean teacher");
  }
  if (config.arch.classes != train.classes || teacher.arch.classes != train.classes) {
    fail(ErrorKind::Shape, "distill: class counts disagree between arch, teacher and dataset");
  }
  if (teacher.arch.input_shape != config.arch.input_shape) {
    fail(ErrorKind::Shape, "distill: teacher and student input shapes disagree");
  }

  Model student = build_model(config.arch, mix_seed(config.seed, kSaltInit));
  std::vector<Tensor> velocity;

  AttackSpec attack = config.train_attack;
  attack.family = AttackFamily::Pgd;
  attack.objective = AttackObjective::from_method(config.method);

  auto step_batch = [&](Model& model, const Tensor& x, const std::vector<std::size_t>& y, double lr,
                        std::uint64_t attack_seed) {
    AttackModels targets;
    targets.attacked = &model;
    targets.teacher = &teacher;
    targets.teacher_nat = clean_teacher;
    const AdversarialBatch adv = pgd_attack(targets, attack, x, y, attack_seed);

    // Outer step: x' enters as a constant, so no gradient flows through the
    // attack construction.
    Graph g;
    const AttachedModel attached = attach_model(g, model, /*trainable=*/true);
    const Tensor xc = g.constant(x);
    const Tensor xa = g.constant(adv.x_adv);
    BatchOutputs batch;
    batch.labels = y;
    batch.student_nat = forward_logits(g, attached, xc);
    batch.student_adv = forward_logits(g, attached, xa);
    batch.teacher_nat = forward_logits(g, attach_model(g, teacher, /*trainable=*/false), xc);
    batch.teacher_adv = forward_logits(g, attach_model(g, teacher, /*trainable=*/false), xa);
    if (clean_teacher != nullptr) {
      batch.clean_teacher_nat =
          forward_logits(g, attach_model(g, *clean_teacher, /*trainable=*/false), xc);
    }
    const Tensor loss = outer_loss(g, config.method, batch);
    const double outer_value = loss.item();
    apply_sgd_step(model, attached, g, loss, velocity, lr, config);
    return std::pair<double, double>(outer_value, adv.objective_trace.back());
  };

  return run_epochs(config, train, test, std::move(student), step_batch);
}

void write_run_record(const RunRecord& record, const std::string& csv_path) {
  std::ofstream out(csv_path, std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open run record for writing: " + csv_path);
  out << "epoch,lr,outer_loss,inner_obj,clean_acc,pgdt_acc\n";
  char buf[256];
  for (const EpochRow& row : record.rows) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", row.epoch, row.lr,
                  row.outer_loss, row.inner_obj, row.clean_acc, row.pgdt_acc);
    out << buf;
  }
  if (!out) fail(ErrorKind::Io, "write failed: " + csv_path);
}

RunRecord read_run_record(const std::string& csv_path) {
  std::ifstream in(csv_path);
  if (!in) fail(ErrorKind::Io, "cannot open run record: " + csv_path);
  std::string line;
  if (!std::getline(in, line) || line != "epoch,lr,outer_loss,inner_obj,clean_acc,pgdt_acc") {
    fail(ErrorKind::Format, "not a run record: " + csv_path);
  }
  RunRecord record;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EpochRow row;
    std::istringstream fields(line);
    std::string field;
    auto next = [&]() {
      if (!std::getline(fields, field, ',')) fail(ErrorKind::Format, "bad run record row");
      return field;
    };
    row.epoch = std::stoul(next());
    row.lr = std::stod(next());
    row.outer_loss = std::stod(next());
    row.inner_obj = std::stod(next());
    row.clean_acc = std::stod(next());
    row.pgdt_acc = std::stod(next());
    record.rows.push_back(row);
  }
  record.best_epoch = select_best(record);
  return record;
}

}  // namespace mmard
