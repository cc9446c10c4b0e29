#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmard/attacks.hpp"
#include "mmard/datasets.hpp"
#include "mmard/losses.hpp"
#include "mmard/models.hpp"

namespace mmard {

enum class TeacherMode { Natural, Sat, Trades };
TeacherMode teacher_mode_from_string(const std::string& name);
const char* teacher_mode_name(TeacherMode mode);

enum class LrSchedule { Cosine, Step };

struct TrainConfig {
  MethodSpec method;                          // distillation row
  TeacherMode teacher_mode{TeacherMode::Natural};
  ArchSpec arch;                              // model being trained
  std::size_t epochs{60};
  std::size_t batch_size{64};
  double lr0{0.1};
  double momentum{0.9};
  double weight_decay{2e-4};
  LrSchedule schedule{LrSchedule::Cosine};
  double step_factor{0.1};
  std::vector<std::size_t> step_milestones;   // empty = 75% and 90% of epochs
  AttackSpec train_attack;                    // inner maximization settings
  AttackSpec eval_attack;                     // checkpoint-selection attack
  std::size_t eval_every{1};
  std::uint64_t seed{1};
  std::string out_dir;                        // empty = no files written

  void validate() const;
};

struct EpochRow {
  std::size_t epoch{0};
  double lr{0.0};
  double outer_loss{0.0};
  double inner_obj{0.0};
  double clean_acc{-1.0};  // -1 = not evaluated this epoch
  double pgdt_acc{-1.0};
};

struct RunRecord {
  std::vector<EpochRow> rows;
  std::size_t best_epoch{0};
};

struct TrainResult {
  Model best;
  Model last;
  RunRecord record;
};

// lr0 * 0.5 * (1 + cos(pi * epoch / total)).
double cosine_lr(std::size_t epoch, std::size_t total_epochs, double lr0);

// Classical momentum with weight decay folded into the gradient:
// g <- grad + wd*param; v <- momentum*v + g; param <- param - lr*v.
void sgd_update(std::vector<Param>& params, const std::vector<Tensor>& grads,
                std::vector<Tensor>& velocity, double lr, double momentum, double weight_decay);

// Index of the evaluated epoch with the highest PGD_T accuracy; ties go to the
// earliest epoch.
std::size_t select_best(const RunRecord& record);

TrainResult train_teacher(const TrainConfig& config, const DatasetBundle& train,
                          const DatasetBundle& test);

// Algorithm: per batch, synthesize x' by PGD on the method's inner objective,
// then take one SGD step on the outer loss with x' held constant.
TrainResult distill(const TrainConfig& config, const DatasetBundle& train,
                    const DatasetBundle& test, const Model& teacher,
                    const Model* clean_teacher = nullptr);

void write_run_record(const RunRecord& record, const std::string& csv_path);
RunRecord read_run_record(const std::string& csv_path);

}  // namespace mmard
