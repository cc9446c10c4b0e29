#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mmard/trainer.hpp"

namespace mmard {

// Accuracy of `model` on `data`, measured on natural inputs when `attack` is
// absent and on attacked inputs otherwise. Argmax ties go to the lowest class
// index. Deterministic given the seed.
double evaluate(const Model& model, const DatasetBundle& data,
                const std::optional<AttackSpec>& attack, std::uint64_t seed,
                std::size_t batch_size = 64);

// One table row; -1 marks a column that was not measured.
struct EvalRow {
  std::string method;
  std::string teacher;
  std::string student;
  std::uint64_t seed{0};
  double clean{-1.0};
  double fgsm{-1.0};
  double pgd_s{-1.0};
  double pgd_t{-1.0};
  double cw{-1.0};
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::map<std::string, std::string> attack_settings;
  std::map<std::string, std::string> dataset_meta;
};

struct StudyConfig {
  TrainConfig train;         // per-run template; method/alpha set per run
  std::uint64_t eval_seed{7};
  bool full_battery{true};   // false = clean + pgd_t only
};

// Attack battery for one model: clean, fgsm, pgd_s (CE), pgd_t (TRADES KL),
// cw margin, all derived from the eval-strength spec in `config.train`.
EvalRow evaluate_battery(const Model& model, const DatasetBundle& test, const StudyConfig& config);

// Distillation grid method x teacher checkpoint, with per-method average rows.
EvalReport saturation_study(const std::vector<std::string>& teacher_ckpts,
                            const std::vector<Method>& methods, const StudyConfig& config,
                            const DatasetBundle& train, const DatasetBundle& test);

// Vanilla vs inner_override=mmard runs per outer method, plus delta rows.
EvalReport combination_study(const std::vector<Method>& outer_methods, const StudyConfig& config,
                             const DatasetBundle& train, const DatasetBundle& test,
                             const Model& teacher, const Model* clean_teacher = nullptr);

// One distillation run per trade-off value.
EvalReport alpha_sweep(const std::vector<double>& alphas, const StudyConfig& config,
                       const DatasetBundle& train, const DatasetBundle& test, const Model& teacher);

// report.csv (source of truth) plus report.svg (grouped clean/pgd_t bars).
void write_report(const EvalReport& report, const std::string& dir);
EvalReport read_report(const std::string& csv_path);

}  // namespace mmard
