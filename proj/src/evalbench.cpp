#include "mmard/evalbench.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mmard/errors.hpp"
#include "mmard/rng.hpp"

namespace mmard {

namespace {

constexpr std::uint64_t kSaltEvalAttack = 0x65766174ULL;  // "evat"

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::size_t argmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t c = logits.shape[1];
  std::size_t best = 0;
  for (std::size_t j = 1; j < c; ++j) {
    if (logits.data[row * c + j] > logits.data[row * c + best]) best = j;
  }
  return best;
}

// Short human tag for an architecture, used in report rows.
std::string arch_tag(const ArchSpec& arch) {
  std::ostringstream out;
  if (arch.family == ArchFamily::Mlp) {
    out << "mlp";
    for (std::size_t w : arch.hidden) out << "-" << w;
  } else {
    out << "cnn";
    for (const ConvLayerSpec& l : arch.conv) out << "-" << l.out_channels;
  }
  return out.str();
}

std::string sanitize(const std::string& s) {
  std::string out = s;
  for (char& c : out) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
  }
  return out;
}

AttackSpec battery_spec(const StudyConfig& config, AttackFamily family, EvalObjective objective) {
  AttackSpec spec = config.train.eval_attack;
  spec.family = family;
  spec.objective = AttackObjective::evaluation(objective);
  return spec;
}

TrainConfig run_config(const StudyConfig& config, const MethodSpec& method,
                       const std::string& run_tag) {
  TrainConfig cfg = config.train;
  cfg.method = method;
  if (!config.train.out_dir.empty()) {
    cfg.out_dir = config.train.out_dir + "/runs/" + sanitize(run_tag);
  }
  return cfg;
}

void fill_settings(EvalReport& report, const StudyConfig& config, const DatasetBundle& test) {
  const AttackSpec& e = config.train.eval_attack;
  report.attack_settings["attack.eps"] = format_double(e.epsilon);
  report.attack_settings["attack.step"] = format_double(e.step);
  report.attack_settings["attack.steps"] = std::to_string(e.steps);
  report.attack_settings["attack.rand_init"] = format_double(e.random_start);
  report.dataset_meta = test.metadata;
}

EvalRow average_row(const std::string& method, const std::vector<EvalRow>& rows) {
  EvalRow avg;
  avg.method = method;
  avg.teacher = "average";
  avg.student = rows.front().student;
  avg.seed = rows.front().seed;
  auto mean_of = [&](double EvalRow::* field) {
    double acc = 0.0;
    for (const EvalRow& r : rows) acc += r.*field;
    return acc / static_cast<double>(rows.size());
  };
  avg.clean = mean_of(&EvalRow::clean);
  avg.fgsm = mean_of(&EvalRow::fgsm);
  avg.pgd_s = mean_of(&EvalRow::pgd_s);
  avg.pgd_t = mean_of(&EvalRow::pgd_t);
  avg.cw = mean_of(&EvalRow::cw);
  return avg;
}

}  // namespace

double evaluate(const Model& model, const DatasetBundle& data,
                const std::optional<AttackSpec>& attack, std::uint64_t seed,
                std::size_t batch_size) {
  data.validate();
  const std::size_t n = data.count();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  std::size_t correct = 0;
  std::size_t batch_index = 0;
  for (std::size_t begin = 0; begin < n; begin += batch_size, ++batch_index) {
    const std::size_t end = std::min(begin + batch_size, n);
    auto [x, y] = gather_batch(data, order, begin, end);
    Tensor inputs = x;
    if (attack.has_value()) {
      AttackModels models;
      models.attacked = &model;
      inputs = run_attack(models, *attack, x, y, mix_seed(seed, kSaltEvalAttack, batch_index)).x_adv;
    }
    Graph g;
    const Tensor logits = forward_logits(g, model, g.constant(inputs));
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (argmax_row(logits, i) == y[i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

EvalRow evaluate_battery(const Model& model, const DatasetBundle& test, const StudyConfig& config) {
  EvalRow row;
  row.seed = config.train.seed;
  row.student = arch_tag(model.arch);
  row.clean = evaluate(model, test, std::nullopt, config.eval_seed, config.train.batch_size);
  row.pgd_t = evaluate(model, test, battery_spec(config, AttackFamily::Pgd, EvalObjective::TradesKl),
                       config.eval_seed, config.train.batch_size);
  if (config.full_battery) {
    row.fgsm = evaluate(model, test, battery_spec(config, AttackFamily::Fgsm, EvalObjective::Ce),
                        config.eval_seed, config.train.batch_size);
    row.pgd_s = evaluate(model, test, battery_spec(config, AttackFamily::Pgd, EvalObjective::Ce),
                         config.eval_seed, config.train.batch_size);
    row.cw = evaluate(model, test, battery_spec(config, AttackFamily::Cw, EvalObjective::CwMargin),
                      config.eval_seed, config.train.batch_size);
  }
  return row;
}

EvalReport saturation_study(const std::vector<std::string>& teacher_ckpts,
                            const std::vector<Method>& methods, const StudyConfig& config,
                            const DatasetBundle& train, const DatasetBundle& test) {
  if (teacher_ckpts.size() < 2) {
    fail(ErrorKind::Value, "saturation study: need at least 2 teacher checkpoints");
  }
  if (methods.empty()) fail(ErrorKind::Value, "saturation study: empty method list");

  std::vector<Model> teachers;
  teachers.reserve(teacher_ckpts.size());
  for (const std::string& path : teacher_ckpts) {
    Model t = load_checkpoint(path);
    t.frozen = true;
    teachers.push_back(std::move(t));
  }

  EvalReport report;
  fill_settings(report, config, test);
  for (Method method : methods) {
    std::vector<EvalRow> group;
    for (std::size_t ti = 0; ti < teachers.size(); ++ti) {
      MethodSpec spec = config.train.method;
      spec.method = method;
      spec.inner_override.reset();
      const std::string tag =
          std::string(method_name(method)) + "_t" + std::to_string(ti) + "_" + arch_tag(teachers[ti].arch);
      try {
        const TrainResult result =
            distill(run_config(config, spec, tag), train, test, teachers[ti]);
        EvalRow row = evaluate_battery(result.best, test, config);
        row.method = method_name(method);
        row.teacher = arch_tag(teachers[ti].arch);
        group.push_back(row);
      } catch (const Error& e) {
        fail(e.kind(), "saturation study: run (" + std::string(method_name(method)) + ", " +
                           teacher_ckpts[ti] + ") failed: " + e.what());
      }
    }
    report.rows.insert(report.rows.end(), group.begin(), group.end());
    report.rows.push_back(average_row(method_name(method), group));
  }
  return report;
}

EvalReport combination_study(const std::vector<Method>& outer_methods, const StudyConfig& config,
                             const DatasetBundle& train, const DatasetBundle& test,
                             const Model& teacher, const Model* clean_teacher) {
  if (outer_methods.empty()) fail(ErrorKind::Value, "combination study: empty method list");
  EvalReport report;
  fill_settings(report, config, test);
  const std::string teacher_tag = arch_tag(teacher.arch);

  for (Method method : outer_methods) {
    MethodSpec vanilla = config.train.method;
    vanilla.method = method;
    vanilla.inner_override.reset();
    MethodSpec combined = vanilla;
    combined.inner_override = Method::Mmard;

    const std::string name = method_name(method);
    const TrainResult vanilla_run =
        distill(run_config(config, vanilla, name + "_vanilla"), train, test, teacher, clean_teacher);
    EvalRow vanilla_row = evaluate_battery(vanilla_run.best, test, config);
    vanilla_row.method = name;
    vanilla_row.teacher = teacher_tag;

    const TrainResult combined_run = distill(run_config(config, combined, name + "_mmard_inner"),
                                             train, test, teacher, clean_teacher);
    EvalRow combined_row = evaluate_battery(combined_run.best, test, config);
    combined_row.method = name + "+mmard";
    combined_row.teacher = teacher_tag;

    EvalRow delta;
    delta.method = name + ":delta";
    delta.teacher = teacher_tag;
    delta.student = vanilla_row.student;
    delta.seed = vanilla_row.seed;
    delta.clean = combined_row.clean - vanilla_row.clean;
    delta.fgsm = combined_row.fgsm - vanilla_row.fgsm;
    delta.pgd_s = combined_row.pgd_s - vanilla_row.pgd_s;
    delta.pgd_t = combined_row.pgd_t - vanilla_row.pgd_t;
    delta.cw = combined_row.cw - vanilla_row.cw;

    report.rows.push_back(vanilla_row);
    report.rows.push_back(combined_row);
    report.rows.push_back(delta);
  }
  return report;
}

EvalReport alpha_sweep(const std::vector<double>& alphas, const StudyConfig& config,
                       const DatasetBundle& train, const DatasetBundle& test,
                       const Model& teacher) {
  if (alphas.empty()) fail(ErrorKind::Value, "alpha sweep: empty alpha list");
  for (double a : alphas) {
    if (a < 0.0) fail(ErrorKind::Value, "alpha sweep: alpha must be >= 0");
  }
  EvalReport report;
  fill_settings(report, config, test);
  for (double alpha : alphas) {
    MethodSpec spec = config.train.method;
    spec.method = Method::Mmard;
    spec.inner_override.reset();
    spec.alpha = alpha;
    char tag[64];
    std::snprintf(tag, sizeof(tag), "alpha_%g", alpha);
    const TrainResult result = distill(run_config(config, spec, tag), train, test, teacher);
    EvalRow row = evaluate_battery(result.best, test, config);
    std::snprintf(tag, sizeof(tag), "mmard:alpha=%g", alpha);
    row.method = tag;
    row.teacher = arch_tag(teacher.arch);
    report.rows.push_back(row);
  }
  return report;
}

namespace {

void write_report_svg(const EvalReport& report, const std::string& path) {
  const std::size_t rows = report.rows.size();
  const double group_w = 52.0, bar_w = 20.0;
  const double left = 54.0, top = 24.0, plot_h = 220.0, bottom = 96.0;
  const double width = left + group_w * static_cast<double>(rows) + 30.0;
  const double height = top + plot_h + bottom;

  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open svg for writing: " + path);
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  out << "  <rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double frac = static_cast<double>(i) / 4.0;
    const double y = top + plot_h * (1.0 - frac);
    out << "  <line x1=\"" << left << "\" y1=\"" << y << "\" x2=\"" << width - 20.0 << "\" y2=\""
        << y << "\" stroke=\"#dddddd\"/>\n";
    out << "  <text x=\"" << left - 8.0 << "\" y=\"" << y + 4.0
        << "\" font-size=\"11\" text-anchor=\"end\" font-family=\"sans-serif\">" << frac
        << "</text>\n";
  }
  for (std::size_t i = 0; i < rows; ++i) {
    const EvalRow& row = report.rows[i];
    const double x0 = left + group_w * static_cast<double>(i) + 6.0;
    auto bar = [&](double value, double offset, const char* color) {
      const double clipped = std::min(std::max(value, 0.0), 1.0);
      const double h = plot_h * clipped;
      out << "    <rect x=\"" << x0 + offset << "\" y=\"" << top + plot_h - h << "\" width=\""
          << bar_w << "\" height=\"" << h << "\" fill=\"" << color << "\"/>\n";
    };
    out << "  <g>\n";
    bar(row.clean, 0.0, "#4c78a8");
    bar(row.pgd_t, bar_w + 2.0, "#f58518");
    out << "    <text x=\"" << x0 + bar_w << "\" y=\"" << top + plot_h + 12.0
        << "\" font-size=\"10\" font-family=\"sans-serif\" text-anchor=\"start\" transform=\"rotate(45 "
        << x0 + bar_w << " " << top + plot_h + 12.0 << ")\">" << row.method << "/" << row.teacher
        << "</text>\n";
    out << "  </g>\n";
  }
  out << "  <rect x=\"" << left << "\" y=\"" << height - 24.0
      << "\" width=\"12\" height=\"12\" fill=\"#4c78a8\"/>\n";
  out << "  <text x=\"" << left + 16.0 << "\" y=\"" << height - 14.0
      << "\" font-size=\"11\" font-family=\"sans-serif\">clean</text>\n";
  out << "  <rect x=\"" << left + 70.0 << "\" y=\"" << height - 24.0
      << "\" width=\"12\" height=\"12\" fill=\"#f58518\"/>\n";
  out << "  <text x=\"" << left + 86.0 << "\" y=\"" << height - 14.0
      << "\" font-size=\"11\" font-family=\"sans-serif\">pgd_t</text>\n";
  out << "</svg>\n";
  if (!out) fail(ErrorKind::Io, "write failed: " + path);
}

}  // namespace

void write_report(const EvalReport& report, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const std::string csv_path = dir + "/report.csv";
  std::ofstream out(csv_path, std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open report for writing: " + csv_path);
  for (const auto& [key, value] : report.attack_settings) out << "# " << key << "=" << value << "\n";
  for (const auto& [key, value] : report.dataset_meta) out << "# data." << key << "=" << value << "\n";
  out << "method,teacher,student,seed,clean,fgsm,pgd_s,pgd_t,cw\n";
  for (const EvalRow& row : report.rows) {
    out << row.method << "," << row.teacher << "," << row.student << "," << row.seed << ","
        << format_double(row.clean) << "," << format_double(row.fgsm) << ","
        << format_double(row.pgd_s) << "," << format_double(row.pgd_t) << ","
        << format_double(row.cw) << "\n";
  }
  if (!out) fail(ErrorKind::Io, "write failed: " + csv_path);
  write_report_svg(report, dir + "/report.svg");
}

EvalReport read_report(const std::string& csv_path) {
  std::ifstream in(csv_path);
  if (!in) fail(ErrorKind::Io, "cannot open report: " + csv_path);
  EvalReport report;
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::string body = line.substr(1);
      while (!body.empty() && body.front() == ' ') body.erase(body.begin());
      const auto eq = body.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = body.substr(0, eq);
      const std::string value = body.substr(eq + 1);
      if (key.rfind("data.", 0) == 0) {
        report.dataset_meta[key.substr(5)] = value;
      } else {
        report.attack_settings[key] = value;
      }
      continue;
    }
    if (!header_seen) {
      if (line != "method,teacher,student,seed,clean,fgsm,pgd_s,pgd_t,cw") {
        fail(ErrorKind::Format, "not a report: " + csv_path);
      }
      header_seen = true;
      continue;
    }
    std::istringstream fields(line);
    std::string field;
    auto next = [&]() {
      if (!std::getline(fields, field, ',')) fail(ErrorKind::Format, "bad report row");
      return field;
    };
    EvalRow row;
    row.method = next();
    row.teacher = next();
    row.student = next();
    row.seed = std::stoull(next());
    row.clean = std::stod(next());
    row.fgsm = std::stod(next());
    row.pgd_s = std::stod(next());
    row.pgd_t = std::stod(next());
    row.cw = std::stod(next());
    report.rows.push_back(row);
  }
  if (!header_seen) fail(ErrorKind::Format, "not a report: " + csv_path);
  return report;
}

}  // namespace mmard
