// Command-line front end: teacher training, candidate gridding, the
// one-trial schedule, the enumeration schedule, fixed baselines, ledger
// reports, and chart re-emission from csv files.

#include "minidisc/bench.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace {

using namespace minidisc;

struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  std::optional<uint64_t> seed;
  std::optional<double> lambda;
  std::optional<size_t> eta;
  std::optional<size_t> grid_n;
  std::optional<std::string> selection;
  bool residual = false;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool needs_config) {
  auto* c = cmd->add_option("--config", opts.config_path, "experiment config (json)");
  if (needs_config) c->required();
  cmd->add_option("--out", opts.out_dir, "output directory (overrides config)");
  cmd->add_option("--seed", opts.seed, "run a single seed (overrides config seeds)");
  cmd->add_option("--lambda", opts.lambda, "tradeoff weight, in [0,1]");
  cmd->add_option("--eta", opts.eta, "candidates trained per sandwich step");
  cmd->add_option("--grid", opts.grid_n, "number of grid scales");
  cmd->add_option("--selection", opts.selection, "tradeoff used for selection: lambda|nd");
  cmd->add_flag("--residual", opts.residual, "follow up with residual distillation");
}

ExperimentConfig make_config(const CommonOpts& opts, std::vector<std::string> methods) {
  ExperimentConfig cfg = load_config(opts.config_path);
  if (!opts.out_dir.empty()) cfg.out_dir = opts.out_dir;
  if (opts.seed) cfg.seeds = {*opts.seed};
  if (opts.lambda) cfg.plan.lambda = *opts.lambda;
  if (opts.eta) cfg.distill.eta = *opts.eta;
  if (opts.grid_n) cfg.plan.n = *opts.grid_n;
  if (opts.selection) {
    if (*opts.selection == "lambda")
      cfg.plan.selection = SelectionMode::Lambda;
    else if (*opts.selection == "nd")
      cfg.plan.selection = SelectionMode::NegativeDerivative;
    else
      throw std::invalid_argument("--selection expects lambda|nd");
  }
  if (opts.residual) cfg.plan.residual = true;
  if (!methods.empty()) cfg.methods = std::move(methods);
  cfg.validate();
  return cfg;
}

int run_methods(const CommonOpts& opts, std::vector<std::string> methods) {
  ExperimentConfig cfg = make_config(opts, std::move(methods));
  auto summary = run_experiment(cfg);
  std::cout << "wrote " << summary.rows.size() << " result rows to " << cfg.out_dir
            << "/results.csv\n";
  for (const auto& row : summary.rows) {
    std::cout << "  " << row.task << " seed=" << row.seed << " " << row.method
              << " metric=" << csv_num(row.metric);
    if (row.ta_scale >= 0) std::cout << " ta_scale=" << csv_num(row.ta_scale);
    std::cout << "\n";
  }
  if (!summary.failures.empty()) {
    std::cerr << summary.failures.size() << " run(s) failed; see " << cfg.out_dir
              << "/failures.log\n";
    for (const auto& f : summary.failures) std::cerr << "  " << f << "\n";
  }
  return summary.failures.empty() ? 0 : 2;
}

int cmd_report(const std::string& dir) {
  namespace fs = std::filesystem;
  std::vector<std::pair<std::string, TrialLedger>> ledgers;
  for (const auto& entry : fs::directory_iterator(dir)) {
    auto name = entry.path().filename().string();
    if (name.rfind("ledger_", 0) != 0 || entry.path().extension() != ".json") continue;
    std::string method = name.substr(7);
    method = method.substr(0, method.find('_'));
    std::ifstream in(entry.path());
    nlohmann::json j;
    in >> j;
    ledgers.push_back({method, TrialLedger::from_json(j)});
  }
  if (ledgers.empty()) {
    std::cerr << "no ledger_*.json files under " << dir << "\n";
    return 1;
  }
  std::sort(ledgers.begin(), ledgers.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  auto rows = report_ledger(ledgers);
  std::cout << format_ledger_report(rows);
  std::ofstream out(fs::path(dir) / "report.csv", std::ios::trunc);
  out << "method,steps,trials,steps_vs_kd\n";
  for (const auto& r : rows)
    out << r.method << "," << r.steps << "," << r.trials << "," << csv_num(r.step_ratio_vs_kd)
        << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale teacher-assistant scheduling toolkit"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::string report_dir, plot_dir;

  auto* train = app.add_subcommand("train-teacher", "train and checkpoint teachers");
  add_common(train, opts, true);
  auto* grid = app.add_subcommand("grid", "emit candidate grid, importance table, structures");
  add_common(grid, opts, true);
  auto* mini = app.add_subcommand("minidisc", "one-trial assistant schedule");
  add_common(mini, opts, true);
  auto* maxi = app.add_subcommand("maxidisc", "enumerate every assistant scale");
  add_common(maxi, opts, true);
  auto* base = app.add_subcommand("baselines", "direct kd, fixed assistant, finetune-only");
  add_common(base, opts, true);
  auto* report = app.add_subcommand("report", "aggregate ledgers into a step/trial table");
  report->add_option("--out", report_dir, "experiment output directory")->required();
  auto* plot = app.add_subcommand("plot", "re-emit svg charts from csv files");
  plot->add_option("--out", plot_dir, "experiment output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return run_methods(opts, {});
    if (grid->parsed()) return run_methods(opts, {"grid"});
    if (mini->parsed()) return run_methods(opts, {"minidisc"});
    if (maxi->parsed()) return run_methods(opts, {"maxidisc"});
    if (base->parsed()) return run_methods(opts, {"kd", "fixed_ta", "ft"});
    if (report->parsed()) return cmd_report(report_dir);
    if (plot->parsed()) {
      plot_all(plot_dir);
      std::cout << "charts re-emitted under " << plot_dir << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
