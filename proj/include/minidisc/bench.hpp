#pragma once

// Synthetic task suite, experiment configuration, the experiment runner, and
// report/plot emission. Three tasks of graded difficulty stand in for a real
// benchmark suite; every label is computable by a closed-form rule so a
// capacity-rich teacher can approach ceiling accuracy.

#include "minidisc/checkpoint.hpp"
#include "minidisc/data.hpp"
#include "minidisc/scheduler.hpp"
#include "minidisc/svg.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace minidisc {

// ---------------------------------------------------------------------------
// tasks
// ---------------------------------------------------------------------------

enum class TaskKind { ParityOfMarkedTokens, MajorityClass, PairSimilarity };

inline const char* task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::ParityOfMarkedTokens: return "parity";
    case TaskKind::MajorityClass: return "majority";
    case TaskKind::PairSimilarity: return "pair";
  }
  return "?";
}

inline TaskKind task_kind_from_name(const std::string& name) {
  if (name == "parity") return TaskKind::ParityOfMarkedTokens;
  if (name == "majority") return TaskKind::MajorityClass;
  if (name == "pair") return TaskKind::PairSimilarity;
  detail::fail("unknown task kind '" + name + "' (expected parity|majority|pair)");
}

struct TaskSpec {
  TaskKind kind = TaskKind::MajorityClass;
  size_t vocab = 64;
  size_t length = 32;
  size_t n_classes = 2;
  size_t train_size = 2048;
  size_t dev_size = 512;
  uint64_t seed = 0;

  void validate() const {
    detail::require(vocab >= 4, "TaskSpec: vocab must be >= 4");
    detail::require(length >= 8 && length % 2 == 0, "TaskSpec: length must be even and >= 8");
    detail::require(n_classes == 2, "TaskSpec: tasks are binary");
    detail::require(train_size >= 2 && dev_size >= 2, "TaskSpec: splits too small");
  }
};

// The ground-truth rule; generation must agree with it example by example.
inline int32_t closed_form_label(TaskKind kind, const std::vector<int32_t>& ids) {
  switch (kind) {
    case TaskKind::ParityOfMarkedTokens: {
      int c = 0;
      for (int32_t t : ids) c += (t == 1) ? 1 : 0;
      return c % 2;
    }
    case TaskKind::MajorityClass: {
      int a = 0, b = 0;
      for (int32_t t : ids) {
        a += (t == 1) ? 1 : 0;
        b += (t == 2) ? 1 : 0;
      }
      return a > b ? 1 : 0;
    }
    case TaskKind::PairSimilarity: {
      size_t half = ids.size() / 2;
      std::vector<int32_t> u(ids.begin(), ids.begin() + half);
      std::vector<int32_t> v(ids.begin() + half, ids.end());
      std::sort(u.begin(), u.end());
      std::sort(v.begin(), v.end());
      return u == v ? 1 : 0;
    }
  }
  return 0;
}

namespace detail {

// Tokens used by the matching task are drawn from a small alphabet so the
// model can count them; fillers elsewhere span the full vocabulary.
constexpr size_t kPairAlphabet = 8;

inline Example generate_example(const TaskSpec& spec, int32_t want_label, Rng& rng) {
  Example e;
  e.ids.assign(spec.length, 0);
  switch (spec.kind) {
    case TaskKind::ParityOfMarkedTokens: {
      // marked token id 1; count stays small so parity is learnable
      int count = int(2 * rng.below(4)) + want_label;  // {0,2,4,6} (+1 when odd)
      for (auto& t : e.ids) t = int32_t(2 + rng.below(spec.vocab - 2));
      auto pos = rng.sample_without_replacement(spec.length, size_t(count));
      for (size_t p : pos) e.ids[p] = 1;
      break;
    }
    case TaskKind::MajorityClass: {
      int base = int(rng.below(spec.length / 4));
      int margin = 1 + int(rng.below(3));
      int a = want_label ? base + margin : base;
      int b = want_label ? base : base + margin;
      for (auto& t : e.ids) t = int32_t(3 + rng.below(spec.vocab - 3));
      auto pos = rng.sample_without_replacement(spec.length, size_t(a + b));
      for (int i = 0; i < a; ++i) e.ids[pos[size_t(i)]] = 1;
      for (int i = 0; i < b; ++i) e.ids[pos[size_t(a + i)]] = 2;
      break;
    }
    case TaskKind::PairSimilarity: {
      size_t half = spec.length / 2;
      std::vector<int32_t> u(half);
      for (auto& t : u) t = int32_t(1 + rng.below(kPairAlphabet));
      std::vector<int32_t> v = u;
      rng.shuffle(v);
      if (!want_label) {
        // corrupt until the multiset differs
        size_t flips = 1 + rng.below(2);
        for (size_t f = 0; f < flips; ++f) {
          size_t p = rng.below(half);
          int32_t old = v[p];
          int32_t repl = old;
          while (repl == old) repl = int32_t(1 + rng.below(kPairAlphabet));
          v[p] = repl;
        }
        std::vector<int32_t> su = u, sv = v;
        std::sort(su.begin(), su.end());
        std::sort(sv.begin(), sv.end());
        if (su == sv) {  // rare collision; flip one more
          size_t p = 0;
          int32_t old = v[p];
          int32_t repl = old;
          while (repl == old) repl = int32_t(1 + rng.below(kPairAlphabet));
          v[p] = repl;
        }
      }
      std::copy(u.begin(), u.end(), e.ids.begin());
      std::copy(v.begin(), v.end(), e.ids.begin() + std::ptrdiff_t(half));
      break;
    }
  }
  e.label = closed_form_label(spec.kind, e.ids);
  return e;
}

inline uint64_t hash_ids(const std::vector<int32_t>& ids) {
  uint64_t h = 1469598103934665603ULL;
  for (int32_t t : ids) {
    h ^= uint64_t(uint32_t(t));
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace detail

// Deterministic dataset per (spec, seed); labels alternate so both splits
// stay balanced, and dev sequences never collide with train sequences.
inline Dataset make_task(const TaskSpec& spec) {
  spec.validate();
  Dataset data;
  data.len = spec.length;
  data.vocab = spec.vocab;
  data.n_classes = spec.n_classes;
  Rng rng(spec.seed ^ 0xbe9cULL);
  std::set<uint64_t> train_hashes;

  auto fill = [&](std::vector<Example>& out, size_t count, bool is_train) {
    for (size_t i = 0; i < count; ++i) {
      int32_t want = int32_t(i % 2);
      for (int attempt = 0;; ++attempt) {
        Example e = detail::generate_example(spec, want, rng);
        detail::require(e.label == want, "task generation produced a mislabeled example");
        uint64_t h = detail::hash_ids(e.ids);
        bool clash = is_train ? false : train_hashes.count(h) > 0;
        if (!clash) {
          if (is_train) train_hashes.insert(h);
          out.push_back(std::move(e));
          break;
        }
        detail::require(attempt < 1000, "task generation cannot find a disjoint dev example");
      }
    }
  };
  fill(data.train, spec.train_size, true);
  fill(data.dev, spec.dev_size, false);
  return data;
}

// ---------------------------------------------------------------------------
// experiment configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  ModelConfig model;
  std::vector<TaskSpec> tasks;
  SchedulePlan plan;
  DistillConfig distill;
  size_t teacher_steps = 800;
  std::vector<uint64_t> seeds = {0};
  std::vector<std::string> methods = {"minidisc", "maxidisc", "kd"};
  std::string out_dir = "out";

  void validate() const {
    model.validate();
    detail::require(!tasks.empty(), "ExperimentConfig: tasks must be non-empty");
    for (const auto& t : tasks) t.validate();
    plan.validate();
    distill.validate();
    detail::require(!seeds.empty(), "ExperimentConfig: seeds must be non-empty");
    static const std::set<std::string> known = {"grid", "minidisc", "maxidisc",
                                                "kd",   "fixed_ta", "ft"};
    for (const auto& m : methods)
      detail::require(known.count(m) > 0, "ExperimentConfig: unknown method '" + m + "'");
  }
};

namespace detail {

template <class T>
T field(const nlohmann::json& j, const char* name, T fallback) {
  if (!j.contains(name)) return fallback;
  try {
    return j.at(name).get<T>();
  } catch (const std::exception& e) {
    fail(std::string("config field '") + name + "': " + e.what());
  }
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  ExperimentConfig cfg;
  if (j.contains("model")) {
    const auto& m = j.at("model");
    cfg.model.layers = detail::field<size_t>(m, "layers", cfg.model.layers);
    cfg.model.heads = detail::field<size_t>(m, "heads", cfg.model.heads);
    cfg.model.d_model = detail::field<size_t>(m, "d_model", cfg.model.d_model);
    cfg.model.d_ffn = detail::field<size_t>(m, "d_ffn", cfg.model.d_ffn);
    cfg.model.vocab = detail::field<size_t>(m, "vocab", cfg.model.vocab);
    cfg.model.max_len = detail::field<size_t>(m, "max_len", cfg.model.max_len);
    cfg.model.n_classes = detail::field<size_t>(m, "n_classes", cfg.model.n_classes);
    cfg.model.with_cross_attention =
        detail::field<bool>(m, "with_cross_attention", cfg.model.with_cross_attention);
  }
  if (j.contains("tasks")) {
    cfg.tasks.clear();
    for (const auto& jt : j.at("tasks")) {
      TaskSpec t;
      t.kind = task_kind_from_name(detail::field<std::string>(jt, "kind", "majority"));
      t.vocab = detail::field<size_t>(jt, "vocab", cfg.model.vocab);
      t.length = detail::field<size_t>(jt, "length", cfg.model.max_len);
      t.train_size = detail::field<size_t>(jt, "train_size", t.train_size);
      t.dev_size = detail::field<size_t>(jt, "dev_size", t.dev_size);
      t.seed = detail::field<uint64_t>(jt, "seed", t.seed);
      cfg.tasks.push_back(t);
    }
  } else {
    cfg.tasks = {TaskSpec{}};
  }
  if (j.contains("plan")) {
    const auto& p = j.at("plan");
    cfg.plan.s_s = detail::field<double>(p, "student_scale", cfg.plan.s_s);
    cfg.plan.n = detail::field<size_t>(p, "grid", cfg.plan.n);
    cfg.plan.lambda = detail::field<double>(p, "lambda", cfg.plan.lambda);
    std::string sel = detail::field<std::string>(p, "selection", "lambda");
    if (sel == "lambda")
      cfg.plan.selection = SelectionMode::Lambda;
    else if (sel == "nd")
      cfg.plan.selection = SelectionMode::NegativeDerivative;
    else
      detail::fail("config field 'plan.selection': expected lambda|nd, got '" + sel + "'");
    cfg.plan.residual = detail::field<bool>(p, "residual", cfg.plan.residual);
    cfg.plan.ta_hops = detail::field<size_t>(p, "ta_hops", cfg.plan.ta_hops);
    cfg.plan.standalone_ta = detail::field<bool>(p, "standalone_ta", cfg.plan.standalone_ta);
    cfg.plan.fixed_ta_scale = detail::field<double>(p, "fixed_ta_scale", cfg.plan.fixed_ta_scale);
    std::string rm = detail::field<std::string>(p, "rank_mode", "global");
    if (rm == "global")
      cfg.plan.rank_mode = RankMode::Global;
    else if (rm == "local")
      cfg.plan.rank_mode = RankMode::Local;
    else
      detail::fail("config field 'plan.rank_mode': expected global|local, got '" + rm + "'");
    cfg.plan.scoring_batches = detail::field<size_t>(p, "scoring_batches", cfg.plan.scoring_batches);
    cfg.plan.scoring_batch_size =
        detail::field<size_t>(p, "scoring_batch_size", cfg.plan.scoring_batch_size);
  }
  if (j.contains("distill")) {
    const auto& d = j.at("distill");
    std::string obj = detail::field<std::string>(d, "objective", "tsd");
    if (obj == "tsd")
      cfg.distill.objective = Objective::TSD;
    else if (obj == "tad")
      cfg.distill.objective = Objective::TAD;
    else
      detail::fail("config field 'distill.objective': expected tsd|tad, got '" + obj + "'");
    cfg.distill.relation_heads =
        detail::field<size_t>(d, "relation_heads", cfg.distill.relation_heads);
    cfg.distill.eta = detail::field<size_t>(d, "eta", cfg.distill.eta);
    cfg.distill.steps = detail::field<size_t>(d, "steps", cfg.distill.steps);
    cfg.distill.sandwich_steps =
        detail::field<size_t>(d, "sandwich_steps", cfg.distill.sandwich_steps);
    cfg.distill.lr = detail::field<double>(d, "lr", cfg.distill.lr);
    cfg.distill.warmup = detail::field<double>(d, "warmup", cfg.distill.warmup);
    cfg.distill.weight_decay = detail::field<double>(d, "weight_decay", cfg.distill.weight_decay);
    cfg.distill.batch_size = detail::field<size_t>(d, "batch_size", cfg.distill.batch_size);
    cfg.distill.eval_every = detail::field<size_t>(d, "eval_every", cfg.distill.eval_every);
    cfg.distill.residual_steps =
        detail::field<size_t>(d, "residual_steps", cfg.distill.residual_steps);
  }
  cfg.teacher_steps = detail::field<size_t>(j, "teacher_steps", cfg.teacher_steps);
  cfg.seeds = detail::field<std::vector<uint64_t>>(j, "seeds", cfg.seeds);
  cfg.methods = detail::field<std::vector<std::string>>(j, "methods", cfg.methods);
  cfg.out_dir = detail::field<std::string>(j, "out_dir", cfg.out_dir);
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) detail::fail("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    detail::fail("config parse error in " + path + ": " + e.what());
  }
  return parse_config(j);
}

// ---------------------------------------------------------------------------
// results
// ---------------------------------------------------------------------------

struct ResultRow {
  std::string task;
  uint64_t seed = 0;
  std::string method;
  double ta_scale = -1;        // <0 renders empty (methods without an assistant)
  double student_scale = 0;
  double metric = 0;
  double t_lambda = -1;        // <0 renders empty
  double t_nd = 0;
  bool has_t_nd = false;
  uint64_t steps = 0;
  uint64_t trials = 0;
};

inline std::string csv_num(double v, bool present = true) {
  if (!present) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline void write_results_csv(const std::string& path, const std::vector<ResultRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "task,seed,method,ta_scale,student_scale,metric,t_lambda,t_nd,steps,trials\n";
  for (const auto& r : rows)
    out << r.task << "," << r.seed << "," << r.method << "," << csv_num(r.ta_scale, r.ta_scale >= 0)
        << "," << csv_num(r.student_scale) << "," << csv_num(r.metric) << ","
        << csv_num(r.t_lambda, r.t_lambda >= 0) << "," << csv_num(r.t_nd, r.has_t_nd) << ","
        << r.steps << "," << r.trials << "\n";
}

inline void write_candidates_csv(const std::string& path, const CandidateGrid& grid,
                                 const std::vector<TradeoffRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "candidate_index,target_scale,achieved_scale,metric,t_lambda,t_nd\n";
  for (size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    out << r.candidate_index << "," << csv_num(grid.entries[i].target_scale) << ","
        << csv_num(r.scale) << "," << csv_num(r.metric) << "," << csv_num(r.t_lambda) << ","
        << csv_num(r.t_nd.value_or(0), r.t_nd.has_value()) << "\n";
  }
}

inline void write_eval_csv(const std::string& path, const CandidateGrid& grid,
                           const std::vector<EvalRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "candidate_index,target_scale,achieved_scale,metric\n";
  for (const auto& r : records)
    out << r.candidate_index << "," << csv_num(grid.entries[r.candidate_index].target_scale)
        << "," << csv_num(r.scale) << "," << csv_num(r.metric) << "\n";
}

inline void write_structure_csv(const std::string& path, const ModelConfig& cfg,
                                const StructureMask& mask) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "layer,kept_heads,total_heads,kept_neurons,total_neurons\n";
  for (size_t l = 0; l < cfg.layers; ++l)
    out << l << "," << mask.kept_heads(l) << "," << cfg.heads << "," << mask.kept_neurons(l)
        << "," << cfg.d_ffn << "\n";
}

// ---------------------------------------------------------------------------
// csv -> svg (plots are pure functions of the csv files)
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::map<std::string, std::string>> read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot read csv: " + path);
  std::string line;
  std::vector<std::string> header;
  std::vector<std::map<std::string, std::string>> rows;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
      if (c == ',') {
        out.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    out.push_back(cur);
    return out;
  };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split(line);
    if (header.empty()) {
      header = cells;
      continue;
    }
    std::map<std::string, std::string> row;
    for (size_t i = 0; i < header.size() && i < cells.size(); ++i) row[header[i]] = cells[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace detail

inline void plot_candidates(const std::string& csv_path, const std::string& out_prefix) {
  auto rows = detail::read_csv(csv_path);
  svg::Series metric{"candidate metric", {}, "#1f77b4"};
  svg::Series tlam{"lambda tradeoff", {}, "#d62728"};
  for (const auto& r : rows) {
    double s = std::stod(r.at("achieved_scale"));
    metric.points.push_back({s, std::stod(r.at("metric"))});
    if (!r.at("t_lambda").empty()) tlam.points.push_back({s, std::stod(r.at("t_lambda"))});
  }
  svg::line_chart(out_prefix + "_metric.svg", "candidate metric vs scale", "scale", "dev accuracy",
                  {metric});
  svg::line_chart(out_prefix + "_tradeoff.svg", "tradeoff vs scale", "scale", "t_lambda", {tlam});
}

inline void plot_student_curve(const std::string& csv_path, const std::string& out_path) {
  auto rows = detail::read_csv(csv_path);
  svg::Series s{"student metric", {}, "#2ca02c"};
  for (const auto& r : rows)
    s.points.push_back({std::stod(r.at("achieved_scale")), std::stod(r.at("metric"))});
  svg::line_chart(out_path, "student metric vs assistant scale", "assistant scale",
                  "dev accuracy", {s});
}

inline void plot_structure(const std::string& csv_path, const std::string& out_path) {
  auto rows = detail::read_csv(csv_path);
  std::vector<svg::BarGroup> groups;
  for (const auto& r : rows) {
    svg::BarGroup g;
    g.label = "L" + r.at("layer");
    double kh = std::stod(r.at("kept_heads")), th = std::stod(r.at("total_heads"));
    double kn = std::stod(r.at("kept_neurons")), tn = std::stod(r.at("total_neurons"));
    g.values = {th > 0 ? kh / th : 0.0, tn > 0 ? kn / tn : 0.0};
    groups.push_back(std::move(g));
  }
  svg::bar_chart(out_path, "surviving structures per layer", {"heads kept", "neurons kept"},
                 groups, "kept fraction");
}

// Re-emit every chart under `dir` from the csv files alone.
inline void plot_all(const std::string& dir) {
  namespace fs = std::filesystem;
  for (const auto& entry : fs::directory_iterator(dir)) {
    auto name = entry.path().filename().string();
    auto stem = entry.path().stem().string();
    if (name.rfind("candidates_", 0) == 0 && entry.path().extension() == ".csv")
      plot_candidates(entry.path().string(), (fs::path(dir) / stem).string());
    if (name.rfind("maxidisc_students_", 0) == 0 && entry.path().extension() == ".csv")
      plot_student_curve(entry.path().string(), (fs::path(dir) / (stem + ".svg")).string());
    if (name.rfind("structure_", 0) == 0 && entry.path().extension() == ".csv")
      plot_structure(entry.path().string(), (fs::path(dir) / (stem + ".svg")).string());
  }
}

// ---------------------------------------------------------------------------
// ledger report
// ---------------------------------------------------------------------------

struct LedgerReportRow {
  std::string method;
  uint64_t steps = 0;
  uint64_t trials = 0;
  double step_ratio_vs_kd = 0.0;  // 0 when kd is absent
};

inline std::vector<LedgerReportRow> report_ledger(
    const std::vector<std::pair<std::string, TrialLedger>>& ledgers) {
  detail::require(!ledgers.empty(), "report_ledger: need at least one ledger");
  std::vector<LedgerReportRow> rows;
  std::map<std::string, LedgerReportRow> agg;
  std::vector<std::string> order;
  for (const auto& [method, ledger] : ledgers) {
    if (!agg.count(method)) order.push_back(method);
    auto& row = agg[method];
    row.method = method;
    row.steps += ledger.total_steps();
    row.trials += ledger.total_trials();
  }
  uint64_t kd_steps = agg.count("kd") ? agg["kd"].steps : 0;
  for (const auto& m : order) {
    auto row = agg[m];
    if (kd_steps > 0) row.step_ratio_vs_kd = double(row.steps) / double(kd_steps);
    rows.push_back(row);
  }
  return rows;
}

inline std::string format_ledger_report(const std::vector<LedgerReportRow>& rows) {
  std::ostringstream os;
  os << "method        steps      trials   steps_vs_kd\n";
  for (const auto& r : rows) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%-12s %9llu %9llu %10.2fx\n", r.method.c_str(),
                  (unsigned long long)r.steps, (unsigned long long)r.trials,
                  r.step_ratio_vs_kd);
    os << buf;
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// experiment runner
// ---------------------------------------------------------------------------

struct ExperimentSummary {
  std::vector<ResultRow> rows;
  std::vector<std::pair<std::string, TrialLedger>> ledgers;
  std::vector<std::string> failures;
};

inline std::string run_tag(const TaskSpec& task, uint64_t seed) {
  return std::string(task_kind_name(task.kind)) + "_s" + std::to_string(seed);
}

// Train (or load a cached) teacher for one task/seed.
inline ParamStore prepare_teacher(const ExperimentConfig& cfg, const TaskSpec& task,
                                  uint64_t seed, const Dataset& data, const std::string& dir) {
  namespace fs = std::filesystem;
  std::string path = (fs::path(dir) / ("teacher_" + run_tag(task, seed) + ".ckpt")).string();
  if (fs::exists(path)) return load_store(path);
  ParamStore teacher = build_model(cfg.model, seed);
  DistillConfig tcfg = cfg.distill;
  tcfg.steps = cfg.teacher_steps;
  tcfg.seed = seed;
  TrialLedger scratch;  // teacher finetuning is outside the distillation ledger
  train_supervised(teacher, StructureMask::ones(cfg.model), data, tcfg, scratch);
  save_store(teacher, path);
  return teacher;
}

inline ExperimentSummary run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  ExperimentSummary summary;

  for (const auto& task : cfg.tasks) {
    for (uint64_t seed : cfg.seeds) {
      std::string tag = run_tag(task, seed);
      TaskSpec seeded = task;
      seeded.seed = task.seed ^ (seed * 0x9e3779b97f4a7c15ULL);
      seeded.vocab = cfg.model.vocab;
      seeded.length = std::min(seeded.length, cfg.model.max_len);
      Dataset data;
      ParamStore teacher;
      try {
        data = make_task(seeded);
        teacher = prepare_teacher(cfg, task, seed, data, cfg.out_dir);
      } catch (const std::exception& e) {
        summary.failures.push_back(tag + ": " + e.what());
        continue;
      }
      double teacher_metric =
          evaluate_model(teacher, StructureMask::ones(cfg.model), data, cfg.distill.batch_size);
      {
        std::ofstream tf(fs::path(cfg.out_dir) / ("teacher_" + tag + ".txt"), std::ios::trunc);
        tf << "dev_accuracy " << csv_num(teacher_metric) << "\n";
      }

      for (const auto& method : cfg.methods) {
        DistillConfig dcfg = cfg.distill;
        dcfg.seed = seed;
        ResultRow row;
        row.task = task_kind_name(task.kind);
        row.seed = seed;
        row.method = method;
        try {
          if (method == "grid") {
            auto scoring = data.scoring_batches(cfg.plan.scoring_batches,
                                                cfg.plan.scoring_batch_size);
            auto grid = build_grid(teacher, scoring, cfg.plan.s_s, cfg.plan.n, task_ce_loss(),
                                   cfg.plan.rank_mode);
            std::ofstream gf(fs::path(cfg.out_dir) / ("grid_" + tag + ".json"), std::ios::trunc);
            gf << grid.to_json().dump(2) << "\n";
            write_structure_csv(
                (fs::path(cfg.out_dir) / ("structure_" + tag + ".csv")).string(), cfg.model,
                grid.entries.front().mask);
            row.student_scale = grid.entries.front().achieved_scale;
            row.metric = teacher_metric;
            summary.rows.push_back(row);
            continue;
          }
          if (method == "minidisc") {
            auto result = minidisc(cfg.plan, teacher, data, dcfg);
            row.ta_scale = result.chosen_scale;
            row.student_scale = scale_of(cfg.model, result.student_mask);
            row.metric = result.student_metric;
            row.t_lambda = result.records[result.chosen_index].t_lambda;
            if (result.records[result.chosen_index].t_nd) {
              row.t_nd = *result.records[result.chosen_index].t_nd;
              row.has_t_nd = true;
            }
            row.steps = result.ledger.total_steps();
            row.trials = result.ledger.total_trials();
            summary.ledgers.push_back({method, result.ledger});
            write_candidates_csv(
                (fs::path(cfg.out_dir) / ("candidates_" + tag + ".csv")).string(), result.grid,
                result.records);
            write_structure_csv(
                (fs::path(cfg.out_dir) / ("structure_" + tag + ".csv")).string(), cfg.model,
                result.grid.entries[result.chosen_index].mask);
            {
              std::ofstream gf(fs::path(cfg.out_dir) / ("grid_" + tag + ".json"),
                               std::ios::trunc);
              gf << result.grid.to_json().dump(2) << "\n";
              nlohmann::json jt = nlohmann::json::array();
              for (const auto& r : result.records) {
                nlohmann::json e = {{"candidate_index", r.candidate_index},
                                    {"scale", r.scale},
                                    {"metric", r.metric},
                                    {"lambda", r.lambda},
                                    {"t_lambda", r.t_lambda}};
                if (r.t_nd) e["t_nd"] = *r.t_nd;
                jt.push_back(std::move(e));
              }
              std::ofstream tf(fs::path(cfg.out_dir) / ("tradeoffs_" + tag + ".json"),
                               std::ios::trunc);
              tf << jt.dump(2) << "\n";
              std::ofstream lf(fs::path(cfg.out_dir) / ("ledger_minidisc_" + tag + ".json"),
                               std::ios::trunc);
              lf << result.ledger.to_json().dump(2) << "\n";
            }
            save_store(result.student_store,
                       (fs::path(cfg.out_dir) / ("student_minidisc_" + tag + ".ckpt")).string());
          } else if (method == "maxidisc") {
            auto result = maxidisc(cfg.plan, teacher, data, dcfg);
            row.ta_scale = result.grid.entries[result.best_index].achieved_scale;
            row.student_scale = scale_of(cfg.model, result.student_mask);
            row.metric = result.best_metric;
            row.steps = result.ledger.total_steps();
            row.trials = result.ledger.total_trials();
            summary.ledgers.push_back({method, result.ledger});
            write_eval_csv(
                (fs::path(cfg.out_dir) / ("maxidisc_students_" + tag + ".csv")).string(),
                result.grid, result.per_ta_student_metrics);
            std::ofstream lf(fs::path(cfg.out_dir) / ("ledger_maxidisc_" + tag + ".json"),
                             std::ios::trunc);
            lf << result.ledger.to_json().dump(2) << "\n";
          } else if (method == "kd" || method == "fixed_ta" || method == "ft") {
            auto scoring = data.scoring_batches(cfg.plan.scoring_batches,
                                                cfg.plan.scoring_batch_size);
            auto table = rank(normalize_scores(importance_scores(teacher, scoring)),
                              cfg.plan.rank_mode);
            StructureMask teacher_mask = StructureMask::ones(cfg.model);
            StructureMask student_mask = structure_at_scale(table, cfg.model, cfg.plan.s_s);
            row.student_scale = scale_of(cfg.model, student_mask);
            TrialLedger ledger;
            if (method == "kd") {
              ParamStore student = teacher;
              row.metric = distill({&teacher, teacher_mask}, student, student_mask, data, dcfg,
                                   ledger, Phase::StudentDistill);
            } else if (method == "fixed_ta") {
              StructureMask ta_mask = structure_at_scale(table, cfg.model, cfg.plan.fixed_ta_scale);
              ParamStore ta_store = teacher;
              distill({&teacher, teacher_mask}, ta_store, ta_mask, data, dcfg, ledger,
                      Phase::TaDistill);
              ParamStore student = ta_store;
              row.metric = distill({&ta_store, ta_mask}, student, student_mask, data, dcfg,
                                   ledger, Phase::StudentDistill);
              row.ta_scale = scale_of(cfg.model, ta_mask);
            } else {
              ParamStore student = teacher;
              row.metric = train_supervised(student, student_mask, data, dcfg, ledger,
                                            Phase::StudentDistill);
            }
            row.steps = ledger.total_steps();
            row.trials = ledger.total_trials();
            summary.ledgers.push_back({method, ledger});
            std::ofstream lf(
                fs::path(cfg.out_dir) / ("ledger_" + method + "_" + tag + ".json"),
                std::ios::trunc);
            lf << ledger.to_json().dump(2) << "\n";
          }
          summary.rows.push_back(row);
        } catch (const std::exception& e) {
          summary.failures.push_back(tag + " " + method + ": " + e.what());
        }
      }
    }
  }

  write_results_csv((fs::path(cfg.out_dir) / "results.csv").string(), summary.rows);
  if (!summary.ledgers.empty()) {
    auto report = report_ledger(summary.ledgers);
    std::ofstream rf(fs::path(cfg.out_dir) / "ledger_report.txt", std::ios::trunc);
    rf << format_ledger_report(report);
  }
  if (!summary.failures.empty()) {
    std::ofstream ff(fs::path(cfg.out_dir) / "failures.log", std::ios::trunc);
    for (const auto& f : summary.failures) ff << f << "\n";
  }
  plot_all(cfg.out_dir);
  return summary;
}

}  // namespace minidisc
