#include "minidisc/bench.hpp"

#include <gtest/gtest.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <set>

using namespace minidisc;

namespace {

namespace fs = std::filesystem;

std::string fresh_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("minidisc_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

nlohmann::json tiny_experiment_json(const std::string& out_dir) {
  return {
      {"model",
       {{"layers", 2}, {"heads", 2}, {"d_model", 16}, {"d_ffn", 32}, {"vocab", 16},
        {"max_len", 16}, {"n_classes", 2}}},
      {"tasks",
       {{{"kind", "majority"}, {"length", 16}, {"train_size", 128}, {"dev_size", 32},
         {"seed", 1}}}},
      {"plan",
       {{"student_scale", 0.25}, {"grid", 3}, {"lambda", 0.2}, {"scoring_batches", 2},
        {"scoring_batch_size", 8}}},
      {"distill",
       {{"eta", 2}, {"steps", 0}, {"sandwich_steps", 0}, {"batch_size", 8},
        {"eval_every", 0}}},
      {"teacher_steps", 0},
      {"seeds", {0, 1}},
      {"methods", {"minidisc", "kd"}},
      {"out_dir", out_dir},
  };
}

}  // namespace

// ---------------------------------------------------------------------------
// tasks
// ---------------------------------------------------------------------------

TEST(Tasks, ClosedFormLabelerReproducesEveryLabel) {
  for (TaskKind kind :
       {TaskKind::ParityOfMarkedTokens, TaskKind::MajorityClass, TaskKind::PairSimilarity}) {
    TaskSpec spec;
    spec.kind = kind;
    spec.vocab = 32;
    spec.length = 16;
    spec.train_size = 256;
    spec.dev_size = 64;
    spec.seed = 5;
    auto data = make_task(spec);
    for (const auto& pool : {data.train, data.dev})
      for (const auto& e : pool)
        ASSERT_EQ(e.label, closed_form_label(kind, e.ids)) << task_kind_name(kind);
  }
}

TEST(Tasks, DeterministicPerSpec) {
  TaskSpec spec;
  spec.kind = TaskKind::PairSimilarity;
  spec.vocab = 16;
  spec.length = 16;
  spec.train_size = 64;
  spec.dev_size = 16;
  spec.seed = 9;
  auto a = make_task(spec);
  auto b = make_task(spec);
  ASSERT_EQ(a.train.size(), b.train.size());
  for (size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train[i].ids, b.train[i].ids);
    EXPECT_EQ(a.train[i].label, b.train[i].label);
  }
}

TEST(Tasks, LabelBalanceWithinTenPercentOfUniform) {
  for (TaskKind kind :
       {TaskKind::ParityOfMarkedTokens, TaskKind::MajorityClass, TaskKind::PairSimilarity}) {
    TaskSpec spec;
    spec.kind = kind;
    spec.vocab = 64;
    spec.length = 32;
    spec.train_size = 2048;
    spec.dev_size = 512;
    spec.seed = 3;
    auto data = make_task(spec);
    for (const auto& pool : {data.train, data.dev}) {
      size_t ones = 0;
      for (const auto& e : pool) ones += size_t(e.label);
      double frac = double(ones) / double(pool.size());
      EXPECT_NEAR(frac, 0.5, 0.05) << task_kind_name(kind);
    }
  }
}

TEST(Tasks, DevDisjointFromTrain) {
  TaskSpec spec;
  spec.kind = TaskKind::MajorityClass;
  spec.vocab = 8;
  spec.length = 8;  // tiny space to force collisions
  spec.train_size = 256;
  spec.dev_size = 64;
  spec.seed = 7;
  auto data = make_task(spec);
  std::set<std::vector<int32_t>> train_set;
  for (const auto& e : data.train) train_set.insert(e.ids);
  for (const auto& e : data.dev) EXPECT_EQ(train_set.count(e.ids), 0u);
}

TEST(Tasks, TinyVocabThrows) {
  TaskSpec spec;
  spec.vocab = 3;
  EXPECT_THROW(make_task(spec), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// config parsing
// ---------------------------------------------------------------------------

TEST(Config, ParsesAndValidates) {
  auto cfg = parse_config(tiny_experiment_json("/tmp/unused"));
  EXPECT_EQ(cfg.model.layers, 2u);
  EXPECT_EQ(cfg.plan.n, 3u);
  EXPECT_EQ(cfg.seeds.size(), 2u);
  EXPECT_EQ(cfg.methods.size(), 2u);
}

TEST(Config, FieldLevelErrors) {
  auto j = tiny_experiment_json("/tmp/unused");
  j["plan"]["selection"] = "banana";
  try {
    parse_config(j);
    FAIL() << "expected parse failure";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("plan.selection"), std::string::npos);
  }
  j = tiny_experiment_json("/tmp/unused");
  j["methods"] = {"warp-drive"};
  EXPECT_THROW(parse_config(j), std::invalid_argument);
  j = tiny_experiment_json("/tmp/unused");
  j["distill"]["steps"] = "many";
  try {
    parse_config(j);
    FAIL() << "expected parse failure";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("steps"), std::string::npos);
  }
}

// ---------------------------------------------------------------------------
// experiment runner
// ---------------------------------------------------------------------------

TEST(Experiment, DryRunWritesCsvAndChartsQuickly) {
  auto dir = fresh_dir("dry");
  auto cfg = parse_config(tiny_experiment_json(dir));
  auto t0 = std::chrono::steady_clock::now();
  auto summary = run_experiment(cfg);
  double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_LT(sec, 10.0);
  EXPECT_TRUE(summary.failures.empty());
  // row count = |methods| x |tasks| x |seeds|
  EXPECT_EQ(summary.rows.size(), 2u * 1u * 2u);
  EXPECT_TRUE(fs::exists(fs::path(dir) / "results.csv"));
  // svg files exist and carry the xml/svg shell
  size_t svgs = 0;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.path().extension() == ".svg") {
      ++svgs;
      auto body = slurp(entry.path().string());
      EXPECT_EQ(body.rfind("<?xml version=\"1.0\"", 0), 0u);
      EXPECT_NE(body.find("<svg "), std::string::npos);
      EXPECT_NE(body.find("</svg>"), std::string::npos);
    }
  EXPECT_GE(svgs, 3u);  // metric + tradeoff + structure charts per run at least
}

TEST(Experiment, CandidateCsvMatchesInMemoryRecords) {
  auto dir = fresh_dir("records");
  auto j = tiny_experiment_json(dir);
  j["seeds"] = {0};
  j["methods"] = {"minidisc"};
  j["distill"]["steps"] = 5;
  j["distill"]["sandwich_steps"] = 5;
  j["teacher_steps"] = 5;
  auto cfg = parse_config(j);
  run_experiment(cfg);

  // replay the same pipeline in memory from the cached teacher
  auto teacher = load_store((fs::path(dir) / "teacher_majority_s0.ckpt").string());
  TaskSpec seeded = cfg.tasks[0];
  seeded.seed = cfg.tasks[0].seed ^ (0 * 0x9e3779b97f4a7c15ULL);
  seeded.vocab = cfg.model.vocab;
  auto data = make_task(seeded);
  DistillConfig dcfg = cfg.distill;
  dcfg.seed = 0;
  auto result = minidisc::minidisc(cfg.plan, teacher, data, dcfg);

  auto rows = detail::read_csv((fs::path(dir) / "candidates_majority_s0.csv").string());
  ASSERT_EQ(rows.size(), result.records.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    EXPECT_NEAR(std::stod(rows[i].at("metric")), result.records[i].metric, 1e-6);
    EXPECT_NEAR(std::stod(rows[i].at("achieved_scale")), result.records[i].scale, 1e-6);
    EXPECT_NEAR(std::stod(rows[i].at("t_lambda")), result.records[i].t_lambda, 1e-6);
  }
}

TEST(Experiment, ReproducibleBitForBitAcrossRuns) {
  auto dir1 = fresh_dir("repro1");
  auto dir2 = fresh_dir("repro2");
  auto j = tiny_experiment_json("");
  j["seeds"] = {0};
  j["distill"]["steps"] = 4;
  j["distill"]["sandwich_steps"] = 4;
  j["distill"]["eval_every"] = 2;
  j["teacher_steps"] = 4;
  j["out_dir"] = dir1;
  run_experiment(parse_config(j));
  j["out_dir"] = dir2;
  run_experiment(parse_config(j));

  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir1))
    names.push_back(entry.path().filename().string());
  ASSERT_FALSE(names.empty());
  for (const auto& name : names) {
    auto a = slurp((fs::path(dir1) / name).string());
    auto b = slurp((fs::path(dir2) / name).string());
    EXPECT_EQ(a, b) << name << " differs between identical runs";
  }
}

TEST(Experiment, ChartsArePureFunctionsOfCsv) {
  auto dir = fresh_dir("plots");
  auto cfg = parse_config(tiny_experiment_json(dir));
  run_experiment(cfg);
  // snapshot, delete, re-emit from csv alone, compare bytes
  std::map<std::string, std::string> before;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.path().extension() == ".svg") {
      before[entry.path().filename().string()] = slurp(entry.path().string());
      fs::remove(entry.path());
    }
  ASSERT_FALSE(before.empty());
  plot_all(dir);
  for (const auto& [name, body] : before)
    EXPECT_EQ(slurp((fs::path(dir) / name).string()), body) << name;
}

TEST(Experiment, FailedRunIsIsolated) {
  // eta larger than the grid: the sandwich stage must fail at run time,
  // while the direct-distillation method still produces its rows
  auto dir = fresh_dir("isolate");
  auto j = tiny_experiment_json(dir);
  j["seeds"] = {0};
  j["methods"] = {"kd", "minidisc"};
  j["distill"]["eta"] = 9;  // > grid size 3
  auto cfg = parse_config(j);
  auto summary = run_experiment(cfg);
  ASSERT_EQ(summary.failures.size(), 1u);
  EXPECT_NE(summary.failures[0].find("minidisc"), std::string::npos);
  ASSERT_EQ(summary.rows.size(), 1u);
  EXPECT_EQ(summary.rows[0].method, "kd");
  EXPECT_TRUE(fs::exists(fs::path(dir) / "failures.log"));
}

// ---------------------------------------------------------------------------
// ledger report
// ---------------------------------------------------------------------------

TEST(Report, StructuralCountsAndKdRatio) {
  TrialLedger mini, maxi, kd;
  mini.add_steps(Phase::Sandwich, 2000);
  mini.add_trial(Phase::Sandwich);
  mini.add_steps(Phase::StudentDistill, 1000);
  mini.add_trial(Phase::StudentDistill);
  for (int k = 0; k < 19; ++k) {
    maxi.add_steps(Phase::MaxidiscEnumeration, 1000);
    maxi.add_trial(Phase::MaxidiscEnumeration);
    maxi.add_steps(Phase::StudentDistill, 1000);
    maxi.add_trial(Phase::StudentDistill);
  }
  kd.add_steps(Phase::StudentDistill, 1000);
  kd.add_trial(Phase::StudentDistill);

  EXPECT_EQ(mini.ta_selection_trials(), 1u);
  EXPECT_EQ(maxi.ta_selection_trials(), 19u);

  auto rows = report_ledger({{"minidisc", mini}, {"maxidisc", maxi}, {"kd", kd}});
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_DOUBLE_EQ(rows[2].step_ratio_vs_kd, 1.0);  // kd is 1x by definition
  EXPECT_GE(rows[1].steps / double(rows[0].steps), 5.0);
  auto text = format_ledger_report(rows);
  EXPECT_NE(text.find("minidisc"), std::string::npos);
}

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  return RUN_ALL_TESTS();
}
