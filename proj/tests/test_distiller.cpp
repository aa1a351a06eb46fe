#include "minidisc/bench.hpp"
#include "minidisc/distiller.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace minidisc;

namespace {

ModelConfig mini_config() {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.d_model = 16;
  cfg.d_ffn = 32;
  cfg.vocab = 16;
  cfg.max_len = 16;
  cfg.n_classes = 2;
  return cfg;
}

Dataset easy_task(uint64_t seed, size_t train = 512, size_t dev = 128) {
  TaskSpec spec;
  spec.kind = TaskKind::MajorityClass;
  spec.vocab = 16;
  spec.length = 16;
  spec.train_size = train;
  spec.dev_size = dev;
  spec.seed = seed;
  return make_task(spec);
}

template <class T>
ModelOutputsT<T> fabricate_outputs(const std::vector<T>& logits, Shape lshape,
                                   const std::vector<T>& hidden, Shape hshape) {
  ModelOutputsT<T> out;
  out.logits = TensorT<T>::from_data(lshape, logits);
  out.last_hidden = TensorT<T>::from_data(hshape, hidden);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// tsd loss
// ---------------------------------------------------------------------------

TEST(TsdLoss, SelfDistillationFloorIsTeacherEntropy) {
  // identical outputs: mse term exactly 0, ce term = teacher entropy
  std::vector<double> logits = {0.3, -0.7, 1.1, 0.2, 0.0, -0.4};
  std::vector<double> hidden = {0.1, 0.2, 0.3, 0.4};
  auto t = fabricate_outputs<double>(logits, {2, 3}, hidden, {1, 2, 2});
  auto s = fabricate_outputs<double>(logits, {2, 3}, hidden, {1, 2, 2});
  double loss = tsd_loss(t, s).item();
  double entropy = 0;
  for (int r = 0; r < 2; ++r) {
    double mx = std::max({logits[r * 3], logits[r * 3 + 1], logits[r * 3 + 2]});
    double z = 0;
    for (int j = 0; j < 3; ++j) z += std::exp(logits[r * 3 + j] - mx);
    for (int j = 0; j < 3; ++j) {
      double p = std::exp(logits[r * 3 + j] - mx) / z;
      entropy -= p * std::log(p);
    }
  }
  entropy /= 2.0;
  EXPECT_NEAR(loss, entropy, 1e-9);
}

TEST(TsdLoss, UniformLogitsHandCase) {
  // y_T = y_S = [0,0], H_T = H_S: total = ln 2
  auto t = fabricate_outputs<float>({0.f, 0.f}, {1, 2}, {0.5f, 0.5f}, {1, 1, 2});
  auto s = fabricate_outputs<float>({0.f, 0.f}, {1, 2}, {0.5f, 0.5f}, {1, 1, 2});
  EXPECT_NEAR(tsd_loss(t, s).item(), std::log(2.0), 1e-6);
}

TEST(TsdLoss, MatchesReferenceFormula) {
  Rng rng(3);
  std::vector<double> tl(6), sl(6), th(8), sh(8);
  for (auto* v : {&tl, &sl})
    for (auto& x : *v) x = rng.normal();
  for (auto* v : {&th, &sh})
    for (auto& x : *v) x = rng.normal();
  auto t = fabricate_outputs<double>(tl, {2, 3}, th, {2, 2, 2});
  auto s = fabricate_outputs<double>(sl, {2, 3}, sh, {2, 2, 2});
  // 64-bit oracle
  double want = 0;
  for (int r = 0; r < 2; ++r) {
    double tmx = std::max({tl[r * 3], tl[r * 3 + 1], tl[r * 3 + 2]});
    double smx = std::max({sl[r * 3], sl[r * 3 + 1], sl[r * 3 + 2]});
    double tz = 0, sz = 0;
    for (int j = 0; j < 3; ++j) {
      tz += std::exp(tl[r * 3 + j] - tmx);
      sz += std::exp(sl[r * 3 + j] - smx);
    }
    for (int j = 0; j < 3; ++j) {
      double p = std::exp(tl[r * 3 + j] - tmx) / tz;
      want -= p * (sl[r * 3 + j] - smx - std::log(sz));
    }
  }
  want /= 2.0;
  double mse = 0;
  for (int i = 0; i < 8; ++i) mse += (th[i] - sh[i]) * (th[i] - sh[i]);
  want += mse / 8.0;
  EXPECT_NEAR(tsd_loss(t, s).item(), want, 1e-6);
}

TEST(TsdLoss, ShapeMismatchThrows) {
  auto t = fabricate_outputs<float>({0.f, 0.f}, {1, 2}, {0.f, 0.f}, {1, 1, 2});
  auto s = fabricate_outputs<float>({0.f, 0.f, 0.f}, {1, 3}, {0.f, 0.f}, {1, 1, 2});
  EXPECT_THROW(tsd_loss(t, s), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// tad loss
// ---------------------------------------------------------------------------

namespace {

template <class T>
ModelOutputsT<T> with_relations(const std::vector<std::vector<T>>& rel, Shape shape) {
  ModelOutputsT<T> out;
  out.logits = TensorT<T>::zeros({1, 2});
  out.last_hidden = TensorT<T>::zeros({1, 1, 2});
  out.has_relations = true;
  for (int i = 0; i < 3; ++i) out.relations[i] = TensorT<T>::from_data(shape, rel[i]);
  return out;
}

std::vector<double> random_relation_rows(size_t rows, size_t d, Rng& rng) {
  std::vector<double> v(rows * d);
  for (size_t r = 0; r < rows; ++r) {
    double s = 0;
    for (size_t j = 0; j < d; ++j) {
      v[r * d + j] = rng.uniform(0.05, 1.0);
      s += v[r * d + j];
    }
    for (size_t j = 0; j < d; ++j) v[r * d + j] /= s;
  }
  return v;
}

}  // namespace

TEST(TadLoss, IdenticalRelationsGiveZero) {
  Rng rng(5);
  Shape shape{2, 1, 4, 4};
  auto r = random_relation_rows(8, 4, rng);
  auto t = with_relations<double>({r, r, r}, shape);
  auto s = with_relations<double>({r, r, r}, shape);
  EXPECT_NEAR(tad_loss(t, s).item(), 0.0, 1e-12);
}

TEST(TadLoss, SinglePositionSequencesGiveZero) {
  // len-1 relations: every row is [1.0]
  Shape shape{2, 3, 1, 1};
  std::vector<double> ones(6, 1.0);
  auto t = with_relations<double>({ones, ones, ones}, shape);
  auto s = with_relations<double>({ones, ones, ones}, shape);
  EXPECT_DOUBLE_EQ(tad_loss(t, s).item(), 0.0);
}

TEST(TadLoss, MatchesReferenceFormula) {
  // 2 relation heads, len 4
  Rng rng(7);
  Shape shape{2, 1, 4, 4};
  std::vector<std::vector<double>> tr, sr;
  for (int i = 0; i < 3; ++i) {
    tr.push_back(random_relation_rows(8, 4, rng));
    sr.push_back(random_relation_rows(8, 4, rng));
  }
  auto t = with_relations<double>(tr, shape);
  auto s = with_relations<double>(sr, shape);
  double want = 0;
  for (int i = 0; i < 3; ++i)
    for (size_t r = 0; r < 8; ++r) {
      double term = 0;
      for (size_t j = 0; j < 4; ++j) {
        double p = tr[i][r * 4 + j], q = sr[i][r * 4 + j];
        term += p * (std::log(p) - std::log(q));
      }
      want += term / 8.0;
    }
  EXPECT_NEAR(tad_loss(t, s).item(), want, 1e-6);
}

TEST(TadLoss, MissingRelationsThrows) {
  ModelOutputsT<float> t, s;
  t.logits = s.logits = Tensor::zeros({1, 2});
  t.last_hidden = s.last_hidden = Tensor::zeros({1, 1, 2});
  EXPECT_THROW(tad_loss(t, s), std::invalid_argument);
}

TEST(TadLoss, BatchPermutationInvariant) {
  Rng rng(11);
  Shape shape{1, 3, 2, 2};  // (heads, batch, len, len)
  std::vector<std::vector<double>> tr, sr, trp, srp;
  for (int i = 0; i < 3; ++i) {
    tr.push_back(random_relation_rows(6, 2, rng));
    sr.push_back(random_relation_rows(6, 2, rng));
  }
  // permute batch entries (each is a 2x2 block) with cycle 0->2->1
  auto permute_batch = [](const std::vector<double>& v) {
    std::vector<double> out(v.size());
    const size_t block = 4;
    const size_t perm[3] = {2, 0, 1};
    for (size_t b = 0; b < 3; ++b)
      std::copy(v.begin() + std::ptrdiff_t(b * block), v.begin() + std::ptrdiff_t((b + 1) * block),
                out.begin() + std::ptrdiff_t(perm[b] * block));
    return out;
  };
  for (int i = 0; i < 3; ++i) {
    trp.push_back(permute_batch(tr[i]));
    srp.push_back(permute_batch(sr[i]));
  }
  auto a = tad_loss(with_relations<double>(tr, shape), with_relations<double>(sr, shape)).item();
  auto b = tad_loss(with_relations<double>(trp, shape), with_relations<double>(srp, shape)).item();
  EXPECT_NEAR(a, b, 1e-12);
}

TEST(Detachment, TeacherNeverAccumulatesGradient) {
  auto cfg = mini_config();
  auto teacher = build_model(cfg, 1);
  auto student = build_model(cfg, 2);
  auto data = easy_task(3, 64, 32);
  Rng rng(0);
  auto batch = data.sample_train(rng, 8);
  ForwardOptions opts;  // track_grad deliberately left on for the teacher
  opts.want_relations = true;
  opts.relation_heads = 4;
  auto t_out = forward(teacher, StructureMask::ones(cfg), batch, opts);
  auto s_out = forward(student, StructureMask::ones(cfg), batch, opts);
  backward(add(tsd_loss(t_out, s_out), tad_loss(t_out, s_out)));
  for (const auto& p : teacher.params())
    for (float g : *p.grad) ASSERT_EQ(g, 0.f) << "teacher grad leaked into " << p.name;
  bool student_has_grad = false;
  for (const auto& p : student.params())
    for (float g : *p.grad) student_has_grad = student_has_grad || g != 0.f;
  EXPECT_TRUE(student_has_grad);
}

// ---------------------------------------------------------------------------
// distill
// ---------------------------------------------------------------------------

TEST(Distill, ZeroStepsReturnsInitialMetricAndOneTrial) {
  auto cfg = mini_config();
  auto teacher = build_model(cfg, 5);
  auto data = easy_task(7, 128, 64);
  ParamStore student = teacher;
  DistillConfig dcfg;
  dcfg.steps = 0;
  dcfg.batch_size = 16;
  TrialLedger ledger;
  double before = evaluate_model(student, StructureMask::ones(cfg), data, 16);
  double m = distill({&teacher, StructureMask::ones(cfg)}, student, StructureMask::ones(cfg),
                     data, dcfg, ledger);
  EXPECT_DOUBLE_EQ(m, before);
  EXPECT_EQ(ledger.total_steps(), 0u);
  EXPECT_EQ(ledger.total_trials(), 1u);
}

TEST(Distill, LearnableTaskReachesHighAccuracy) {
  // task constructed to be learnable; threshold verified by the supervised
  // oracle on the teacher first
  auto cfg = mini_config();
  auto data = easy_task(11);
  auto teacher = build_model(cfg, 13);
  DistillConfig tcfg;
  tcfg.steps = 400;
  tcfg.batch_size = 32;
  tcfg.lr = 2e-3;
  tcfg.eval_every = 50;
  TrialLedger scratch;
  double teacher_metric =
      train_supervised(teacher, StructureMask::ones(cfg), data, tcfg, scratch);
  ASSERT_GE(teacher_metric, 0.95) << "direct-training oracle failed to learn the task";

  ParamStore student = build_model(cfg, 17);  // fresh weights, all-ones structure
  DistillConfig dcfg;
  dcfg.steps = 500;
  dcfg.batch_size = 32;
  dcfg.lr = 2e-3;
  dcfg.eval_every = 50;
  TrialLedger ledger;
  double m = distill({&teacher, StructureMask::ones(cfg)}, student, StructureMask::ones(cfg),
                     data, dcfg, ledger);
  EXPECT_GE(m, 0.95);
  EXPECT_EQ(ledger.at(Phase::StudentDistill).steps, 500u);
}

TEST(Distill, DeterministicGivenSeed) {
  auto cfg = mini_config();
  auto teacher = build_model(cfg, 19);
  auto data = easy_task(23, 128, 64);
  auto run = [&]() {
    ParamStore student = teacher;
    DistillConfig dcfg;
    dcfg.steps = 40;
    dcfg.batch_size = 16;
    dcfg.eval_every = 10;
    dcfg.seed = 77;
    TrialLedger ledger;
    double m = distill({&teacher, StructureMask::ones(cfg)}, student, StructureMask::ones(cfg),
                       data, dcfg, ledger);
    return std::make_pair(m, *student.params()[2].value);
  };
  auto a = run();
  auto b = run();
  EXPECT_EQ(a.first, b.first);
  for (size_t i = 0; i < a.second.size(); ++i) ASSERT_EQ(a.second[i], b.second[i]);
}

TEST(Distill, SharedStoreRequiresNestedMask) {
  auto cfg = mini_config();
  auto store = build_model(cfg, 29);
  auto data = easy_task(31, 64, 32);
  auto big = StructureMask::ones(cfg);
  big.layers[0].self_heads[0] = 0;
  auto wide = StructureMask::ones(cfg);  // not a subset of big
  DistillConfig dcfg;
  dcfg.steps = 1;
  TrialLedger ledger;
  EXPECT_THROW(distill({&store, big}, store, wide, data, dcfg, ledger), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// sandwich optimization
// ---------------------------------------------------------------------------

namespace {

struct SandwichFixture {
  ModelConfig cfg = mini_config();
  ParamStore teacher;
  Dataset data;
  CandidateGrid grid;

  explicit SandwichFixture(size_t n, uint64_t seed = 41) : teacher(build_model(cfg, seed)) {
    data = easy_task(seed + 1, 256, 64);
    auto scoring = data.scoring_batches(4, 16);
    grid = build_grid(teacher, scoring, 0.25, n);
  }
};

}  // namespace

TEST(Sandwich, EtaEqualNTrainsEveryCandidateAndSumsLosses) {
  SandwichFixture fx(4);
  ParamStore shared = fx.teacher;

  // independent-sum oracle on a fixed batch with the untouched store
  Rng rng(99);
  Batch batch = fx.data.sample_train(rng, 16);
  ForwardOptions no_grad;
  no_grad.track_grad = false;
  auto t_out = forward(fx.teacher, StructureMask::ones(fx.cfg), batch, no_grad);
  double independent_sum = 0;
  for (const auto& entry : fx.grid.entries) {
    auto c_out = forward(shared, entry.mask, batch, no_grad);
    independent_sum += double(tsd_loss(t_out, c_out).item());
  }
  // one accumulated pass, the way the sandwich step assembles it
  TensorT<float> total;
  for (const auto& entry : fx.grid.entries) {
    auto c_out = forward(shared, entry.mask, batch, no_grad);
    auto term = tsd_loss(t_out, c_out);
    total = total.defined() ? add(total, term) : term;
  }
  EXPECT_NEAR(double(total.item()), independent_sum, 1e-5);

  // and the sampler really picks all n candidates each step when eta = n
  DistillConfig dcfg;
  dcfg.eta = 4;
  dcfg.sandwich_steps = 3;
  dcfg.batch_size = 16;
  TrialLedger ledger;
  std::vector<std::set<size_t>> picks;
  sandwich_train(shared, fx.grid, {&fx.teacher, StructureMask::ones(fx.cfg)}, fx.data, dcfg,
                 ledger, [&](size_t, const std::vector<size_t>& picked, double) {
                   picks.push_back(std::set<size_t>(picked.begin(), picked.end()));
                 });
  ASSERT_EQ(picks.size(), 3u);
  for (const auto& p : picks) EXPECT_EQ(p, (std::set<size_t>{0, 1, 2, 3}));
}

TEST(Sandwich, EtaOneDegeneratesToLargestCandidate) {
  SandwichFixture fx(4);
  ParamStore shared = fx.teacher;
  DistillConfig dcfg;
  dcfg.eta = 1;
  dcfg.sandwich_steps = 3;
  dcfg.batch_size = 16;
  TrialLedger ledger;
  sandwich_train(shared, fx.grid, {&fx.teacher, StructureMask::ones(fx.cfg)}, fx.data, dcfg,
                 ledger, [&](size_t, const std::vector<size_t>& picked, double) {
                   ASSERT_EQ(picked.size(), 1u);
                   EXPECT_EQ(picked[0], 3u);  // largest entry only
                 });
}

TEST(Sandwich, EndpointsAlwaysSampledMiddlesRedrawn) {
  SandwichFixture fx(6);
  ParamStore shared = fx.teacher;
  DistillConfig dcfg;
  dcfg.eta = 4;
  dcfg.sandwich_steps = 24;
  dcfg.batch_size = 8;
  TrialLedger ledger;
  std::set<size_t> middles_seen;
  sandwich_train(shared, fx.grid, {&fx.teacher, StructureMask::ones(fx.cfg)}, fx.data, dcfg,
                 ledger, [&](size_t, const std::vector<size_t>& picked, double) {
                   std::set<size_t> s(picked.begin(), picked.end());
                   EXPECT_TRUE(s.count(0));
                   EXPECT_TRUE(s.count(5));
                   EXPECT_EQ(s.size(), 4u);
                   for (size_t i : s)
                     if (i != 0 && i != 5) middles_seen.insert(i);
                 });
  EXPECT_GE(middles_seen.size(), 3u) << "middle candidates never redrawn";
  EXPECT_EQ(ledger.at(Phase::Sandwich).steps, 24u);
  EXPECT_EQ(ledger.at(Phase::Sandwich).trials, 1u);
}

TEST(Sandwich, EtaAboveGridSizeThrows) {
  SandwichFixture fx(3);
  ParamStore shared = fx.teacher;
  DistillConfig dcfg;
  dcfg.eta = 4;
  dcfg.sandwich_steps = 1;
  TrialLedger ledger;
  EXPECT_THROW(sandwich_train(shared, fx.grid, {&fx.teacher, StructureMask::ones(fx.cfg)},
                              fx.data, dcfg, ledger),
               std::invalid_argument);
}

TEST(Sandwich, ParameterMemoryIndependentOfGridSize) {
  // peak store bytes during sandwich: one shared store + the frozen teacher,
  // regardless of how many candidates the grid holds
  auto run = [](size_t n) {
    SandwichFixture fx(n, 53);
    int64_t baseline = StoreMemory::current().load();
    StoreMemory::reset_peak();
    {
      ParamStore shared = fx.teacher;
      DistillConfig dcfg;
      dcfg.eta = std::min<size_t>(3, n);
      dcfg.sandwich_steps = 2;
      dcfg.batch_size = 8;
      TrialLedger ledger;
      sandwich_train(shared, fx.grid, {&fx.teacher, StructureMask::ones(fx.cfg)}, fx.data, dcfg,
                     ledger);
    }
    return StoreMemory::peak().load() - baseline;
  };
  int64_t with_small_grid = run(2);
  int64_t with_large_grid = run(8);
  EXPECT_EQ(with_small_grid, with_large_grid);
}

// ---------------------------------------------------------------------------
// evaluate_candidates
// ---------------------------------------------------------------------------

TEST(EvaluateCandidates, MatchesIndependentMaskedEvaluations) {
  SandwichFixture fx(5);
  ParamStore shared = fx.teacher;
  auto records = evaluate_candidates(shared, fx.grid, fx.data, 16);
  ASSERT_EQ(records.size(), 5u);
  for (size_t i = 0; i < 5; ++i) {
    double want = evaluate_model(shared, fx.grid.entries[i].mask, fx.data, 16);
    EXPECT_DOUBLE_EQ(records[i].metric, want);
    EXPECT_DOUBLE_EQ(records[i].scale, fx.grid.entries[i].achieved_scale);
  }
}

TEST(EvaluateCandidates, DuplicateEntriesIdenticalAllOnesMatchesStore) {
  SandwichFixture fx(3);
  ParamStore shared = fx.teacher;
  CandidateGrid grid = fx.grid;
  grid.entries.push_back(grid.entries.back());  // duplicate
  GridEntry full;
  full.mask = StructureMask::ones(fx.cfg);
  full.target_scale = full.achieved_scale = 1.0;
  grid.entries.push_back(full);
  auto records = evaluate_candidates(shared, grid, fx.data, 16);
  size_t n = records.size();
  EXPECT_DOUBLE_EQ(records[n - 3].metric, records[n - 2].metric);
  EXPECT_DOUBLE_EQ(records[n - 1].metric,
                   evaluate_model(shared, StructureMask::ones(fx.cfg), fx.data, 16));
}

TEST(EvaluateCandidates, EmptyDevSetThrows) {
  SandwichFixture fx(3);
  ParamStore shared = fx.teacher;
  Dataset empty = fx.data;
  empty.dev.clear();
  EXPECT_THROW(evaluate_candidates(shared, fx.grid, empty, 16), std::invalid_argument);
}

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  return RUN_ALL_TESTS();
}
