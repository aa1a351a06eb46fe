#pragma once

// The one-trial distillation schedule (specification -> optimization ->
// selection), its tradeoff measures, the enumeration counterpart, fixed
// baselines, residual distillation, and the recursive multi-assistant
// extension.

#include "minidisc/distiller.hpp"
#include "minidisc/ledger.hpp"
#include "minidisc/pruner.hpp"

#include <atomic>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

namespace minidisc {

enum class SelectionMode { Lambda, NegativeDerivative };

struct SchedulePlan {
  double s_s = 0.10;   // student scale; teacher scale is 1 by definition
  size_t n = 19;       // grid size
  double lambda = 0.2;
  SelectionMode selection = SelectionMode::Lambda;
  bool residual = false;
  size_t ta_hops = 1;
  bool standalone_ta = false;    // re-distill the chosen assistant from scratch
  double fixed_ta_scale = 0.4;   // the conventional fixed-assistant baseline
  RankMode rank_mode = RankMode::Global;
  size_t scoring_batches = 8;    // batches used for importance estimation
  size_t scoring_batch_size = 32;

  void validate() const {
    detail::require(s_s > 0.0 && s_s < 1.0, "SchedulePlan: student scale must lie in (0, 1)");
    detail::require(n >= 2, "SchedulePlan: n must be >= 2");
    detail::require(lambda >= 0.0 && lambda <= 1.0, "SchedulePlan: lambda must lie in [0, 1]");
    detail::require(ta_hops >= 1, "SchedulePlan: ta_hops must be >= 1");
  }
};

struct TradeoffRecord {
  size_t candidate_index = 0;
  double scale = 0.0;
  double metric = 0.0;
  double lambda = 0.0;
  double t_lambda = 0.0;
  std::optional<double> t_nd;  // absent for the largest-scale entry
};

// t_a = m_a + lambda * (1 - s_a)
inline double lambda_tradeoff(double m, double s, double lambda) {
  detail::require(m >= 0.0 && m <= 1.0, "lambda_tradeoff: metric outside [0, 1]");
  detail::require(s > 0.0 && s <= 1.0, "lambda_tradeoff: scale outside (0, 1]");
  detail::require(lambda >= 0.0 && lambda <= 1.0, "lambda_tradeoff: lambda outside [0, 1]");
  return m + lambda * (1.0 - s);
}

// Forward-difference t_i = -(m_{i+1} - m_i) / delta_s over records ordered by
// ascending scale; the largest entry has no forward neighbor and no value.
inline std::vector<std::optional<double>> nd_tradeoff(const std::vector<EvalRecord>& records,
                                                      double delta_s) {
  detail::require(records.size() >= 2, "nd_tradeoff: need at least two records");
  detail::require(delta_s > 0.0, "nd_tradeoff: spacing must be positive");
  for (size_t i = 0; i + 1 < records.size(); ++i) {
    double gap = records[i + 1].scale - records[i].scale;
    detail::require(std::abs(gap - delta_s) <= 0.5 * delta_s,
                    "nd_tradeoff: non-uniform spacing at index " + std::to_string(i) + " (" +
                        std::to_string(gap) + " vs " + std::to_string(delta_s) + ")");
  }
  std::vector<std::optional<double>> out(records.size());
  for (size_t i = 0; i + 1 < records.size(); ++i)
    out[i] = -(records[i + 1].metric - records[i].metric) / delta_s;
  return out;
}

inline std::vector<TradeoffRecord> tradeoff_records(const std::vector<EvalRecord>& records,
                                                    double lambda, double delta_s) {
  std::vector<TradeoffRecord> out;
  out.reserve(records.size());
  auto nd = records.size() >= 2 ? nd_tradeoff(records, delta_s)
                                : std::vector<std::optional<double>>(records.size());
  for (size_t i = 0; i < records.size(); ++i) {
    TradeoffRecord r;
    r.candidate_index = records[i].candidate_index;
    r.scale = records[i].scale;
    r.metric = records[i].metric;
    r.lambda = lambda;
    r.t_lambda = lambda_tradeoff(records[i].metric, records[i].scale, lambda);
    r.t_nd = nd[i];
    out.push_back(r);
  }
  return out;
}

// Grid-aware variant: the lambda term uses each candidate's achieved scale,
// while the derivative term differences over the grid's nominal spacing
// (achieved scales wobble by a structure quantum and are not the design).
inline std::vector<TradeoffRecord> tradeoff_records(const std::vector<EvalRecord>& records,
                                                    double lambda, const CandidateGrid& grid) {
  detail::require(records.size() == grid.entries.size(),
                  "tradeoff_records: record/grid size mismatch");
  std::vector<EvalRecord> on_targets = records;
  for (size_t i = 0; i < records.size(); ++i)
    on_targets[i].scale = grid.entries[i].target_scale;
  auto nd = records.size() >= 2 ? nd_tradeoff(on_targets, grid.delta)
                                : std::vector<std::optional<double>>(records.size());
  std::vector<TradeoffRecord> out;
  out.reserve(records.size());
  for (size_t i = 0; i < records.size(); ++i) {
    TradeoffRecord r;
    r.candidate_index = records[i].candidate_index;
    r.scale = records[i].scale;
    r.metric = records[i].metric;
    r.lambda = lambda;
    r.t_lambda = lambda_tradeoff(records[i].metric, records[i].scale, lambda);
    r.t_nd = nd[i];
    out.push_back(r);
  }
  return out;
}

// Argmax of the configured tradeoff; ties break toward the smaller scale.
// Records must be ordered by ascending scale.
inline size_t select_optimal(const std::vector<TradeoffRecord>& records,
                             const SchedulePlan& plan) {
  detail::require(!records.empty(), "select_optimal: no records");
  std::optional<size_t> best;
  for (size_t i = 0; i < records.size(); ++i) {
    std::optional<double> value;
    if (plan.selection == SelectionMode::Lambda)
      value = records[i].t_lambda;
    else
      value = records[i].t_nd;  // boundary entry excluded (no forward neighbor)
    if (!value) continue;
    if (!best) {
      best = i;
      continue;
    }
    double best_value = plan.selection == SelectionMode::Lambda ? records[*best].t_lambda
                                                                : *records[*best].t_nd;
    if (*value > best_value) best = i;  // strict: first (smallest-scale) max wins ties
  }
  detail::require(best.has_value(), "select_optimal: no record carries the requested tradeoff");
  return *best;
}

// ---------------------------------------------------------------------------
// pipelines
// ---------------------------------------------------------------------------

struct MinidiscResult {
  ParamStore student_store;
  StructureMask student_mask;
  double student_metric = 0.0;
  std::vector<TradeoffRecord> records;
  size_t chosen_index = 0;
  double chosen_scale = 0.0;
  CandidateGrid grid;
  TrialLedger ledger;
};

namespace detail {

struct MinidiscScope {
  const ParamStore* teacher;      // targets for this hop
  StructureMask teacher_mask;     // all-ones at the top level
  double ceiling;                 // teacher-side scale of this hop
  const StructureMask* base;      // restrict candidate structures (recursion)
};

inline MinidiscResult minidisc_hop(const MinidiscScope& scope, const SchedulePlan& plan,
                                   const Dataset& data, const DistillConfig& cfg,
                                   TrialLedger ledger, size_t hops_left) {
  // specification: one importance table, one mask per grid scale
  auto scoring = data.scoring_batches(plan.scoring_batches, plan.scoring_batch_size);
  auto grid = build_grid(*scope.teacher, scoring, plan.s_s, plan.n, task_ce_loss(),
                         plan.rank_mode, scope.base, scope.ceiling);

  // optimization: shared store + frozen snapshot, sandwich training
  ParamStore shared = *scope.teacher;  // one store regardless of candidate count
  ModelRef snapshot{scope.teacher, scope.teacher_mask};
  sandwich_train(shared, grid, snapshot, data, cfg, ledger);
  auto evals = evaluate_candidates(shared, grid, data, cfg.batch_size);

  // selection
  auto records = tradeoff_records(evals, plan.lambda, grid);
  size_t chosen = select_optimal(records, plan);
  const StructureMask& ta_mask = grid.entries[chosen].mask;

  const ParamStore* ta_store = &shared;
  ParamStore standalone;
  if (plan.standalone_ta) {
    // optional ablation: re-distill the assistant from teacher weights
    standalone = *scope.teacher;
    DistillConfig ta_cfg = cfg;
    distill({scope.teacher, scope.teacher_mask}, standalone, ta_mask, data, ta_cfg, ledger,
            Phase::TaDistill);
    ta_store = &standalone;
  }

  if (hops_left > 1) {
    // recurse with the chosen assistant as the new (shared-weight) teacher
    MinidiscScope inner;
    inner.teacher = ta_store;
    inner.teacher_mask = ta_mask;
    inner.ceiling = grid.entries[chosen].achieved_scale;
    inner.base = &ta_mask;
    SchedulePlan inner_plan = plan;
    if (inner.ceiling <= plan.s_s) {
      // assistant already sits at the student scale; nothing left to grid
      hops_left = 1;
    } else {
      auto result = minidisc_hop(inner, inner_plan, data, cfg, ledger, hops_left - 1);
      result.grid = std::move(grid);
      result.records = std::move(records);
      result.chosen_index = chosen;
      result.chosen_scale = result.grid.entries[chosen].achieved_scale;
      return result;
    }
  }

  // final hop: distill the assistant into the student-scale structure
  MinidiscResult out;
  out.student_mask = grid.entries.front().mask;
  out.student_store = *ta_store;  // fresh store initialized from assistant weights
  out.student_metric = distill({ta_store, ta_mask}, out.student_store, out.student_mask, data,
                               cfg, ledger, Phase::StudentDistill);
  out.records = std::move(records);
  out.chosen_index = chosen;
  out.chosen_scale = grid.entries[chosen].achieved_scale;
  out.grid = std::move(grid);
  out.ledger = std::move(ledger);
  return out;
}

}  // namespace detail

// Continue student training against the original teacher; keeps the better
// of the pre/post checkpoints so the step never hurts.
inline double residual_distill(ParamStore& student_store, const StructureMask& student_mask,
                               const ModelRef& teacher, const Dataset& data,
                               const DistillConfig& cfg, TrialLedger& ledger) {
  double pre = evaluate_model(student_store, student_mask, data, cfg.batch_size);
  if (cfg.residual_steps == 0) return pre;
  auto pre_values = detail::snapshot_values(student_store);
  DistillConfig rcfg = cfg;
  rcfg.steps = cfg.residual_steps;
  double post = distill(teacher, student_store, student_mask, data, rcfg, ledger,
                        Phase::StudentDistill);
  if (post >= pre) return post;
  detail::restore_values(student_store, pre_values);
  return pre;
}

// The full one-trial schedule. The returned ledger shows exactly one
// assistant-selection trial (the sandwich run) regardless of grid size.
inline MinidiscResult minidisc(const SchedulePlan& plan, const ParamStore& teacher,
                               const Dataset& data, const DistillConfig& cfg) {
  plan.validate();
  cfg.validate();
  detail::MinidiscScope scope;
  scope.teacher = &teacher;
  scope.teacher_mask = StructureMask::ones(teacher.config());
  scope.ceiling = 1.0;
  scope.base = nullptr;
  auto result = detail::minidisc_hop(scope, plan, data, cfg, TrialLedger{}, plan.ta_hops);
  if (plan.residual) {
    result.student_metric =
        residual_distill(result.student_store, result.student_mask,
                         {&teacher, StructureMask::ones(teacher.config())}, data, cfg,
                         result.ledger);
  }
  return result;
}

struct MaxidiscResult {
  ParamStore best_student_store;
  StructureMask student_mask;
  double best_metric = 0.0;
  size_t best_index = 0;
  std::vector<EvalRecord> per_ta_student_metrics;  // student metric per assistant scale
  std::vector<EvalRecord> per_ta_metrics;          // the assistant's own dev metric
  CandidateGrid grid;
  TrialLedger ledger;
};

// Enumeration schedule: fully distill teacher -> assistant -> student for
// every grid scale and keep the best student. Scales fan out to parallel
// workers under MINIDISC_THREADS; results are independent of the worker
// count.
inline MaxidiscResult maxidisc(const SchedulePlan& plan, const ParamStore& teacher,
                               const Dataset& data, const DistillConfig& cfg) {
  plan.validate();
  cfg.validate();
  auto scoring = data.scoring_batches(plan.scoring_batches, plan.scoring_batch_size);
  auto grid = build_grid(teacher, scoring, plan.s_s, plan.n, task_ce_loss(), plan.rank_mode);
  StructureMask teacher_mask = StructureMask::ones(teacher.config());
  const StructureMask& student_mask = grid.entries.front().mask;

  MaxidiscResult out;
  out.grid = grid;
  out.student_mask = student_mask;
  size_t n = grid.entries.size();
  out.per_ta_student_metrics.resize(n);
  out.per_ta_metrics.resize(n);
  std::vector<ParamStore> students(n);
  std::mutex mu;

  auto run_scale = [&](size_t k) {
    TrialLedger local;
    DistillConfig run_cfg = cfg;
    run_cfg.seed = Rng(cfg.seed).child(1000 + k).seed();
    ParamStore ta_store = teacher;
    double ta_metric = distill({&teacher, teacher_mask}, ta_store, grid.entries[k].mask, data,
                               run_cfg, local, Phase::MaxidiscEnumeration);
    ParamStore student_store = ta_store;
    double m = distill({&ta_store, grid.entries[k].mask}, student_store, student_mask, data,
                       run_cfg, local, Phase::StudentDistill);
    std::lock_guard<std::mutex> lk(mu);
    out.per_ta_metrics[k] = {k, grid.entries[k].achieved_scale, ta_metric};
    out.per_ta_student_metrics[k] = {k, grid.entries[k].achieved_scale, m};
    students[k] = std::move(student_store);
    for (size_t p = 0; p < 4; ++p) {
      out.ledger.add_steps(Phase(p), local.at(Phase(p)).steps);
      for (uint64_t t = 0; t < local.at(Phase(p)).trials; ++t) out.ledger.add_trial(Phase(p));
    }
  };

  size_t workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (size_t k = 0; k < n; ++k) run_scale(k);
  } else {
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    for (size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (;;) {
          size_t k = next.fetch_add(1);
          if (k >= n) return;
          run_scale(k);
        }
      });
    for (auto& t : pool) t.join();
  }

  // best student; ties toward the smaller assistant
  size_t best = 0;
  for (size_t k = 1; k < n; ++k)
    if (out.per_ta_student_metrics[k].metric > out.per_ta_student_metrics[best].metric) best = k;
  out.best_index = best;
  out.best_metric = out.per_ta_student_metrics[best].metric;
  out.best_student_store = std::move(students[best]);
  return out;
}

struct BaselineResults {
  double kd_metric = 0.0;        // direct distillation at student scale
  double fixed_ta_metric = 0.0;  // via one fixed-scale assistant
  double ft_metric = 0.0;        // labels only, no distillation
  StructureMask student_mask;
  TrialLedger kd_ledger, fixed_ta_ledger, ft_ledger;
};

inline BaselineResults baselines(const SchedulePlan& plan, const ParamStore& teacher,
                                 const Dataset& data, const DistillConfig& cfg) {
  plan.validate();
  cfg.validate();
  auto scoring = data.scoring_batches(plan.scoring_batches, plan.scoring_batch_size);
  auto table = rank(normalize_scores(importance_scores(teacher, scoring)), plan.rank_mode);
  const ModelConfig& mc = teacher.config();
  StructureMask teacher_mask = StructureMask::ones(mc);
  StructureMask student_mask = structure_at_scale(table, mc, plan.s_s);

  BaselineResults out;
  out.student_mask = student_mask;
  {
    ParamStore student = teacher;
    out.kd_metric = distill({&teacher, teacher_mask}, student, student_mask, data, cfg,
                            out.kd_ledger, Phase::StudentDistill);
  }
  {
    StructureMask ta_mask = structure_at_scale(table, mc, plan.fixed_ta_scale);
    ParamStore ta_store = teacher;
    distill({&teacher, teacher_mask}, ta_store, ta_mask, data, cfg, out.fixed_ta_ledger,
            Phase::TaDistill);
    ParamStore student = ta_store;
    out.fixed_ta_metric = distill({&ta_store, ta_mask}, student, student_mask, data, cfg,
                                  out.fixed_ta_ledger, Phase::StudentDistill);
  }
  {
    ParamStore student = teacher;
    out.ft_metric =
        train_supervised(student, student_mask, data, cfg, out.ft_ledger, Phase::StudentDistill);
  }
  return out;
}

}  // namespace minidisc
