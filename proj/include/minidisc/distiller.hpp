#pragma once

// The two distillation objectives, single-path distillation, and the
// parameter-shared sandwich optimization with per-step candidate
// sub-sampling. Teacher-side tensors are detached everywhere so targets
// never accumulate gradient.

#include "minidisc/data.hpp"
#include "minidisc/ledger.hpp"
#include "minidisc/model.hpp"
#include "minidisc/optimizer.hpp"
#include "minidisc/pruner.hpp"
#include "minidisc/rng.hpp"

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace minidisc {

enum class Objective { TSD, TAD };

struct DistillConfig {
  Objective objective = Objective::TSD;
  size_t relation_heads = 32;  // TAD only
  size_t eta = 6;              // candidates trained per sandwich step
  size_t steps = 1000;         // per single-path distillation run
  size_t sandwich_steps = 2000;
  double lr = 1e-3;
  double warmup = 0.1;
  double weight_decay = 0.01;
  size_t batch_size = 32;
  uint64_t seed = 0;
  size_t eval_every = 100;
  size_t residual_steps = 200;

  void validate() const {
    detail::require(eta >= 1, "DistillConfig: eta must be >= 1");
    detail::require(objective != Objective::TAD || relation_heads >= 1,
                    "DistillConfig: relation_heads must be >= 1 for relation distillation");
  }
};

struct EvalRecord {
  size_t candidate_index = 0;
  double scale = 0.0;   // achieved scale
  double metric = 0.0;  // dev accuracy in [0, 1]
};

// Worker cap for read-only evaluation fanout; MINIDISC_THREADS, default 1.
inline size_t worker_count() {
  if (const char* env = std::getenv("MINIDISC_THREADS")) {
    int v = std::atoi(env);
    if (v >= 1) return size_t(v);
  }
  return 1;
}

// A (store, mask) view of a model.
struct ModelRef {
  const ParamStore* store;
  StructureMask mask;
};

// ---------------------------------------------------------------------------
// objectives
// ---------------------------------------------------------------------------

// Soft cross entropy on logits plus mean-squared error on last hidden states.
template <class T>
TensorT<T> tsd_loss(const ModelOutputsT<T>& teacher, const ModelOutputsT<T>& student) {
  detail::require(teacher.logits.shape() == student.logits.shape(),
                  "tsd_loss: logit shapes differ, " + shape_str(teacher.logits.shape()) + " vs " +
                      shape_str(student.logits.shape()));
  detail::require(teacher.last_hidden.shape() == student.last_hidden.shape(),
                  "tsd_loss: hidden shapes differ");
  auto soft = softmax_lastdim(teacher.logits.detach()).detach();
  auto ce = loss_soft_ce(soft, student.logits);
  auto mse = loss_mse(teacher.last_hidden.detach(), student.last_hidden);
  return add(ce, mse);
}

// Sum of KL terms over the query/key/value relation matrices, each averaged
// over relation heads, batch, and query positions.
template <class T>
TensorT<T> tad_loss(const ModelOutputsT<T>& teacher, const ModelOutputsT<T>& student) {
  detail::require(teacher.has_relations && student.has_relations,
                  "tad_loss: relation matrices missing (request them at forward time)");
  TensorT<T> total;
  for (int i = 0; i < 3; ++i) {
    detail::require(teacher.relations[i].shape() == student.relations[i].shape(),
                    "tad_loss: relation shapes differ");
    auto term = loss_kl(teacher.relations[i].detach(), student.relations[i]);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

inline double accuracy(const ParamStore& store, const StructureMask& mask,
                       const std::vector<Batch>& batches) {
  size_t hit = 0, total = 0;
  ForwardOptions opts;
  opts.track_grad = false;
  for (const auto& batch : batches) {
    auto out = forward(store, mask, batch, opts);
    size_t c = store.config().n_classes;
    for (size_t i = 0; i < batch.batch; ++i) {
      const float* row = out.logits.data().data() + i * c;
      size_t best = 0;
      for (size_t j = 1; j < c; ++j)
        if (row[j] > row[best]) best = j;
      hit += (int32_t(best) == batch.labels[i]) ? 1 : 0;
      ++total;
    }
  }
  return total ? double(hit) / double(total) : 0.0;
}

inline double evaluate_model(const ParamStore& store, const StructureMask& mask,
                             const Dataset& data, size_t batch_size) {
  return accuracy(store, mask, data.dev_batches(batch_size));
}

namespace detail {

[[noreturn]] inline void diverged(const char* where, size_t step, double loss) {
  std::ostringstream os;
  os << where << ": non-finite loss " << loss << " at step " << step
     << "; aborting run (check learning rate / data)";
  throw std::runtime_error(os.str());
}

inline std::vector<std::vector<float>> snapshot_values(const ParamStore& store) {
  std::vector<std::vector<float>> snap;
  snap.reserve(store.params().size());
  for (const auto& p : store.params()) snap.push_back(*p.value);
  return snap;
}

inline void restore_values(ParamStore& store, const std::vector<std::vector<float>>& snap) {
  for (size_t i = 0; i < snap.size(); ++i) *store.params()[i].value = snap[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// single-path distillation
// ---------------------------------------------------------------------------

// Distill teacher into the student view, updating only parameters the
// student mask exposes. Returns the best dev metric seen; the store is left
// at the best checkpoint. Credits `phase` with the executed steps and one
// trial.
inline double distill(const ModelRef& teacher, ParamStore& student_store,
                      const StructureMask& student_mask, const Dataset& data,
                      const DistillConfig& cfg, TrialLedger& ledger,
                      Phase phase = Phase::StudentDistill) {
  cfg.validate();
  if (teacher.store == &student_store)
    detail::require(student_mask.subset_of(teacher.mask),
                    "distill: student mask must nest inside the teacher mask when sharing a store");
  Rng rng = Rng(cfg.seed).child(0xd15ULL);
  AdamW opt(student_store, cfg.lr, cfg.weight_decay, cfg.steps, cfg.warmup);
  auto dev = data.dev_batches(cfg.batch_size);

  double best = accuracy(student_store, student_mask, dev);
  auto best_values = detail::snapshot_values(student_store);

  ForwardOptions teacher_opts, student_opts;
  teacher_opts.track_grad = false;
  bool tad = cfg.objective == Objective::TAD;
  teacher_opts.want_relations = student_opts.want_relations = tad;
  teacher_opts.relation_heads = student_opts.relation_heads = tad ? cfg.relation_heads : 0;

  for (size_t step = 1; step <= cfg.steps; ++step) {
    Batch batch = data.sample_train(rng, cfg.batch_size);
    auto t_out = forward(*teacher.store, teacher.mask, batch, teacher_opts);
    auto s_out = forward(student_store, student_mask, batch, student_opts);
    auto loss = tad ? tad_loss(t_out, s_out) : tsd_loss(t_out, s_out);
    double lv = double(loss.item());
    if (!std::isfinite(lv)) detail::diverged("distill", step, lv);
    backward(loss);
    opt.step();
    if ((cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.steps) {
      double m = accuracy(student_store, student_mask, dev);
      if (m > best) {
        best = m;
        best_values = detail::snapshot_values(student_store);
      }
    }
  }
  detail::restore_values(student_store, best_values);
  ledger.add_steps(phase, cfg.steps);
  ledger.add_trial(phase);
  return best;
}

// Plain supervised training on labels (teacher training and the
// finetune-only baseline). Same checkpointing discipline as distill.
inline double train_supervised(ParamStore& store, const StructureMask& mask, const Dataset& data,
                               const DistillConfig& cfg, TrialLedger& ledger,
                               Phase phase = Phase::StudentDistill) {
  Rng rng = Rng(cfg.seed).child(0x50b3ULL);
  AdamW opt(store, cfg.lr, cfg.weight_decay, cfg.steps, cfg.warmup);
  auto dev = data.dev_batches(cfg.batch_size);
  double best = accuracy(store, mask, dev);
  auto best_values = detail::snapshot_values(store);
  ForwardOptions opts;
  for (size_t step = 1; step <= cfg.steps; ++step) {
    Batch batch = data.sample_train(rng, cfg.batch_size);
    auto out = forward(store, mask, batch, opts);
    auto loss = loss_ce(out.logits, batch.labels);
    double lv = double(loss.item());
    if (!std::isfinite(lv)) detail::diverged("train_supervised", step, lv);
    backward(loss);
    opt.step();
    if ((cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.steps) {
      double m = accuracy(store, mask, dev);
      if (m > best) {
        best = m;
        best_values = detail::snapshot_values(store);
      }
    }
  }
  detail::restore_values(store, best_values);
  ledger.add_steps(phase, cfg.steps);
  ledger.add_trial(phase);
  return best;
}

// ---------------------------------------------------------------------------
// sandwich optimization
// ---------------------------------------------------------------------------

using SandwichObserver =
    std::function<void(size_t step, const std::vector<size_t>& picked, double loss)>;

// Per step: one frozen-teacher forward, then the largest and smallest grid
// entries plus eta-2 freshly drawn intermediates accumulate their losses on
// the shared store, followed by a single optimizer step.
inline void sandwich_train(ParamStore& shared, const CandidateGrid& grid,
                           const ModelRef& teacher_snapshot, const Dataset& data,
                           const DistillConfig& cfg, TrialLedger& ledger,
                           const SandwichObserver& observer = nullptr) {
  cfg.validate();
  size_t n = grid.entries.size();
  detail::require(n >= 1, "sandwich_train: empty grid");
  detail::require(cfg.eta <= n, "sandwich_train: eta " + std::to_string(cfg.eta) +
                                    " exceeds grid size " + std::to_string(n));
  Rng rng = Rng(cfg.seed).child(0x5a4dULL);
  AdamW opt(shared, cfg.lr, cfg.weight_decay, cfg.sandwich_steps, cfg.warmup);

  ForwardOptions teacher_opts, cand_opts;
  teacher_opts.track_grad = false;
  bool tad = cfg.objective == Objective::TAD;
  teacher_opts.want_relations = cand_opts.want_relations = tad;
  teacher_opts.relation_heads = cand_opts.relation_heads = tad ? cfg.relation_heads : 0;

  for (size_t step = 1; step <= cfg.sandwich_steps; ++step) {
    // endpoints always; middles re-drawn each step without replacement
    std::vector<size_t> picked;
    picked.push_back(n - 1);  // largest
    if (cfg.eta >= 2 && n >= 2) picked.push_back(0);
    if (cfg.eta > 2 && n > 2) {
      auto mids = rng.sample_without_replacement(n - 2, cfg.eta - 2);
      for (size_t m : mids) picked.push_back(m + 1);
    }
    std::sort(picked.begin(), picked.end(), std::greater<size_t>());

    Batch batch = data.sample_train(rng, cfg.batch_size);
    auto t_out = forward(*teacher_snapshot.store, teacher_snapshot.mask, batch, teacher_opts);
    TensorT<float> total;
    for (size_t idx : picked) {
      auto c_out = forward(shared, grid.entries[idx].mask, batch, cand_opts);
      auto term = tad ? tad_loss(t_out, c_out) : tsd_loss(t_out, c_out);
      total = total.defined() ? add(total, term) : term;
    }
    double lv = double(total.item());
    if (!std::isfinite(lv)) detail::diverged("sandwich_train", step, lv);
    backward(total);
    opt.step();
    if (observer) observer(step, picked, lv);
  }
  ledger.add_steps(Phase::Sandwich, cfg.sandwich_steps);
  ledger.add_trial(Phase::Sandwich);
}

// Dev metric of every grid entry through the shared parameters, sampled or
// not. Entries fan out to read-only workers when MINIDISC_THREADS allows.
inline std::vector<EvalRecord> evaluate_candidates(const ParamStore& shared,
                                                   const CandidateGrid& grid,
                                                   const Dataset& data, size_t batch_size = 32) {
  detail::require(!data.dev.empty(), "evaluate_candidates: empty dev set");
  auto dev = data.dev_batches(batch_size);
  std::vector<EvalRecord> records(grid.entries.size());
  size_t workers = std::min(worker_count(), grid.entries.size());
  auto eval_range = [&](size_t begin, size_t end) {
    for (size_t i = begin; i < end; ++i) {
      records[i].candidate_index = i;
      records[i].scale = grid.entries[i].achieved_scale;
      records[i].metric = accuracy(shared, grid.entries[i].mask, dev);
    }
  };
  if (workers <= 1) {
    eval_range(0, grid.entries.size());
  } else {
    std::vector<std::thread> pool;
    size_t chunk = (grid.entries.size() + workers - 1) / workers;
    for (size_t w = 0; w < workers; ++w) {
      size_t begin = w * chunk, end = std::min(begin + chunk, grid.entries.size());
      if (begin < end) pool.emplace_back(eval_range, begin, end);
    }
    for (auto& t : pool) t.join();
  }
  return records;
}

}  // namespace minidisc
