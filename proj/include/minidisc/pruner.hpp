#pragma once

// Mask-gradient importance scoring, l2 normalization, global/local ranking,
// and derivation of nested candidate structures at gridded scales. One
// importance table, computed once with all-ones masks, drives every scale;
// that is what makes the nesting property hold by construction.

#include "minidisc/model.hpp"
#include "minidisc/tensor.hpp"

#include <json.hpp>

#include <algorithm>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace minidisc {

enum class StructureType { SelfHead, CrossHead, FfnNeuron };

inline const char* structure_type_name(StructureType t) {
  switch (t) {
    case StructureType::SelfHead: return "self_head";
    case StructureType::CrossHead: return "cross_head";
    case StructureType::FfnNeuron: return "ffn_neuron";
  }
  return "?";
}

enum class RankMode { Global, Local };

struct ImportanceEntry {
  size_t layer = 0;
  StructureType type = StructureType::SelfHead;
  size_t index = 0;
  double raw = 0.0;
  double normalized = 0.0;
  size_t rank = 0;  // position in the prune order of its type (0 = pruned first)
};

struct ImportanceTable {
  std::vector<ImportanceEntry> entries;  // layer-major, type-major, index order
  bool normalized = false;
  bool ranked = false;
  RankMode mode = RankMode::Global;
  // per type: entry indices in ascending importance (prune order)
  std::vector<size_t> prune_order_self;
  std::vector<size_t> prune_order_cross;
  std::vector<size_t> prune_order_ffn;

  const std::vector<size_t>& prune_order(StructureType t) const {
    switch (t) {
      case StructureType::SelfHead: return prune_order_self;
      case StructureType::CrossHead: return prune_order_cross;
      case StructureType::FfnNeuron: return prune_order_ffn;
    }
    return prune_order_self;
  }

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& e : entries)
      rows.push_back({{"layer", e.layer},
                      {"type", structure_type_name(e.type)},
                      {"index", e.index},
                      {"raw", e.raw},
                      {"normalized", e.normalized},
                      {"rank", e.rank}});
    return {{"normalized", normalized},
            {"ranked", ranked},
            {"mode", mode == RankMode::Global ? "global" : "local"},
            {"scores", std::move(rows)}};
  }
};

// Task loss used for sensitivity estimation.
template <class T>
using ImportanceLoss =
    std::function<TensorT<T>(const ModelOutputsT<T>&, const Batch&)>;

inline ImportanceLoss<float> task_ce_loss() {
  return [](const ModelOutputsT<float>& out, const Batch& batch) {
    return loss_ce(out.logits, batch.labels);
  };
}

// Mean over batches of |dL/d(gate)| per structure; model weights are read
// but never stepped. Gates start at one so the scored model is the intact
// teacher. `base` restricts scoring to structures alive under it (used by
// the recursive schedule); structures outside it keep score zero.
inline ImportanceTable importance_scores(const ParamStore& store,
                                         const std::vector<Batch>& batches,
                                         ImportanceLoss<float> loss_fn = task_ce_loss(),
                                         const StructureMask* base = nullptr) {
  detail::require(!batches.empty(), "importance_scores: at least one batch required");
  const ModelConfig& cfg = store.config();
  StructureMask mask = base ? *base : StructureMask::ones(cfg);
  detail::require(mask.compatible(cfg), "importance_scores: base mask incompatible");

  auto vars = MaskVars::ones(cfg);
  ImportanceTable table;
  for (size_t l = 0; l < cfg.layers; ++l) {
    for (size_t h = 0; h < cfg.heads; ++h)
      table.entries.push_back({l, StructureType::SelfHead, h});
    if (cfg.with_cross_attention)
      for (size_t h = 0; h < cfg.heads; ++h)
        table.entries.push_back({l, StructureType::CrossHead, h});
    for (size_t j = 0; j < cfg.d_ffn; ++j)
      table.entries.push_back({l, StructureType::FfnNeuron, j});
  }

  for (const auto& batch : batches) {
    for (auto& lv : vars.layers) {
      std::fill(lv.self_heads.node()->grad->begin(), lv.self_heads.node()->grad->end(), 0.f);
      std::fill(lv.ffn.node()->grad->begin(), lv.ffn.node()->grad->end(), 0.f);
    }
    ForwardOptions opts;
    opts.track_grad = false;  // weight leaves stay constant; only gates carry grad
    opts.mask_vars = &vars;
    auto out = forward(store, mask, batch, opts);
    backward(loss_fn(out, batch));
    for (auto& e : table.entries) {
      if (e.type == StructureType::CrossHead) continue;  // housed, no module built
      const auto& g = e.type == StructureType::SelfHead
                          ? *vars.layers[e.layer].self_heads.node()->grad
                          : *vars.layers[e.layer].ffn.node()->grad;
      e.raw += std::abs(double(g[e.index]));
    }
  }
  for (auto& e : table.entries) e.raw /= double(batches.size());
  return table;
}

// l2-normalize scores within each (layer, type) group; all-zero groups stay
// at zero.
inline ImportanceTable normalize_scores(ImportanceTable table) {
  // group by (layer, type)
  std::vector<std::pair<size_t, StructureType>> seen;
  for (const auto& e : table.entries) {
    auto key = std::make_pair(e.layer, e.type);
    if (std::find(seen.begin(), seen.end(), key) != seen.end()) continue;
    seen.push_back(key);
    double sq = 0;
    for (const auto& x : table.entries)
      if (x.layer == key.first && x.type == key.second) sq += x.raw * x.raw;
    double norm = std::sqrt(sq);
    for (auto& x : table.entries)
      if (x.layer == key.first && x.type == key.second)
        x.normalized = norm > 0 ? x.raw / norm : 0.0;
  }
  table.normalized = true;
  return table;
}

// Order structures for pruning. Global: one ascending order per type across
// all layers. Local: ascending within each layer, consumed round-robin
// across layers. Ties break toward (lower layer, lower index).
inline ImportanceTable rank(ImportanceTable table, RankMode mode) {
  detail::require(table.normalized, "rank: normalize_scores must run first");
  auto order_for = [&](StructureType type) {
    std::vector<size_t> idx;
    for (size_t i = 0; i < table.entries.size(); ++i)
      if (table.entries[i].type == type) idx.push_back(i);
    auto less = [&](size_t a, size_t b) {
      const auto& ea = table.entries[a];
      const auto& eb = table.entries[b];
      if (ea.normalized != eb.normalized) return ea.normalized < eb.normalized;
      if (ea.layer != eb.layer) return ea.layer < eb.layer;
      return ea.index < eb.index;
    };
    if (mode == RankMode::Global) {
      std::sort(idx.begin(), idx.end(), less);
      return idx;
    }
    // local: sort within each layer, then interleave layer fronts
    size_t max_layer = 0;
    for (size_t i : idx) max_layer = std::max(max_layer, table.entries[i].layer);
    std::vector<std::vector<size_t>> per_layer(max_layer + 1);
    for (size_t i : idx) per_layer[table.entries[i].layer].push_back(i);
    for (auto& v : per_layer) std::sort(v.begin(), v.end(), less);
    std::vector<size_t> out;
    out.reserve(idx.size());
    for (size_t round = 0; out.size() < idx.size(); ++round)
      for (auto& v : per_layer)
        if (round < v.size()) out.push_back(v[round]);
    return out;
  };
  table.prune_order_self = order_for(StructureType::SelfHead);
  table.prune_order_cross = order_for(StructureType::CrossHead);
  table.prune_order_ffn = order_for(StructureType::FfnNeuron);
  auto assign_ranks = [&](const std::vector<size_t>& order) {
    for (size_t pos = 0; pos < order.size(); ++pos) table.entries[order[pos]].rank = pos;
  };
  assign_ranks(table.prune_order_self);
  assign_ranks(table.prune_order_cross);
  assign_ranks(table.prune_order_ffn);
  table.ranked = true;
  table.mode = mode;
  return table;
}

// Prune each type independently, lowest rank first, until that type's
// kept fraction first drops to <= target. Fractions are measured against
// the full (all-ones) structure count so scales stay absolute.
inline StructureMask structure_at_scale(const ImportanceTable& ranked, const ModelConfig& cfg,
                                        double target, const StructureMask* base = nullptr) {
  detail::require(ranked.ranked, "structure_at_scale: rank must run first");
  detail::require(target > 0.0 && target <= 1.0,
                  "structure_at_scale: target must lie in (0, 1], got " + std::to_string(target));
  StructureMask mask = base ? *base : StructureMask::ones(cfg);
  detail::require(mask.compatible(cfg), "structure_at_scale: base mask incompatible");

  auto bit = [&](const ImportanceEntry& e) -> uint8_t& {
    switch (e.type) {
      case StructureType::SelfHead: return mask.layers[e.layer].self_heads[e.index];
      case StructureType::CrossHead: return mask.layers[e.layer].cross_heads[e.index];
      case StructureType::FfnNeuron: return mask.layers[e.layer].ffn[e.index];
    }
    return mask.layers[e.layer].self_heads[e.index];
  };

  for (StructureType type :
       {StructureType::SelfHead, StructureType::CrossHead, StructureType::FfnNeuron}) {
    const auto& order = ranked.prune_order(type);
    if (order.empty()) continue;
    size_t total = order.size();
    size_t kept = 0;
    for (size_t i : order) kept += bit(ranked.entries[i]) ? 1 : 0;
    for (size_t i : order) {
      if (double(kept) / double(total) <= target) break;
      uint8_t& b = bit(ranked.entries[i]);
      if (b) {
        b = 0;
        --kept;
      }
    }
  }

  size_t survivors = 0;
  for (size_t l = 0; l < cfg.layers; ++l)
    survivors += mask.kept_heads(l) + mask.kept_cross(l) + mask.kept_neurons(l);
  detail::require(survivors > 0, "degenerate scale: no structures survive at target " +
                                     std::to_string(target));
  return mask;
}

struct GridEntry {
  double target_scale = 0.0;
  double achieved_scale = 0.0;
  StructureMask mask;
};

struct CandidateGrid {
  size_t n = 0;
  double delta = 0.0;  // target-scale spacing
  std::vector<GridEntry> entries;  // ascending scale

  nlohmann::json to_json() const {
    nlohmann::json je = nlohmann::json::array();
    for (const auto& e : entries) {
      nlohmann::json layers = nlohmann::json::array();
      for (const auto& l : e.mask.layers) {
        nlohmann::json jl;
        jl["self_heads"] = StructureMask::bits_to_hex(l.self_heads);
        if (!l.cross_heads.empty())
          jl["cross_heads"] = StructureMask::bits_to_hex(l.cross_heads);
        jl["ffn"] = StructureMask::bits_to_hex(l.ffn);
        layers.push_back(std::move(jl));
      }
      je.push_back({{"target_scale", e.target_scale},
                    {"achieved_scale", e.achieved_scale},
                    {"mask", std::move(layers)}});
    }
    return {{"n", n}, {"delta", delta}, {"entries", std::move(je)}};
  }
};

// Discretize [s_s, ceiling) into n target scales s_s + k*delta and derive
// one nested mask per scale from a single ranked importance table. The
// smallest entry is the student-scale structure; the ceiling (teacher, or
// current assistant when recursing) is excluded.
inline CandidateGrid build_grid(const ParamStore& store, const std::vector<Batch>& batches,
                                double s_s, size_t n,
                                ImportanceLoss<float> loss_fn = task_ce_loss(),
                                RankMode mode = RankMode::Global,
                                const StructureMask* base = nullptr, double ceiling = 1.0) {
  const ModelConfig& cfg = store.config();
  detail::require(s_s > 0.0 && s_s < ceiling,
                  "build_grid: student scale must lie in (0, ceiling)");
  detail::require(n >= 2, "build_grid: n must be >= 2");
  auto table = rank(normalize_scores(importance_scores(store, batches, loss_fn, base)), mode);

  CandidateGrid grid;
  grid.n = n;
  grid.delta = (ceiling - s_s) / double(n);
  for (size_t k = 0; k < n; ++k) {
    GridEntry e;
    e.target_scale = s_s + double(k) * grid.delta;
    e.mask = structure_at_scale(table, cfg, e.target_scale, base);
    e.achieved_scale = scale_of(cfg, e.mask);
    grid.entries.push_back(std::move(e));
  }
  for (size_t i = 0; i + 1 < grid.entries.size(); ++i)
    detail::require(grid.entries[i].mask.subset_of(grid.entries[i + 1].mask),
                    "build_grid: nesting violated between entries " + std::to_string(i) +
                        " and " + std::to_string(i + 1));
  return grid;
}

}  // namespace minidisc
