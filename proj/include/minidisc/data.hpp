#pragma once

#include "minidisc/model.hpp"
#include "minidisc/rng.hpp"

#include <vector>

namespace minidisc {

struct Example {
  std::vector<int32_t> ids;
  int32_t label = 0;
};

// Fixed-length labeled sequences with disjoint train/dev splits.
struct Dataset {
  size_t len = 0;
  size_t vocab = 0;
  size_t n_classes = 2;
  std::vector<Example> train;
  std::vector<Example> dev;

  Batch gather(const std::vector<Example>& pool, const std::vector<size_t>& idx) const {
    Batch b;
    b.batch = idx.size();
    b.len = len;
    b.ids.reserve(idx.size() * len);
    b.labels.reserve(idx.size());
    for (size_t i : idx) {
      b.ids.insert(b.ids.end(), pool[i].ids.begin(), pool[i].ids.end());
      b.labels.push_back(pool[i].label);
    }
    b.lengths.assign(idx.size(), int32_t(len));
    return b;
  }

  Batch sample_train(Rng& rng, size_t batch_size) const {
    detail::require(!train.empty(), "Dataset: empty training split");
    std::vector<size_t> idx(batch_size);
    for (auto& i : idx) i = size_t(rng.below(train.size()));
    return gather(train, idx);
  }

  std::vector<Batch> batches(const std::vector<Example>& pool, size_t batch_size) const {
    std::vector<Batch> out;
    for (size_t start = 0; start < pool.size(); start += batch_size) {
      std::vector<size_t> idx;
      for (size_t i = start; i < std::min(start + batch_size, pool.size()); ++i) idx.push_back(i);
      out.push_back(gather(pool, idx));
    }
    return out;
  }

  std::vector<Batch> dev_batches(size_t batch_size) const { return batches(dev, batch_size); }

  // Deterministic scoring batches drawn from the front of the training split.
  std::vector<Batch> scoring_batches(size_t count, size_t batch_size) const {
    std::vector<Batch> out;
    Rng rng(0x5c071ULL);
    for (size_t b = 0; b < count; ++b) {
      std::vector<size_t> idx(batch_size);
      for (auto& i : idx) i = size_t(rng.below(train.size()));
      out.push_back(gather(train, idx));
    }
    return out;
  }
};

}  // namespace minidisc
