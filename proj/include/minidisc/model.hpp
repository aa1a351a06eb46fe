#pragma once

// Maskable transformer encoder classifier. Attention heads and feed-forward
// neurons are gated by per-structure keep bits; a fully masked module is
// bypassed (input forwarded unchanged). One teacher-shaped parameter store
// serves every candidate subnetwork through its mask.

#include "minidisc/rng.hpp"
#include "minidisc/tensor.hpp"

#include <array>
#include <atomic>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace minidisc {

struct ModelConfig {
  size_t layers = 6;
  size_t heads = 8;
  size_t d_model = 128;
  size_t d_ffn = 512;
  size_t vocab = 64;
  size_t max_len = 32;
  size_t n_classes = 2;
  bool with_cross_attention = false;
  // activation is fixed GELU

  size_t head_dim() const { return d_model / heads; }

  void validate() const {
    detail::require(layers >= 1 && heads >= 1 && d_model >= 1 && d_ffn >= 1 && vocab >= 1 &&
                        max_len >= 1 && n_classes >= 1,
                    "ModelConfig: all extents must be >= 1");
    detail::require(d_model % heads == 0, "ModelConfig: d_model " + std::to_string(d_model) +
                                              " not divisible by heads " + std::to_string(heads));
  }
};

// ---------------------------------------------------------------------------
// structure mask
// ---------------------------------------------------------------------------

// Per-layer 0/1 keep bits for self-attention heads, optional cross-attention
// heads, and feed-forward neurons. Skip flags are derived: a block whose
// bits are all zero is bypassed entirely.
struct StructureMask {
  struct Layer {
    std::vector<uint8_t> self_heads;
    std::vector<uint8_t> cross_heads;  // empty unless the config houses them
    std::vector<uint8_t> ffn;
  };
  std::vector<Layer> layers;

  static StructureMask filled(const ModelConfig& cfg, uint8_t bit) {
    StructureMask m;
    m.layers.resize(cfg.layers);
    for (auto& l : m.layers) {
      l.self_heads.assign(cfg.heads, bit);
      if (cfg.with_cross_attention) l.cross_heads.assign(cfg.heads, bit);
      l.ffn.assign(cfg.d_ffn, bit);
    }
    return m;
  }
  static StructureMask ones(const ModelConfig& cfg) { return filled(cfg, 1); }
  static StructureMask zeros(const ModelConfig& cfg) { return filled(cfg, 0); }

  bool compatible(const ModelConfig& cfg) const {
    if (layers.size() != cfg.layers) return false;
    for (const auto& l : layers) {
      if (l.self_heads.size() != cfg.heads) return false;
      if (l.ffn.size() != cfg.d_ffn) return false;
      if (cfg.with_cross_attention ? l.cross_heads.size() != cfg.heads : !l.cross_heads.empty())
        return false;
    }
    return true;
  }

  static bool all_zero(const std::vector<uint8_t>& bits) {
    for (uint8_t b : bits)
      if (b) return false;
    return true;
  }

  bool skip_attn(size_t layer) const { return all_zero(layers[layer].self_heads); }
  bool skip_cross(size_t layer) const { return all_zero(layers[layer].cross_heads); }
  bool skip_ffn(size_t layer) const { return all_zero(layers[layer].ffn); }

  size_t kept_heads(size_t layer) const {
    size_t n = 0;
    for (uint8_t b : layers[layer].self_heads) n += b ? 1 : 0;
    return n;
  }
  size_t kept_cross(size_t layer) const {
    size_t n = 0;
    for (uint8_t b : layers[layer].cross_heads) n += b ? 1 : 0;
    return n;
  }
  size_t kept_neurons(size_t layer) const {
    size_t n = 0;
    for (uint8_t b : layers[layer].ffn) n += b ? 1 : 0;
    return n;
  }

  // Every kept bit of *this is kept in `other`.
  bool subset_of(const StructureMask& other) const {
    if (layers.size() != other.layers.size()) return false;
    for (size_t l = 0; l < layers.size(); ++l) {
      auto sub = [](const std::vector<uint8_t>& a, const std::vector<uint8_t>& b) {
        if (a.size() != b.size()) return false;
        for (size_t i = 0; i < a.size(); ++i)
          if (a[i] && !b[i]) return false;
        return true;
      };
      if (!sub(layers[l].self_heads, other.layers[l].self_heads)) return false;
      if (!sub(layers[l].cross_heads, other.layers[l].cross_heads)) return false;
      if (!sub(layers[l].ffn, other.layers[l].ffn)) return false;
    }
    return true;
  }

  bool operator==(const StructureMask& other) const {
    if (layers.size() != other.layers.size()) return false;
    for (size_t l = 0; l < layers.size(); ++l) {
      if (layers[l].self_heads != other.layers[l].self_heads) return false;
      if (layers[l].cross_heads != other.layers[l].cross_heads) return false;
      if (layers[l].ffn != other.layers[l].ffn) return false;
    }
    return true;
  }

  // Bit i of a block maps to bit (i % 4) of hex digit (i / 4); digits in
  // ascending structure order.
  static std::string bits_to_hex(const std::vector<uint8_t>& bits) {
    std::string out;
    out.reserve((bits.size() + 3) / 4);
    for (size_t i = 0; i < bits.size(); i += 4) {
      unsigned v = 0;
      for (size_t j = 0; j < 4 && i + j < bits.size(); ++j)
        if (bits[i + j]) v |= 1u << j;
      out.push_back("0123456789abcdef"[v]);
    }
    return out;
  }

  static std::vector<uint8_t> hex_to_bits(const std::string& hex, size_t nbits) {
    std::vector<uint8_t> bits(nbits, 0);
    for (size_t i = 0; i < nbits; ++i) {
      char c = hex.at(i / 4);
      unsigned v = (c >= 'a') ? unsigned(c - 'a' + 10) : unsigned(c - '0');
      bits[i] = (v >> (i % 4)) & 1u;
    }
    return bits;
  }
};

// ---------------------------------------------------------------------------
// parameter store
// ---------------------------------------------------------------------------

// Tracks bytes held by live parameter stores; lets tests assert that
// candidate count never multiplies parameter memory.
struct StoreMemory {
  static std::atomic<int64_t>& current() {
    static std::atomic<int64_t> v{0};
    return v;
  }
  static std::atomic<int64_t>& peak() {
    static std::atomic<int64_t> v{0};
    return v;
  }
  static void add(int64_t bytes) {
    int64_t now = current().fetch_add(bytes) + bytes;
    int64_t p = peak().load();
    while (now > p && !peak().compare_exchange_weak(p, now)) {
    }
  }
  static void sub(int64_t bytes) { current().fetch_sub(bytes); }
  static void reset_peak() { peak().store(current().load()); }
};

template <class T>
struct ParamT {
  std::string name;
  Shape shape;
  std::shared_ptr<std::vector<T>> value;
  std::shared_ptr<std::vector<T>> grad;

  size_t numel() const { return shape_numel(shape); }
  TensorT<T> tensor(bool requires_grad) const {
    return TensorT<T>::leaf(shape, value, requires_grad ? grad : nullptr, requires_grad);
  }
};

template <class T>
class ParamStoreT {
 public:
  ParamStoreT() = default;
  explicit ParamStoreT(ModelConfig cfg) : config_(cfg) {}

  ParamStoreT(const ParamStoreT& other) : config_(other.config_), bytes_(0) {
    params_.reserve(other.params_.size());
    for (const auto& p : other.params_) add(p.name, p.shape, *p.value);
  }
  ParamStoreT& operator=(const ParamStoreT& other) {
    if (this == &other) return *this;
    release();
    config_ = other.config_;
    for (const auto& p : other.params_) add(p.name, p.shape, *p.value);
    return *this;
  }
  ParamStoreT(ParamStoreT&& other) noexcept
      : config_(other.config_), params_(std::move(other.params_)), bytes_(other.bytes_) {
    other.bytes_ = 0;
    other.params_.clear();
  }
  ParamStoreT& operator=(ParamStoreT&& other) noexcept {
    if (this == &other) return *this;
    release();
    config_ = other.config_;
    params_ = std::move(other.params_);
    bytes_ = other.bytes_;
    other.bytes_ = 0;
    other.params_.clear();
    return *this;
  }
  ~ParamStoreT() { release(); }

  const ModelConfig& config() const { return config_; }

  ParamT<T>& add(const std::string& name, Shape shape, std::vector<T> init) {
    detail::require(shape_numel(shape) == init.size(), "param init size mismatch for " + name);
    ParamT<T> p;
    p.name = name;
    p.shape = std::move(shape);
    p.value = std::make_shared<std::vector<T>>(std::move(init));
    p.grad = std::make_shared<std::vector<T>>(p.value->size(), T(0));
    int64_t b = int64_t(p.value->size()) * 2 * int64_t(sizeof(T));
    bytes_ += b;
    StoreMemory::add(b);
    params_.push_back(std::move(p));
    return params_.back();
  }

  ParamT<T>& at(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return p;
    detail::fail("no parameter named " + name);
  }
  const ParamT<T>& at(const std::string& name) const {
    return const_cast<ParamStoreT*>(this)->at(name);
  }
  bool has(const std::string& name) const {
    for (auto& p : params_)
      if (p.name == name) return true;
    return false;
  }

  std::vector<ParamT<T>>& params() { return params_; }
  const std::vector<ParamT<T>>& params() const { return params_; }

  void zero_grads() {
    for (auto& p : params_) std::fill(p.grad->begin(), p.grad->end(), T(0));
  }

  size_t param_floats() const {
    size_t n = 0;
    for (const auto& p : params_) n += p.numel();
    return n;
  }

  void copy_values_from(const ParamStoreT& other) {
    detail::require(params_.size() == other.params_.size(), "store layout mismatch");
    for (size_t i = 0; i < params_.size(); ++i) {
      detail::require(params_[i].name == other.params_[i].name, "store layout mismatch");
      *params_[i].value = *other.params_[i].value;
    }
  }

  template <class U>
  ParamStoreT<U> cast() const {
    ParamStoreT<U> out(config_);
    for (const auto& p : params_) {
      std::vector<U> v(p.value->size());
      for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<U>((*p.value)[i]);
      out.add(p.name, p.shape, std::move(v));
    }
    return out;
  }

 private:
  void release() {
    if (bytes_) StoreMemory::sub(bytes_);
    bytes_ = 0;
    params_.clear();
  }

  ModelConfig config_;
  std::vector<ParamT<T>> params_;
  int64_t bytes_ = 0;
};

using ParamStore = ParamStoreT<float>;

// Weights scaled-normal std 0.02, biases and layer-norm shifts zero, gains
// one; deterministic per seed. The relation projection block ("rel.*") is an
// auxiliary final self-attention used only for relation distillation; it is
// excluded from parameter accounting.
template <class T = float>
ParamStoreT<T> build_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ParamStoreT<T> store(cfg);
  Rng rng(seed);
  constexpr double kInitStd = 0.02;

  auto normal = [&](Shape shape) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal(0.0, kInitStd));
    return v;
  };
  auto zeros = [](Shape shape) { return std::vector<T>(shape_numel(shape), T(0)); };
  auto ones = [](Shape shape) { return std::vector<T>(shape_numel(shape), T(1)); };

  size_t d = cfg.d_model;
  store.add("emb.tok", {cfg.vocab, d}, normal({cfg.vocab, d}));
  store.add("emb.pos", {cfg.max_len, d}, normal({cfg.max_len, d}));
  for (size_t l = 0; l < cfg.layers; ++l) {
    std::string p = "layer" + std::to_string(l) + ".";
    store.add(p + "ln1.g", {d}, ones({d}));
    store.add(p + "ln1.b", {d}, zeros({d}));
    store.add(p + "attn.wq", {d, d}, normal({d, d}));
    store.add(p + "attn.bq", {d}, zeros({d}));
    store.add(p + "attn.wk", {d, d}, normal({d, d}));
    store.add(p + "attn.bk", {d}, zeros({d}));
    store.add(p + "attn.wv", {d, d}, normal({d, d}));
    store.add(p + "attn.bv", {d}, zeros({d}));
    store.add(p + "attn.wo", {d, d}, normal({d, d}));
    store.add(p + "attn.bo", {d}, zeros({d}));
    store.add(p + "ln2.g", {d}, ones({d}));
    store.add(p + "ln2.b", {d}, zeros({d}));
    store.add(p + "ffn.w1", {d, cfg.d_ffn}, normal({d, cfg.d_ffn}));
    store.add(p + "ffn.b1", {cfg.d_ffn}, zeros({cfg.d_ffn}));
    store.add(p + "ffn.w2", {cfg.d_ffn, d}, normal({cfg.d_ffn, d}));
    store.add(p + "ffn.b2", {d}, zeros({d}));
  }
  store.add("cls.ln.g", {d}, ones({d}));
  store.add("cls.ln.b", {d}, zeros({d}));
  store.add("cls.w", {d, cfg.n_classes}, normal({d, cfg.n_classes}));
  store.add("cls.b", {cfg.n_classes}, zeros({cfg.n_classes}));
  // auxiliary relation projections
  store.add("rel.wq", {d, d}, normal({d, d}));
  store.add("rel.bq", {d}, zeros({d}));
  store.add("rel.wk", {d, d}, normal({d, d}));
  store.add("rel.bk", {d}, zeros({d}));
  store.add("rel.wv", {d, d}, normal({d, d}));
  store.add("rel.bv", {d}, zeros({d}));
  return store;
}

// ---------------------------------------------------------------------------
// parameter accounting
// ---------------------------------------------------------------------------

// Transformer parameters surviving under a mask, counted per head/neuron
// slice. Embeddings are reported separately and never pruned; the classifier
// head and the auxiliary relation block belong to neither bucket.
struct ParamCount {
  size_t trm = 0;
  size_t emb = 0;
};

inline ParamCount param_count(const ModelConfig& cfg, const StructureMask& mask) {
  detail::require(mask.compatible(cfg), "param_count: mask incompatible with config");
  size_t d = cfg.d_model, hd = cfg.head_dim();
  ParamCount out;
  out.emb = cfg.vocab * d + cfg.max_len * d;
  // per kept head: q/k/v slices (d*hd weights + hd bias each) and the wo slice (hd*d)
  size_t head_cost = 3 * (d * hd + hd) + hd * d;
  // per kept neuron: w1 column (d) + b1 (1) + w2 row (d)
  size_t neuron_cost = 2 * d + 1;
  for (size_t l = 0; l < cfg.layers; ++l) {
    size_t kh = mask.kept_heads(l);
    if (kh > 0) out.trm += kh * head_cost + d /*bo*/ + 2 * d /*ln1*/;
    size_t kn = mask.kept_neurons(l);
    if (kn > 0) out.trm += kn * neuron_cost + d /*b2*/ + 2 * d /*ln2*/;
  }
  return out;
}

// Transformer-parameter fraction relative to the all-ones structure.
// Embeddings are excluded from scale.
inline double scale_of(const ModelConfig& cfg, const StructureMask& mask) {
  size_t full = param_count(cfg, StructureMask::ones(cfg)).trm;
  size_t kept = param_count(cfg, mask).trm;
  return double(kept) / double(full);
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

struct Batch {
  size_t batch = 0;
  size_t len = 0;
  std::vector<int32_t> ids;      // batch * len
  std::vector<int32_t> lengths;  // batch
  std::vector<int32_t> labels;   // batch (empty when unlabeled)
};

template <class T>
struct ModelOutputsT {
  TensorT<T> logits;       // (batch, n_classes)
  TensorT<T> last_hidden;  // (batch, len, d_model)
  bool has_relations = false;
  std::array<TensorT<T>, 3> relations;  // Q/K/V, each (relation_heads, batch, len, len)
};

using ModelOutputs = ModelOutputsT<float>;

// Optional gradient-carrying gate variables; when present their product with
// the static mask bits is multiplied into head/neuron outputs so that
// backward yields per-structure sensitivities.
template <class T>
struct MaskVarsT {
  struct Layer {
    TensorT<T> self_heads;  // (heads,)
    TensorT<T> ffn;         // (d_ffn,)
  };
  std::vector<Layer> layers;

  static MaskVarsT ones(const ModelConfig& cfg) {
    MaskVarsT mv;
    mv.layers.resize(cfg.layers);
    for (auto& l : mv.layers) {
      auto hv = std::make_shared<std::vector<T>>(cfg.heads, T(1));
      auto hg = std::make_shared<std::vector<T>>(cfg.heads, T(0));
      l.self_heads = TensorT<T>::leaf({cfg.heads}, hv, hg, true);
      auto fv = std::make_shared<std::vector<T>>(cfg.d_ffn, T(1));
      auto fg = std::make_shared<std::vector<T>>(cfg.d_ffn, T(0));
      l.ffn = TensorT<T>::leaf({cfg.d_ffn}, fv, fg, true);
    }
    return mv;
  }
};

using MaskVars = MaskVarsT<float>;

template <class T>
struct ForwardOptionsT {
  bool track_grad = true;
  bool want_relations = false;
  size_t relation_heads = 0;
  MaskVarsT<T>* mask_vars = nullptr;
};

using ForwardOptions = ForwardOptionsT<float>;

template <class T>
ModelOutputsT<T> forward(const ParamStoreT<T>& store, const StructureMask& mask,
                         const Batch& batch, const ForwardOptionsT<T>& opts = {}) {
  const ModelConfig& cfg = store.config();
  detail::require(mask.compatible(cfg), "forward: mask incompatible with config (layers=" +
                                            std::to_string(mask.layers.size()) + ")");
  detail::require(batch.batch > 0 && batch.len > 0, "forward: empty batch");
  detail::require(batch.len <= cfg.max_len, "forward: sequence length " +
                                                std::to_string(batch.len) + " exceeds max_len " +
                                                std::to_string(cfg.max_len));
  detail::require(batch.ids.size() == batch.batch * batch.len, "forward: ids size mismatch");
  detail::require(batch.lengths.size() == batch.batch, "forward: lengths size mismatch");
  const bool tg = opts.track_grad;

  auto P = [&](const std::string& name) { return store.at(name).tensor(tg); };

  size_t B = batch.batch, L = batch.len, D = cfg.d_model, H = cfg.heads;
  T inv_sqrt_hd = T(1) / std::sqrt(T(cfg.head_dim()));

  // token + learned position embeddings
  std::vector<int32_t> pos_ids(B * L);
  for (size_t b = 0; b < B; ++b)
    for (size_t t = 0; t < L; ++t) pos_ids[b * L + t] = int32_t(t);
  auto x = add(embedding(P("emb.tok"), batch.ids, B, L), embedding(P("emb.pos"), pos_ids, B, L));

  auto mask_vec = [&](const std::vector<uint8_t>& bits) {
    std::vector<T> v(bits.size());
    for (size_t i = 0; i < bits.size(); ++i) v[i] = bits[i] ? T(1) : T(0);
    return TensorT<T>::from_data({bits.size()}, std::move(v));
  };

  for (size_t l = 0; l < cfg.layers; ++l) {
    std::string p = "layer" + std::to_string(l) + ".";
    if (!mask.skip_attn(l)) {
      auto a = layer_norm(x, P(p + "ln1.g"), P(p + "ln1.b"));
      auto q = split_heads(add_bias(matmul(a, P(p + "attn.wq")), P(p + "attn.bq")), H);
      auto k = split_heads(add_bias(matmul(a, P(p + "attn.wk")), P(p + "attn.bk")), H);
      auto v = split_heads(add_bias(matmul(a, P(p + "attn.wv")), P(p + "attn.bv")), H);
      auto scores = scale(matmul(q, transpose_last2(k)), inv_sqrt_hd);
      scores = apply_key_padding(scores, batch.lengths);
      auto ctx = matmul(softmax_lastdim(scores), v);  // (B, H, L, hd)
      TensorT<T> head_gate = mask_vec(mask.layers[l].self_heads);
      if (opts.mask_vars) {
        auto& var = opts.mask_vars->layers[l].self_heads;
        head_gate = mask.kept_heads(l) == cfg.heads ? var : mul(head_gate, var);
      }
      ctx = mul_axis(ctx, head_gate, 1);
      auto o = add_bias(matmul(merge_heads(ctx), P(p + "attn.wo")), P(p + "attn.bo"));
      x = add(x, o);
    }
    if (!mask.skip_ffn(l)) {
      auto a = layer_norm(x, P(p + "ln2.g"), P(p + "ln2.b"));
      auto h = gelu(add_bias(matmul(a, P(p + "ffn.w1")), P(p + "ffn.b1")));
      TensorT<T> ffn_gate = mask_vec(mask.layers[l].ffn);
      if (opts.mask_vars) {
        auto& var = opts.mask_vars->layers[l].ffn;
        ffn_gate = mask.kept_neurons(l) == cfg.d_ffn ? var : mul(ffn_gate, var);
      }
      h = mul_axis(h, ffn_gate, 2);
      auto f = add_bias(matmul(h, P(p + "ffn.w2")), P(p + "ffn.b2"));
      x = add(x, f);
    }
  }

  ModelOutputsT<T> out;
  out.last_hidden = x;
  auto pooled = layer_norm(mean_pool(x, batch.lengths), P("cls.ln.g"), P("cls.ln.b"));
  out.logits = add_bias(matmul(pooled, P("cls.w")), P("cls.b"));

  if (opts.want_relations) {
    size_t r = opts.relation_heads;
    detail::require(r >= 1 && D % r == 0, "forward: relation_heads " + std::to_string(r) +
                                              " must divide projection width " +
                                              std::to_string(D));
    T inv_sqrt_dr = T(1) / std::sqrt(T(D / r));
    const char* names[3][2] = {{"rel.wq", "rel.bq"}, {"rel.wk", "rel.bk"}, {"rel.wv", "rel.bv"}};
    for (int i = 0; i < 3; ++i) {
      auto proj = split_heads(add_bias(matmul(x, P(names[i][0])), P(names[i][1])), r);
      auto s = scale(matmul(proj, transpose_last2(proj)), inv_sqrt_dr);
      s = apply_key_padding(s, batch.lengths);
      out.relations[i] = permute(softmax_lastdim(s), {1, 0, 2, 3});  // (r, B, L, L)
    }
    out.has_relations = true;
  }
  return out;
}

}  // namespace minidisc
