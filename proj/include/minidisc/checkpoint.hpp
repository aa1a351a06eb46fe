#pragma once

// Checkpoint format: an 8-byte little-endian header length, a JSON text
// header listing tensor names/shapes/dtype/byte offsets, then raw
// little-endian 32-bit floats. Round-trips are bit-exact.

#include "minidisc/model.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>
#include <string>

namespace minidisc {

inline void save_store(const ParamStore& store, const std::string& path) {
  nlohmann::json header;
  header["format"] = "minidisc-checkpoint-v1";
  const auto& cfg = store.config();
  header["config"] = {{"layers", cfg.layers},       {"heads", cfg.heads},
                      {"d_model", cfg.d_model},     {"d_ffn", cfg.d_ffn},
                      {"vocab", cfg.vocab},         {"max_len", cfg.max_len},
                      {"n_classes", cfg.n_classes}, {"with_cross_attention", cfg.with_cross_attention}};
  nlohmann::json tensors = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& p : store.params()) {
    tensors.push_back({{"name", p.name},
                       {"shape", p.shape},
                       {"dtype", "f32"},
                       {"offset", offset},
                       {"bytes", p.numel() * sizeof(float)}});
    offset += p.numel() * sizeof(float);
  }
  header["tensors"] = std::move(tensors);
  std::string htext = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  uint64_t hlen = htext.size();
  char lenbuf[8];
  for (int i = 0; i < 8; ++i) lenbuf[i] = char((hlen >> (8 * i)) & 0xff);
  out.write(lenbuf, 8);
  out.write(htext.data(), std::streamsize(htext.size()));
  for (const auto& p : store.params())
    out.write(reinterpret_cast<const char*>(p.value->data()),
              std::streamsize(p.numel() * sizeof(float)));
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

inline ParamStore load_store(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint for reading: " + path);
  char lenbuf[8];
  in.read(lenbuf, 8);
  if (!in) throw std::runtime_error("truncated checkpoint header: " + path);
  uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i) hlen |= uint64_t(uint8_t(lenbuf[i])) << (8 * i);
  std::string htext(hlen, '\0');
  in.read(htext.data(), std::streamsize(hlen));
  if (!in) throw std::runtime_error("truncated checkpoint header: " + path);
  nlohmann::json header = nlohmann::json::parse(htext);
  if (header.value("format", "") != std::string("minidisc-checkpoint-v1"))
    throw std::runtime_error("unrecognized checkpoint format in " + path);

  ModelConfig cfg;
  const auto& jc = header.at("config");
  cfg.layers = jc.at("layers").get<size_t>();
  cfg.heads = jc.at("heads").get<size_t>();
  cfg.d_model = jc.at("d_model").get<size_t>();
  cfg.d_ffn = jc.at("d_ffn").get<size_t>();
  cfg.vocab = jc.at("vocab").get<size_t>();
  cfg.max_len = jc.at("max_len").get<size_t>();
  cfg.n_classes = jc.at("n_classes").get<size_t>();
  cfg.with_cross_attention = jc.at("with_cross_attention").get<bool>();

  ParamStore store(cfg);
  for (const auto& jt : header.at("tensors")) {
    if (jt.at("dtype").get<std::string>() != "f32")
      throw std::runtime_error("unsupported dtype in checkpoint: " + path);
    Shape shape = jt.at("shape").get<Shape>();
    std::vector<float> data(shape_numel(shape));
    in.read(reinterpret_cast<char*>(data.data()), std::streamsize(data.size() * sizeof(float)));
    if (!in) throw std::runtime_error("truncated checkpoint payload: " + path);
    store.add(jt.at("name").get<std::string>(), std::move(shape), std::move(data));
  }
  return store;
}

}  // namespace minidisc
