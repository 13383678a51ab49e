#pragma once

// Checkpoint format: a JSON manifest {format_version, config, tensors:[...]}
// plus a sibling binary blob of little-endian IEEE-754 values concatenated in
// manifest order. Blob path = manifest path with its extension replaced by
// ".bin" (or ".bin" appended when there is no extension).

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "conecraft/model.hpp"

namespace conecraft {

inline std::string blob_path_for(const std::string& manifest_path) {
  auto slash = manifest_path.find_last_of('/');
  auto dot = manifest_path.find_last_of('.');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash))
    return manifest_path + ".bin";
  return manifest_path.substr(0, dot) + ".bin";
}

inline nlohmann::json config_to_json(const ModelConfig& cfg) {
  return {{"n_layers", cfg.n_layers},     {"d_model", cfg.d_model},
          {"n_heads", cfg.n_heads},       {"d_mlp", cfg.d_mlp},
          {"vocab_size", cfg.vocab_size}, {"max_seq_len", cfg.max_seq_len},
          {"norm_kind", norm_kind_name(cfg.norm_kind)}, {"seed", cfg.seed}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.d_model = j.at("d_model").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.d_mlp = j.at("d_mlp").get<int>();
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.max_seq_len = j.at("max_seq_len").get<int>();
  cfg.norm_kind = norm_kind_from(j.at("norm_kind").get<std::string>());
  cfg.seed = j.at("seed").get<uint64_t>();
  return cfg;
}

inline void save_checkpoint(const ModelParameters& params,
                            const ModelConfig& cfg, const std::string& path,
                            const std::string& dtype = "f64") {
  if (dtype != "f32" && dtype != "f64")
    throw ContractError("save_checkpoint: dtype must be f32 or f64");
  validate_parameters(params, cfg);
  size_t elem = dtype == "f64" ? 8 : 4;

  nlohmann::json manifest;
  manifest["format_version"] = 1;
  manifest["config"] = config_to_json(cfg);
  auto& tensors = manifest["tensors"] = nlohmann::json::array();

  std::ofstream blob(blob_path_for(path), std::ios::binary);
  if (!blob) throw RuntimeFailure("cannot write blob: " + blob_path_for(path));
  size_t offset = 0;
  for_each_tensor(params, [&](const std::string& name, const Mat& m) {
    size_t count = static_cast<size_t>(m.size());
    tensors.push_back({{"name", name},
                       {"shape", {m.rows(), m.cols()}},
                       {"dtype", dtype},
                       {"byte_offset", offset},
                       {"byte_len", count * elem}});
    // row-major element order, independent of Eigen's internal layout
    for (int i = 0; i < m.rows(); ++i)
      for (int j = 0; j < m.cols(); ++j) {
        if (elem == 8) {
          double v = m(i, j);
          blob.write(reinterpret_cast<const char*>(&v), 8);
        } else {
          float v = static_cast<float>(m(i, j));
          blob.write(reinterpret_cast<const char*>(&v), 4);
        }
      }
    offset += count * elem;
  });
  blob.close();

  std::ofstream mf(path);
  if (!mf) throw RuntimeFailure("cannot write manifest: " + path);
  mf << manifest.dump(2) << "\n";
}

inline std::pair<ModelParameters, ModelConfig> load_checkpoint(
    const std::string& path) {
  std::ifstream mf(path);
  if (!mf) throw RuntimeFailure("cannot read manifest: " + path);
  nlohmann::json manifest = nlohmann::json::parse(mf);
  if (manifest.at("format_version").get<int>() != 1)
    throw RuntimeFailure("checkpoint: unknown format version");
  ModelConfig cfg = config_from_json(manifest.at("config"));
  cfg.validate();

  // Validate the manifest against expected shapes before touching the blob.
  ModelParameters params;
  params.embed.resize(cfg.vocab_size, cfg.d_model);
  params.pos.resize(cfg.max_seq_len, cfg.d_model);
  params.layers.resize(cfg.n_layers);
  for (auto& l : params.layers) {
    l.wq.resize(cfg.d_model, cfg.d_model);
    l.wk.resize(cfg.d_model, cfg.d_model);
    l.wv.resize(cfg.d_model, cfg.d_model);
    l.wo.resize(cfg.d_model, cfg.d_model);
    l.w1.resize(cfg.d_model, cfg.d_mlp);
    l.w2.resize(cfg.d_mlp, cfg.d_model);
    l.attn_gain.resize(1, cfg.d_model);
    l.mlp_gain.resize(1, cfg.d_model);
  }
  params.final_gain.resize(1, cfg.d_model);
  params.unembed.resize(cfg.d_model, cfg.vocab_size);

  std::ifstream blob(blob_path_for(path), std::ios::binary | std::ios::ate);
  if (!blob) throw RuntimeFailure("cannot read blob: " + blob_path_for(path));
  size_t blob_len = static_cast<size_t>(blob.tellg());

  const auto& tensors = manifest.at("tensors");
  size_t idx = 0, expected_end = 0;
  for_each_tensor(params, [&](const std::string& name, Mat& m) {
    if (idx >= tensors.size())
      throw RuntimeFailure("checkpoint: missing tensor " + name);
    const auto& t = tensors[idx++];
    if (t.at("name").get<std::string>() != name)
      throw RuntimeFailure("checkpoint: unexpected tensor order at " + name);
    auto shape = t.at("shape").get<std::vector<long>>();
    if (shape.size() != 2 || shape[0] != m.rows() || shape[1] != m.cols())
      throw RuntimeFailure("checkpoint: shape mismatch for " + name);
    std::string dtype = t.at("dtype").get<std::string>();
    if (dtype != "f32" && dtype != "f64")
      throw RuntimeFailure("checkpoint: unknown dtype for " + name);
    size_t elem = dtype == "f64" ? 8 : 4;
    size_t off = t.at("byte_offset").get<size_t>();
    size_t len = t.at("byte_len").get<size_t>();
    if (len != static_cast<size_t>(m.size()) * elem)
      throw RuntimeFailure("checkpoint: byte length mismatch for " + name);
    expected_end = std::max(expected_end, off + len);
  });
  if (idx != tensors.size())
    throw RuntimeFailure("checkpoint: extra tensors in manifest");
  if (expected_end != blob_len)
    throw RuntimeFailure("checkpoint: blob length mismatch (expected " +
                         std::to_string(expected_end) + ", got " +
                         std::to_string(blob_len) + ")");

  blob.seekg(0);
  idx = 0;
  for_each_tensor(params, [&](const std::string& name, Mat& m) {
    const auto& t = tensors[idx++];
    size_t elem = t.at("dtype").get<std::string>() == "f64" ? 8 : 4;
    blob.seekg(static_cast<std::streamoff>(t.at("byte_offset").get<size_t>()));
    std::vector<char> buf(static_cast<size_t>(m.size()) * elem);
    blob.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!blob) throw RuntimeFailure("checkpoint: short read for " + name);
    size_t p = 0;
    for (int i = 0; i < m.rows(); ++i)
      for (int j = 0; j < m.cols(); ++j) {
        if (elem == 8) {
          double v;
          std::memcpy(&v, buf.data() + p * 8, 8);
          m(i, j) = v;
        } else {
          float v;
          std::memcpy(&v, buf.data() + p * 4, 4);
          m(i, j) = v;
        }
        ++p;
      }
  });
  validate_parameters(params, cfg);
  return {std::move(params), cfg};
}

}  // namespace conecraft
