// Copyright (c) 2026 moelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint file layout:
//   [u64 LE header_size][JSON header, header_size bytes][pad to 64][blob]
// The header holds the config (including experts_per_layer and the per-layer
// expert remap) and a tensor directory of (name, shape, dtype, offset,
// nbytes) with offsets relative to the blob start, each 64-byte aligned.
// Blob entries are raw little-endian f32, row-major.

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>

#include "json.hpp"
#include "moelab/model.hpp"

namespace moelab {

using nlohmann::json;

namespace {

constexpr std::uint64_t kAlign = 64;

std::uint64_t align_up(std::uint64_t v) { return (v + kAlign - 1) / kAlign * kAlign; }

}  // namespace

void save_checkpoint(const Checkpoint<float>& c, const std::string& path) {
  c.config.validate();
  json dir = json::array();
  std::uint64_t offset = 0;
  for_each_tensor(c, [&](const std::string& name, const Mat<float>& m) {
    offset = align_up(offset);
    const std::uint64_t nbytes = static_cast<std::uint64_t>(m.size()) * 4;
    dir.push_back({{"name", name},
                   {"shape", json::array({m.rows(), m.cols()})},
                   {"dtype", "f32"},
                   {"offset", offset},
                   {"nbytes", nbytes}});
    offset += nbytes;
  });

  json remap = json::array();
  for (const auto& layer : c.layers) remap.push_back(layer.remap);

  json header = {
      {"format", "moelab-ckpt-v1"},
      {"config",
       {{"n_layers", c.config.n_layers},
        {"experts_per_layer", c.config.experts_per_layer},
        {"top_k", c.config.top_k},
        {"d_model", c.config.d_model},
        {"d_ff", c.config.d_ff},
        {"vocab_size", c.config.vocab_size},
        {"max_seq_len", c.config.max_seq_len},
        {"init_seed", c.config.init_seed}}},
      {"expert_remap", remap},
      {"tensors", dir},
  };
  const std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary);
  check(out.good(), "save_checkpoint: cannot open " + path);
  const std::uint64_t header_size = header_str.size();
  char size_le[8];
  for (int i = 0; i < 8; ++i) size_le[i] = static_cast<char>((header_size >> (8 * i)) & 0xff);
  out.write(size_le, 8);
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  const std::uint64_t blob_start = align_up(8 + header_size);
  for (std::uint64_t p = 8 + header_size; p < blob_start; ++p) out.put('\0');

  std::uint64_t written = 0;
  for_each_tensor(c, [&](const std::string&, const Mat<float>& m) {
    const std::uint64_t target = align_up(written);
    for (; written < target; ++written) out.put('\0');
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(m.size()) * 4);
    written += static_cast<std::uint64_t>(m.size()) * 4;
  });
  out.close();
  check(out.good(), "save_checkpoint: write failed for " + path);
}

Checkpoint<float> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw CheckpointError("load_checkpoint: cannot open " + path);
  std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (raw.size() < 8) throw CheckpointParseError("checkpoint too small for size field");

  std::uint64_t header_size = 0;
  for (int i = 0; i < 8; ++i) {
    header_size |= static_cast<std::uint64_t>(static_cast<unsigned char>(raw[i])) << (8 * i);
  }
  if (8 + header_size > raw.size()) {
    throw CheckpointParseError("header extends past end of file");
  }

  json header;
  try {
    header = json::parse(raw.begin() + 8, raw.begin() + 8 + static_cast<long>(header_size));
  } catch (const json::exception& e) {
    throw CheckpointParseError(std::string("malformed header: ") + e.what());
  }

  ModelConfig cfg;
  json remap;
  json tensors;
  try {
    if (header.at("format").get<std::string>() != "moelab-ckpt-v1") {
      throw CheckpointParseError("unrecognized checkpoint format");
    }
    const json& jc = header.at("config");
    cfg.n_layers = jc.at("n_layers").get<int>();
    cfg.experts_per_layer = jc.at("experts_per_layer").get<std::vector<int>>();
    cfg.top_k = jc.at("top_k").get<int>();
    cfg.d_model = jc.at("d_model").get<int>();
    cfg.d_ff = jc.at("d_ff").get<int>();
    cfg.vocab_size = jc.at("vocab_size").get<int>();
    cfg.max_seq_len = jc.at("max_seq_len").get<int>();
    cfg.init_seed = jc.at("init_seed").get<std::uint64_t>();
    remap = header.at("expert_remap");
    tensors = header.at("tensors");
  } catch (const json::exception& e) {
    throw CheckpointParseError(std::string("missing header field: ") + e.what());
  }

  Checkpoint<float> c;
  try {
    c = make_empty_checkpoint<float>(cfg);
  } catch (const ContractError& e) {
    throw CheckpointParseError(std::string("invalid config: ") + e.what());
  }
  if (remap.size() != static_cast<std::size_t>(cfg.n_layers)) {
    throw CheckpointShapeError("expert_remap layer count mismatch");
  }
  for (int l = 0; l < cfg.n_layers; ++l) {
    auto r = remap.at(l).get<std::vector<int>>();
    if (static_cast<int>(r.size()) != cfg.experts_per_layer[l]) {
      throw CheckpointShapeError("expert_remap length mismatch at layer " +
                                 std::to_string(l));
    }
    c.layers[l].remap = std::move(r);
  }

  // Index directory entries by name, then walk the canonical order.
  std::map<std::string, json> by_name;
  for (const auto& entry : tensors) {
    try {
      by_name[entry.at("name").get<std::string>()] = entry;
    } catch (const json::exception& e) {
      throw CheckpointParseError(std::string("bad tensor entry: ") + e.what());
    }
  }

  const std::uint64_t blob_start = align_up(8 + header_size);
  const std::uint64_t blob_size = raw.size() - std::min<std::uint64_t>(raw.size(), blob_start);
  for_each_tensor(c, [&](const std::string& name, Mat<float>& m) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw CheckpointParseError("tensor missing from directory: " + name);
    }
    const json& entry = it->second;
    std::uint64_t rows, cols, offset, nbytes;
    std::string dtype;
    try {
      rows = entry.at("shape").at(0).get<std::uint64_t>();
      cols = entry.at("shape").at(1).get<std::uint64_t>();
      dtype = entry.at("dtype").get<std::string>();
      offset = entry.at("offset").get<std::uint64_t>();
      nbytes = entry.at("nbytes").get<std::uint64_t>();
    } catch (const json::exception& e) {
      throw CheckpointParseError(std::string("bad tensor entry: ") + e.what());
    }
    if (dtype != "f32") throw CheckpointParseError("unsupported dtype: " + dtype);
    if (rows != static_cast<std::uint64_t>(m.rows()) ||
        cols != static_cast<std::uint64_t>(m.cols()) ||
        nbytes != static_cast<std::uint64_t>(m.size()) * 4) {
      throw CheckpointShapeError("tensor " + name + " shape disagrees with config");
    }
    if (offset % kAlign != 0) {
      throw CheckpointParseError("tensor " + name + " offset not 64-byte aligned");
    }
    if (offset + nbytes > blob_size) {
      throw CheckpointTruncationError("blob truncated at tensor " + name);
    }
    std::memcpy(m.data(), raw.data() + blob_start + offset, nbytes);
  });
  return c;
}

}  // namespace moelab
