// Copyright (c) 2026 moelab authors
// SPDX-License-Identifier: Apache-2.0

#include "moelab/manifest.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

namespace moelab {

using nlohmann::json;

std::string to_hex(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

std::string hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "hash_file: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return to_hex(fnv1a64(bytes.data(), bytes.size()));
}

static json refs_to_json(const std::vector<ArtifactRef>& refs) {
  json arr = json::array();
  for (const ArtifactRef& r : refs) {
    arr.push_back({{"role", r.role}, {"path", r.path}, {"hash", r.hash}});
  }
  return arr;
}

static std::vector<ArtifactRef> refs_from_json(const json& arr) {
  std::vector<ArtifactRef> out;
  for (const auto& e : arr) {
    out.push_back(ArtifactRef{e.at("role").get<std::string>(),
                              e.at("path").get<std::string>(),
                              e.at("hash").get<std::string>()});
  }
  return out;
}

void save_manifest(const RunManifest& m, const std::string& path) {
  json doc = {
      {"format", "moelab-manifest-v1"},
      {"command", m.command},
      {"tool_version", m.tool_version},
      {"seed", m.seed},
      {"out_dir", m.out_dir},
      {"config", m.config},
      {"inputs", refs_to_json(m.inputs)},
      {"outputs", refs_to_json(m.outputs)},
  };
  std::ofstream out(path);
  check(out.good(), "save_manifest: cannot open " + path);
  out << doc.dump(2) << "\n";
  out.close();
  check(out.good(), "save_manifest: write failed for " + path);
}

RunManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "load_manifest: cannot open " + path);
  json doc = json::parse(in);
  check(doc.value("format", "") == "moelab-manifest-v1",
        "load_manifest: unrecognized format");
  RunManifest m;
  m.command = doc.at("command").get<std::string>();
  m.tool_version = doc.at("tool_version").get<std::string>();
  m.seed = doc.at("seed").get<std::uint64_t>();
  m.out_dir = doc.at("out_dir").get<std::string>();
  m.config = doc.at("config").get<std::map<std::string, std::string>>();
  m.inputs = refs_from_json(doc.at("inputs"));
  m.outputs = refs_from_json(doc.at("outputs"));
  return m;
}

}  // namespace moelab
