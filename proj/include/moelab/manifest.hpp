// Copyright (c) 2026 moelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Run manifests: every CLI command records its resolved configuration, the
// content hashes of its inputs, and the hashes of everything it wrote.
// `replay` re-runs a manifest into a scratch directory and compares output
// hashes, which is the machine check that artifacts are reconstructible
// from configs + seeds + input hashes alone.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "moelab/common.hpp"

namespace moelab {

inline constexpr const char* kToolVersion = "moelab 1.0.0";

struct ArtifactRef {
  std::string role;  // e.g. "corpus", "model", "sweep_csv"
  std::string path;
  std::string hash;  // fnv1a64 hex of file bytes
};

struct RunManifest {
  std::string command;
  std::string tool_version = kToolVersion;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::map<std::string, std::string> config;  // fully resolved settings
  std::vector<ArtifactRef> inputs;
  std::vector<ArtifactRef> outputs;
};

std::string hash_file(const std::string& path);

void save_manifest(const RunManifest& m, const std::string& path);
RunManifest load_manifest(const std::string& path);

}  // namespace moelab
