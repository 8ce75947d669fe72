// Copyright (c) 2026 moelab authors
// SPDX-License-Identifier: Apache-2.0

#include "moelab/importance.hpp"

#include <cstdio>
#include <fstream>

#include "json.hpp"
#include "moelab/rng.hpp"

namespace moelab {

using nlohmann::json;

ImportanceTable random_scores(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ImportanceTable table;
  table.method = "random";
  table.spec_hash = seed;
  Rng rng(seed);
  for (int l = 0; l < cfg.n_layers; ++l) {
    RowVec<double> row(cfg.experts_per_layer[l]);
    for (int e = 0; e < cfg.experts_per_layer[l]; ++e) row[e] = rng.uniform();
    table.scores.push_back(std::move(row));
  }
  return table;
}

ImportanceTable invert(const ImportanceTable& table) {
  ImportanceTable out = table;
  out.method = "inverted-" + table.method;
  for (auto& row : out.scores) row = -row;
  return out;
}

ImportanceTable merge_multilingual(const std::vector<ImportanceTable>& tables) {
  check(!tables.empty(), "merge_multilingual: no tables");
  const ImportanceTable& first = tables.front();
  ImportanceTable out;
  out.method = first.method;
  out.scores.resize(first.scores.size());
  for (std::size_t l = 0; l < first.scores.size(); ++l) {
    out.scores[l] = RowVec<double>::Zero(first.scores[l].size());
  }
  std::uint64_t h = fnv1a64("merged");
  for (const ImportanceTable& t : tables) {
    check(t.method == first.method, "merge_multilingual: method mismatch");
    check(t.scores.size() == first.scores.size(), "merge_multilingual: layer mismatch");
    for (std::size_t l = 0; l < t.scores.size(); ++l) {
      check(t.scores[l].size() == first.scores[l].size(),
            "merge_multilingual: expert count mismatch");
      out.scores[l] += t.scores[l];
    }
    h = fnv1a64(&t.spec_hash, sizeof(t.spec_hash), h);
    out.sequence_count += t.sequence_count;
    out.fallback_count += t.fallback_count;
  }
  for (auto& row : out.scores) row /= static_cast<double>(tables.size());
  out.spec_hash = h;
  return out;
}

void save_importance(const ImportanceTable& table, const std::string& csv_path,
                     const std::string& sidecar_path) {
  std::FILE* f = std::fopen(csv_path.c_str(), "w");
  check(f != nullptr, "save_importance: cannot open " + csv_path);
  std::fprintf(f, "layer,expert,score\n");
  for (int l = 0; l < table.n_layers(); ++l) {
    for (int e = 0; e < table.scores[l].size(); ++e) {
      std::fprintf(f, "%d,%d,%.12g\n", l, e, table.scores[l][e]);
    }
  }
  std::fclose(f);

  json sidecar = {
      {"method", table.method},
      {"spec_hash", to_hex(table.spec_hash)},
      {"sequence_count", table.sequence_count},
      {"fallback_count", table.fallback_count},
  };
  std::ofstream out(sidecar_path);
  check(out.good(), "save_importance: cannot open " + sidecar_path);
  out << sidecar.dump(2) << "\n";
}

ImportanceTable load_importance(const std::string& csv_path,
                                const std::string& sidecar_path) {
  std::ifstream side(sidecar_path);
  check(side.good(), "load_importance: cannot open " + sidecar_path);
  json sidecar = json::parse(side);
  ImportanceTable table;
  table.method = sidecar.at("method").get<std::string>();
  table.spec_hash = std::stoull(sidecar.at("spec_hash").get<std::string>(), nullptr, 16);
  table.sequence_count = sidecar.at("sequence_count").get<int>();
  table.fallback_count = sidecar.at("fallback_count").get<int>();

  std::ifstream in(csv_path);
  check(in.good(), "load_importance: cannot open " + csv_path);
  std::string line;
  std::getline(in, line);
  check(line == "layer,expert,score", "load_importance: bad CSV header");
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    int l = 0, e = 0;
    double s = 0;
    check(std::sscanf(line.c_str(), "%d,%d,%lf", &l, &e, &s) == 3,
          "load_importance: bad CSV row: " + line);
    if (l >= static_cast<int>(rows.size())) rows.resize(l + 1);
    check(e == static_cast<int>(rows[l].size()), "load_importance: out-of-order rows");
    rows[l].push_back(s);
  }
  for (auto& r : rows) {
    RowVec<double> row(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) row[i] = r[i];
    table.scores.push_back(std::move(row));
  }
  return table;
}

}  // namespace moelab
