// Copyright (c) 2026 moelab authors
// SPDX-License-Identifier: Apache-2.0

#include "moelab/surgeon.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include "json.hpp"
#include "moelab/allocation.hpp"

namespace moelab {

using nlohmann::json;

PruneMask build_mask(const ImportanceTable& table, const CapacityPlan& plan) {
  check(table.n_layers() == static_cast<int>(plan.retained.size()),
        "build_mask: table and plan disagree on layer count");
  PruneMask mask;
  mask.importance_method = table.method;
  mask.plan_method = plan.method;
  mask.k = plan.k;
  mask.calibration_hash = table.spec_hash;
  for (int l = 0; l < table.n_layers(); ++l) {
    const RowVec<double>& scores = table.scores[l];
    const int c_l = plan.retained[l];
    check(c_l >= 1 && c_l <= scores.size(), "build_mask: capacity out of range");
    std::vector<int> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      if (scores[a] != scores[b]) return scores[a] > scores[b];
      return a < b;
    });
    std::vector<int> keep(order.begin(), order.begin() + c_l);
    std::sort(keep.begin(), keep.end());
    mask.retained.push_back(std::move(keep));
  }
  return mask;
}

EquivalenceReport verify_equivalence(const Checkpoint<float>& original,
                                     const Checkpoint<float>& pruned,
                                     const PruneMask& mask,
                                     const std::vector<std::vector<int>>& probes) {
  check(mask.n_layers() == original.config.n_layers,
        "verify_equivalence: mask does not fit the original");
  // Dropped original indices per layer.
  std::vector<std::set<int>> dropped(mask.n_layers());
  for (int l = 0; l < mask.n_layers(); ++l) {
    std::set<int> keep(mask.retained[l].begin(), mask.retained[l].end());
    for (int e = 0; e < original.config.experts_per_layer[l]; ++e) {
      if (!keep.count(e)) dropped[l].insert(e);
    }
  }

  EquivalenceReport report;
  for (const std::vector<int>& probe : probes) {
    InferResult<float> orig = forward_infer<float>(original, probe, CaptureOptions{});
    InferResult<float> prun = forward_infer<float>(pruned, probe);
    bool contaminated = false;
    for (int i = 0; i < static_cast<int>(probe.size()); ++i) {
      bool hits_drop = false;
      for (int l = 0; l < mask.n_layers() && !hits_drop; ++l) {
        for (int e : orig.trace.indices[l][i]) {
          if (dropped[l].count(e)) {
            hits_drop = true;
            break;
          }
        }
      }
      if (hits_drop) ++report.outside_mask_tokens;
      contaminated = contaminated || hits_drop;
      if (!contaminated) {
        const double dev =
            (orig.logits.row(i) - prun.logits.row(i)).cwiseAbs().maxCoeff();
        report.max_logit_deviation = std::max(report.max_logit_deviation, dev);
        ++report.compared_tokens;
      }
    }
  }
  return report;
}

void save_mask(const PruneMask& mask, const std::string& path) {
  json retained = json::array();
  for (const auto& keep : mask.retained) retained.push_back(keep);
  json doc = {
      {"format", "moelab-mask-v1"},
      {"k", mask.k},
      {"importance_method", mask.importance_method},
      {"plan_method", mask.plan_method},
      {"calibration_hash", to_hex(mask.calibration_hash)},
      {"retained", retained},
  };
  std::ofstream out(path);
  check(out.good(), "save_mask: cannot open " + path);
  out << doc.dump(2) << "\n";
}

PruneMask load_mask(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "load_mask: cannot open " + path);
  json doc = json::parse(in);
  check(doc.value("format", "") == "moelab-mask-v1", "load_mask: bad format");
  PruneMask mask;
  mask.k = doc.at("k").get<int>();
  mask.importance_method = doc.at("importance_method").get<std::string>();
  mask.plan_method = doc.at("plan_method").get<std::string>();
  mask.calibration_hash =
      std::stoull(doc.at("calibration_hash").get<std::string>(), nullptr, 16);
  for (const auto& row : doc.at("retained")) {
    mask.retained.push_back(row.get<std::vector<int>>());
  }
  return mask;
}

}  // namespace moelab
