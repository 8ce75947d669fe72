// Copyright (c) 2026 moelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Routing-divergence profiles and per-layer capacity allocation. A profile
// scores each layer by the Jensen-Shannon divergence (base 2, so values
// live in [0,1]) between a language's mean routing distribution and the
// pivot's. Allocation turns a profile plus a pruning level k into integer
// retained capacities c_l with sum exactly L*(E-k) and K <= c_l <= E,
// using iterative proportional splitting with overflow return and
// largest-remainder (Hamilton) rounding.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moelab/corpus.hpp"
#include "moelab/matrix.hpp"
#include "moelab/model.hpp"

namespace moelab {

struct DivergenceProfile {
  int lang = -1;          // compared language (pivot is the reference)
  std::vector<double> d;  // per-layer divergence, each in [0,1]
  int passage_count = 0;
};

struct CapacityPlan {
  int k = 0;                  // average experts pruned per layer
  std::vector<int> retained;  // c_l per layer
  std::string method;         // "uniform" | "dynamic" | "inverse-dynamic"
};

// Base-2 Jensen-Shannon divergence between two distributions, with the
// 0*log(0/x) = 0 convention; clamped into [0,1].
double js_divergence(const RowVec<double>& p, const RowVec<double>& q);

// Mean routing distribution per layer of monolingual renderings
// (BOS + language tag + rendering; no translation framing), then the
// passage-mean JS divergence against compare_lang's renderings. Passing
// lang == compare_lang is the debug identity (all zeros).
DivergenceProfile divergence_profile(const Checkpoint<float>& c,
                                     const ParallelCorpus& corpus, int lang,
                                     const std::vector<int>& passage_ids,
                                     int compare_lang = 0);

// Equal-weight mean of per-language profiles.
DivergenceProfile merge_profiles(const std::vector<DivergenceProfile>& profiles);

CapacityPlan allocate_uniform(const ModelConfig& cfg, int k);

// Appendix-style dynamic allocation: start every layer at K, then
// repeatedly split the remaining budget over non-full layers proportional
// to d_l, capping at E and returning overflow, before Hamilton rounding.
// When every non-full layer has zero divergence, the remainder is split
// equally (documented fallback).
CapacityPlan allocate_dynamic(const DivergenceProfile& profile, const ModelConfig& cfg,
                              int k);

// Reflection control: run the dynamic allocator on d' = (max + min) - d.
CapacityPlan allocate_inverse_dynamic(const DivergenceProfile& profile,
                                      const ModelConfig& cfg, int k);

// Largest-remainder rounding: floors, then distribute the remaining units
// by descending fractional part among layers below E (ties to the lower
// layer index). Preserves the integer total C exactly.
std::vector<int> hamilton_round(const std::vector<double>& real_caps, int total,
                                int cap_min, int cap_max);

// Plan CSV: layer, retained, pruned, method, k.
void save_plan(const CapacityPlan& plan, int n_experts, const std::string& path);
CapacityPlan load_plan(const std::string& path);

// Profile CSV: layer, language, d.
void save_profile(const DivergenceProfile& profile, const std::string& path);
DivergenceProfile load_profile(const std::string& path);

}  // namespace moelab
