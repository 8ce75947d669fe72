// Copyright (c) 2026 moelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Retained-set overlap across language-specific prune masks, treating each
// (layer, original-expert) pair as a distinct element. Observed IoU is
// compared against the expected IoU of independent per-layer uniform random
// retention with the same layerwise counts (ratio of expectations, checked
// against a Monte Carlo estimate), and rescaled to excess IoU where 0 is
// random-expected overlap and 1 is perfect agreement.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moelab/allocation.hpp"
#include "moelab/surgeon.hpp"

namespace moelab {

struct IoUPair {
  double pairwise = 0.0;  // mean over unordered mask pairs
  double all_n = 0.0;     // intersection/union over all masks jointly
};

// Global IoU over (layer, expert) pairs; masks must share layer count and
// per-layer expert universe.
IoUPair retained_iou(const std::vector<PruneMask>& masks, int n_experts);

// Analytic random baseline from the plans' per-layer retained counts:
// pairwise per layer E[i] = a*b/E, E[u] = a + b - a*b/E; all-n per layer
// E[i] = E * prod(a_i/E), E[u] = E * (1 - prod(1 - a_i/E)); globally the
// ratio of sums over layers.
IoUPair random_baseline_iou(const std::vector<CapacityPlan>& plans, int n_experts);

struct MonteCarloIoU {
  double pairwise_mean = 0.0;
  double pairwise_se = 0.0;
  double all_n_mean = 0.0;
  double all_n_se = 0.0;
  int trials = 0;
};

MonteCarloIoU monte_carlo_iou(const std::vector<CapacityPlan>& plans, int n_experts,
                              int trials, std::uint64_t seed);

// (observed - random) / (1 - random), clamped to [-1, 1]. Requires random < 1.
double excess_iou(double observed, double random_baseline);

struct OverlapRow {
  int k = 0;
  double pct_dropped = 0.0;
  double pairwise_obs = 0.0;
  double pairwise_rand = 0.0;
  double pairwise_excess = 0.0;
  double alln_obs = 0.0;
  double alln_rand = 0.0;
  double alln_excess = 0.0;
};

void save_overlap_csv(const std::vector<OverlapRow>& rows, const std::string& path);

// One row per retained (mask, layer, expert) triple, for external plotting.
void save_retained_sets_csv(const std::vector<PruneMask>& masks,
                            const std::vector<std::string>& mask_names, int k,
                            const std::string& path);

}  // namespace moelab
