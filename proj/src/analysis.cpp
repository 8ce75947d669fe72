// Copyright (c) 2026 moelab authors
// SPDX-License-Identifier: Apache-2.0

#include "moelab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "moelab/rng.hpp"

namespace moelab {

namespace {

// Global IoU of two or more per-layer retained sets.
double global_iou(const std::vector<const std::vector<std::vector<int>>*>& masks,
                  int n_layers, int n_experts) {
  long inter = 0, uni = 0;
  for (int l = 0; l < n_layers; ++l) {
    std::vector<int> count(n_experts, 0);
    for (const auto* mask : masks) {
      for (int e : (*mask)[l]) {
        check(e >= 0 && e < n_experts, "retained_iou: expert index out of range");
        ++count[e];
      }
    }
    for (int e = 0; e < n_experts; ++e) {
      if (count[e] == static_cast<int>(masks.size())) ++inter;
      if (count[e] > 0) ++uni;
    }
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
}

}  // namespace

IoUPair retained_iou(const std::vector<PruneMask>& masks, int n_experts) {
  check(masks.size() >= 2, "retained_iou: need at least two masks");
  const int n_layers = masks.front().n_layers();
  for (const PruneMask& m : masks) {
    check(m.n_layers() == n_layers, "retained_iou: layer count mismatch");
  }
  IoUPair out;
  int pairs = 0;
  for (std::size_t a = 0; a < masks.size(); ++a) {
    for (std::size_t b = a + 1; b < masks.size(); ++b) {
      out.pairwise += global_iou({&masks[a].retained, &masks[b].retained}, n_layers,
                                 n_experts);
      ++pairs;
    }
  }
  out.pairwise /= pairs;
  std::vector<const std::vector<std::vector<int>>*> all;
  for (const PruneMask& m : masks) all.push_back(&m.retained);
  out.all_n = global_iou(all, n_layers, n_experts);
  return out;
}

IoUPair random_baseline_iou(const std::vector<CapacityPlan>& plans, int n_experts) {
  check(plans.size() >= 2, "random_baseline_iou: need at least two plans");
  const std::size_t n_layers = plans.front().retained.size();
  for (const CapacityPlan& p : plans) {
    check(p.retained.size() == n_layers, "random_baseline_iou: layer count mismatch");
    for (int c : p.retained) {
      check(c >= 0 && c <= n_experts, "random_baseline_iou: capacity out of range");
    }
  }
  const double E = n_experts;

  IoUPair out;
  double pair_sum = 0.0;
  int pairs = 0;
  for (std::size_t a = 0; a < plans.size(); ++a) {
    for (std::size_t b = a + 1; b < plans.size(); ++b) {
      double inter = 0.0, uni = 0.0;
      for (std::size_t l = 0; l < n_layers; ++l) {
        const double ca = plans[a].retained[l];
        const double cb = plans[b].retained[l];
        inter += ca * cb / E;
        uni += ca + cb - ca * cb / E;
      }
      pair_sum += uni == 0 ? 1.0 : inter / uni;
      ++pairs;
    }
  }
  out.pairwise = pair_sum / pairs;

  double inter = 0.0, uni = 0.0;
  for (std::size_t l = 0; l < n_layers; ++l) {
    double p_all = 1.0, p_none = 1.0;
    for (const CapacityPlan& plan : plans) {
      p_all *= plan.retained[l] / E;
      p_none *= 1.0 - plan.retained[l] / E;
    }
    inter += E * p_all;
    uni += E * (1.0 - p_none);
  }
  out.all_n = uni == 0 ? 1.0 : inter / uni;
  return out;
}

MonteCarloIoU monte_carlo_iou(const std::vector<CapacityPlan>& plans, int n_experts,
                              int trials, std::uint64_t seed) {
  check(trials >= 1, "monte_carlo_iou: need at least one trial");
  check(plans.size() >= 2, "monte_carlo_iou: need at least two plans");
  const std::size_t n_layers = plans.front().retained.size();
  Rng root(seed);

  double pw_sum = 0.0, pw_sq = 0.0, an_sum = 0.0, an_sq = 0.0;
  for (int trial = 0; trial < trials; ++trial) {
    Rng rng = root.fork(static_cast<std::uint64_t>(trial));
    std::vector<PruneMask> masks(plans.size());
    for (std::size_t m = 0; m < plans.size(); ++m) {
      masks[m].retained.resize(n_layers);
      for (std::size_t l = 0; l < n_layers; ++l) {
        // Uniform random subset of the given size via partial Fisher-Yates.
        std::vector<int> ids(n_experts);
        for (int e = 0; e < n_experts; ++e) ids[e] = e;
        const int c = plans[m].retained[l];
        for (int i = 0; i < c; ++i) {
          const int j =
              i + static_cast<int>(rng.below(static_cast<std::uint64_t>(n_experts - i)));
          std::swap(ids[i], ids[j]);
        }
        ids.resize(c);
        std::sort(ids.begin(), ids.end());
        masks[m].retained[l] = std::move(ids);
      }
    }
    const IoUPair obs = retained_iou(masks, n_experts);
    pw_sum += obs.pairwise;
    pw_sq += obs.pairwise * obs.pairwise;
    an_sum += obs.all_n;
    an_sq += obs.all_n * obs.all_n;
  }

  MonteCarloIoU out;
  out.trials = trials;
  out.pairwise_mean = pw_sum / trials;
  out.all_n_mean = an_sum / trials;
  if (trials > 1) {
    const double pw_var =
        std::max(0.0, (pw_sq - trials * out.pairwise_mean * out.pairwise_mean) /
                          (trials - 1));
    const double an_var = std::max(
        0.0, (an_sq - trials * out.all_n_mean * out.all_n_mean) / (trials - 1));
    out.pairwise_se = std::sqrt(pw_var / trials);
    out.all_n_se = std::sqrt(an_var / trials);
  }
  return out;
}

double excess_iou(double observed, double random_baseline) {
  check(random_baseline < 1.0, "excess_iou: random baseline must be < 1");
  const double e = (observed - random_baseline) / (1.0 - random_baseline);
  return std::clamp(e, -1.0, 1.0);
}

void save_overlap_csv(const std::vector<OverlapRow>& rows, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  check(f != nullptr, "save_overlap_csv: cannot open " + path);
  std::fprintf(f,
               "k,pct_dropped,pairwise_obs,pairwise_rand,pairwise_excess,"
               "alln_obs,alln_rand,alln_excess\n");
  for (const OverlapRow& r : rows) {
    std::fprintf(f, "%d,%.6g,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.k, r.pct_dropped,
                 r.pairwise_obs, r.pairwise_rand, r.pairwise_excess, r.alln_obs,
                 r.alln_rand, r.alln_excess);
  }
  std::fclose(f);
}

void save_retained_sets_csv(const std::vector<PruneMask>& masks,
                            const std::vector<std::string>& mask_names, int k,
                            const std::string& path) {
  check(masks.size() == mask_names.size(), "save_retained_sets_csv: name mismatch");
  std::FILE* f = std::fopen(path.c_str(), "w");
  check(f != nullptr, "save_retained_sets_csv: cannot open " + path);
  std::fprintf(f, "k,mask,layer,expert\n");
  for (std::size_t m = 0; m < masks.size(); ++m) {
    for (int l = 0; l < masks[m].n_layers(); ++l) {
      for (int e : masks[m].retained[l]) {
        std::fprintf(f, "%d,%s,%d,%d\n", k, mask_names[m].c_str(), l, e);
      }
    }
  }
  std::fclose(f);
}

}  // namespace moelab
