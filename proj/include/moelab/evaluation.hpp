// Copyright (c) 2026 moelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Translation quality measurement and pruning sweeps. Decoding is greedy
// and deterministic; seed variation enters only through evaluation-subset
// resampling. Degenerate generations score zero on exact match and are
// counted per error kind, so exact_match <= 1 - error_rate always holds.

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "moelab/allocation.hpp"
#include "moelab/corpus.hpp"
#include "moelab/degeneration.hpp"
#include "moelab/importance.hpp"
#include "moelab/model.hpp"
#include "moelab/surgeon.hpp"

namespace moelab {

using Direction = std::pair<int, int>;

inline std::string direction_str(Direction d) {
  return "L" + std::to_string(d.first) + ">L" + std::to_string(d.second);
}

struct EvalResult {
  Direction direction{-1, -1};
  double token_acc = 0.0;    // teacher-forced, over masked positions
  double exact_match = 0.0;  // greedy decode equals reference, errors score 0
  double error_rate = 0.0;
  int err_no_eos = 0;
  int err_off_vocab = 0;
  std::uint64_t seed = 0;
  int n_episodes = 0;
};

// Deterministic subset of passage indices: partial Fisher-Yates over the
// split, seeded.
std::vector<int> sample_subset(int split_size, int subset_size, std::uint64_t seed);

EvalResult evaluate(const Checkpoint<float>& c, const ParallelCorpus& corpus,
                    Direction direction, const std::string& split, int subset_size,
                    std::uint64_t seed);

struct SweepRow {
  int k = 0;
  double pct_dropped = 0.0;
  std::string importance_method;
  std::string allocation_method;
  Direction direction{-1, -1};
  std::uint64_t seed = 0;
  double token_acc = 0.0;
  double exact_match = 0.0;
  double error_rate = 0.0;
  int err_no_eos = 0;
  int err_off_vocab = 0;
  bool failed = false;
  std::string error;
};

struct SweepReport {
  std::vector<SweepRow> rows;
  std::string importance_method;
  std::string allocation_method;
  std::string split;
  int subset_size = 0;
};

// For each k: allocate, mask, extract, evaluate every direction x seed.
// A failing grid cell is recorded as failed rows (metrics NaN) and the
// sweep continues. The importance table and divergence profile are built
// once by the caller and reused across the grid.
SweepReport sweep(const Checkpoint<float>& parent, const ParallelCorpus& corpus,
                  const ImportanceTable& table, const DivergenceProfile& profile,
                  const std::string& allocation_method, const std::vector<int>& k_grid,
                  const std::vector<Direction>& directions,
                  const std::vector<std::uint64_t>& seeds, int subset_size,
                  const std::string& split);

void save_sweep_csv(const SweepReport& report, const std::string& path);

struct TransferRow {
  int k = 0;
  Direction direction{-1, -1};
  std::uint64_t seed = 0;
  double exact_match_a = 0.0;  // calibrated pivot->X
  double exact_match_b = 0.0;  // calibrated X->pivot
  double delta = 0.0;          // a - b
};

// Pairs the X->pivot evaluation rows of two sweeps (same grid, directions,
// seeds required) — sweep A calibrated on pivot->X, sweep B on X->pivot.
std::vector<TransferRow> direction_transfer_report(const SweepReport& a,
                                                   const SweepReport& b);

void save_transfer_csv(const std::vector<TransferRow>& rows, const std::string& path);

}  // namespace moelab
