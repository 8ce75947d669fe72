// Copyright (c) 2026 moelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Per-(layer, expert) importance scoring from routing traces. Calibration
// episodes span the whole sequence — prompt, separator, and the model's own
// generated translation — and every token counts. Aggregation is
// sequence-mean-of-token-means with every episode weighted equally, then an
// unweighted mean across episodes (and across languages when merging), so
// routing-mass rows stay valid distributions.

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "moelab/corpus.hpp"
#include "moelab/degeneration.hpp"
#include "moelab/model.hpp"

namespace moelab {

struct CalibrationSpec {
  std::vector<std::pair<int, int>> directions;  // (src, tgt) language ids
  std::vector<int> passage_ids;                 // indices into the dev split
  bool use_generated_target = true;

  std::uint64_t hash() const {
    std::uint64_t h = fnv1a64("calibration-spec");
    for (const auto& d : directions) {
      h = fnv1a64(&d.first, sizeof(int), h);
      h = fnv1a64(&d.second, sizeof(int), h);
    }
    for (int pid : passage_ids) h = fnv1a64(&pid, sizeof(int), h);
    const int gen = use_generated_target ? 1 : 0;
    return fnv1a64(&gen, sizeof(int), h);
  }
};

struct ImportanceTable {
  std::string method;
  std::vector<RowVec<double>> scores;  // one row per layer, length E_l
  std::uint64_t spec_hash = 0;
  int sequence_count = 0;
  int fallback_count = 0;

  int n_layers() const { return static_cast<int>(scores.size()); }
};

struct CalibrationEpisodes {
  std::vector<TranslationEpisode> episodes;
  int fallback_count = 0;  // degenerate decodes replaced by the reference
};

// Frame each (passage, direction) as prompt + target. With generated
// targets on, the checkpoint greedy-decodes its own translation (matching
// "statistics over the generated translation"); a degenerate decode falls
// back to the reference and is counted.
template <typename S>
CalibrationEpisodes build_calibration_episodes(const ParallelCorpus& corpus,
                                               const CalibrationSpec& spec,
                                               const Checkpoint<S>& c) {
  const TokenLayout layout = corpus.layout();
  CalibrationEpisodes out;
  for (const auto& dir : spec.directions) {
    check(dir.first != dir.second, "calibration: direction must change language");
    check(dir.first >= 0 && dir.first < corpus.n_langs && dir.second >= 0 &&
              dir.second < corpus.n_langs,
          "calibration: bad language id");
    for (int pid : spec.passage_ids) {
      check(pid >= 0 && pid < static_cast<int>(corpus.dev.size()),
            "calibration: passage id outside dev split");
      const Passage& p = corpus.dev[pid];
      const LanguageSpec& src = corpus.languages[dir.first];
      const LanguageSpec& tgt = corpus.languages[dir.second];
      if (!spec.use_generated_target) {
        out.episodes.push_back(make_episode(p, src, tgt, layout, pid));
        continue;
      }
      const std::vector<int> prompt = make_prompt(p, src, tgt, layout);
      const std::vector<int> gen =
          greedy_decode<S>(c, prompt, decode_cap(static_cast<int>(p.size())));
      if (detect_degeneration(gen, tgt.id, layout, static_cast<int>(p.size())) !=
          ErrorKind::ok) {
        ++out.fallback_count;
        out.episodes.push_back(make_episode(p, src, tgt, layout, pid));
        continue;
      }
      std::vector<int> target(gen.begin(), gen.end() - 1);  // EOS re-appended
      out.episodes.push_back(
          make_episode_with_target(p, target, src, tgt, layout, pid));
    }
  }
  return out;
}

namespace detail {

// Shared reduction: per episode, per layer, token-mean of the given
// per-selection value scattered to expert slots; then unweighted episode
// mean. `value(layer, token, slot)` reads trace weights (optionally times
// norms).
template <typename S, typename ValueFn>
ImportanceTable reduce_trace_scores(const std::vector<TranslationEpisode>& episodes,
                                    const Checkpoint<S>& c, bool capture_norms,
                                    ValueFn&& value, const std::string& method,
                                    bool target_only = false) {
  check(!episodes.empty(), "importance: need at least one episode");
  const ModelConfig& cfg = c.config;
  ImportanceTable table;
  table.method = method;
  table.sequence_count = static_cast<int>(episodes.size());
  table.scores.resize(cfg.n_layers);
  for (int l = 0; l < cfg.n_layers; ++l) {
    table.scores[l] = RowVec<double>::Zero(cfg.experts_per_layer[l]);
  }
  CaptureOptions capture;
  capture.norms = capture_norms;
  for (const TranslationEpisode& ep : episodes) {
    InferResult<S> res = forward_infer<S>(c, ep.tokens, capture);
    const RoutingTrace<S>& trace = res.trace;
    std::vector<int> token_ids;
    for (int i = 0; i < trace.n_tokens; ++i) {
      if (!target_only || ep.loss_mask[i]) token_ids.push_back(i);
    }
    check(!token_ids.empty(), "importance: episode has no scored tokens");
    for (int l = 0; l < cfg.n_layers; ++l) {
      RowVec<double> acc = RowVec<double>::Zero(cfg.experts_per_layer[l]);
      for (int i : token_ids) {
        for (int j = 0; j < trace.k; ++j) {
          acc[trace.indices[l][i][j]] += value(trace, l, i, j);
        }
      }
      table.scores[l] += acc / static_cast<double>(token_ids.size());
    }
  }
  for (auto& row : table.scores) row /= static_cast<double>(episodes.size());
  return table;
}

}  // namespace detail

// Mean routing weight per (layer, expert); rows sum to 1. Scoring spans the
// whole episode by default; target_only restricts it to the loss-masked
// target segment (ablation flag, default off).
template <typename S>
ImportanceTable routing_mass(const std::vector<TranslationEpisode>& episodes,
                             const Checkpoint<S>& c, bool target_only = false) {
  return detail::reduce_trace_scores<S>(
      episodes, c, /*capture_norms=*/false,
      [](const RoutingTrace<S>& tr, int l, int i, int j) {
        return static_cast<double>(tr.weights[l](i, j));
      },
      "routing-mass", target_only);
}

// REAP-style: mean of routing weight times expert-output L2 norm.
template <typename S>
ImportanceTable norm_weighted(const std::vector<TranslationEpisode>& episodes,
                              const Checkpoint<S>& c, bool target_only = false) {
  return detail::reduce_trace_scores<S>(
      episodes, c, /*capture_norms=*/true,
      [](const RoutingTrace<S>& tr, int l, int i, int j) {
        return static_cast<double>(tr.weights[l](i, j)) *
               static_cast<double>(tr.norms[l](i, j));
      },
      "norm-weighted", target_only);
}

// Baseline: i.i.d. uniform(0,1) scores.
ImportanceTable random_scores(const ModelConfig& cfg, std::uint64_t seed);

// Control: negate scores so the per-layer ranking reverses exactly (ties
// keep original index order under the shared lower-index tie-break).
ImportanceTable invert(const ImportanceTable& table);

// Equal-weight multilingual merge of same-shape, same-method tables.
ImportanceTable merge_multilingual(const std::vector<ImportanceTable>& tables);

// CSV (layer, expert, score) plus JSON sidecar (method, spec hash,
// sequence count, fallback count).
void save_importance(const ImportanceTable& table, const std::string& csv_path,
                     const std::string& sidecar_path);
ImportanceTable load_importance(const std::string& csv_path,
                                const std::string& sidecar_path);

}  // namespace moelab
