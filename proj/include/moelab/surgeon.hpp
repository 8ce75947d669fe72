// Copyright (c) 2026 moelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Physical expert removal. A PruneMask lists the retained original expert
// indices per layer; extraction slices expert and router parameters to
// those rows, re-indexes densely, and records the original indices in the
// checkpoint's remap so masks from different runs stay comparable.
// Because routing weights are softmaxed over the selected logits only,
// removing experts that were never selected leaves every logit bit-for-bit
// reproducible up to float reassociation — verify_equivalence checks that.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moelab/importance.hpp"
#include "moelab/model.hpp"

namespace moelab {

struct PruneMask {
  std::vector<std::vector<int>> retained;  // per layer, strictly increasing
  std::string importance_method;
  std::string plan_method;
  int k = 0;
  std::uint64_t calibration_hash = 0;

  int n_layers() const { return static_cast<int>(retained.size()); }
};

struct CapacityPlan;  // from allocation.hpp

// Retain the c_l highest-scoring experts per layer (score ties keep the
// lower original index).
PruneMask build_mask(const ImportanceTable& table, const CapacityPlan& plan);

// Slice expert/up/down/router parameters to the retained rows. Non-MoE
// parameters are copied untouched; experts_per_layer and the remap are
// updated. Rejects masks retaining fewer than K experts anywhere.
template <typename S>
Checkpoint<S> extract(const Checkpoint<S>& c, const PruneMask& mask) {
  check(mask.n_layers() == c.config.n_layers, "extract: layer count mismatch");
  const int d = c.config.d_model;
  const int f = c.config.d_ff;
  ModelConfig cfg = c.config;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& keep = mask.retained[l];
    check(static_cast<int>(keep.size()) >= cfg.top_k,
          "extract: layer would retain fewer experts than K");
    for (std::size_t i = 0; i < keep.size(); ++i) {
      check(keep[i] >= 0 && keep[i] < cfg.experts_per_layer[l],
            "extract: retained index out of range");
      check(i == 0 || keep[i] > keep[i - 1], "extract: indices must increase");
    }
    cfg.experts_per_layer[l] = static_cast<int>(keep.size());
  }

  Checkpoint<S> out = make_empty_checkpoint<S>(cfg);
  out.config.init_seed = c.config.init_seed;
  out.emb = c.emb;
  out.pos = c.pos;
  out.g_final = c.g_final;
  out.head = c.head;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerParams<S>& src = c.layers[l];
    LayerParams<S>& dst = out.layers[l];
    dst.Wq = src.Wq;
    dst.Wk = src.Wk;
    dst.Wv = src.Wv;
    dst.Wo = src.Wo;
    dst.g_attn = src.g_attn;
    dst.g_moe = src.g_moe;
    const auto& keep = mask.retained[l];
    for (std::size_t slot = 0; slot < keep.size(); ++slot) {
      const int e = keep[slot];
      dst.router_w.row(static_cast<int>(slot)) = src.router_w.row(e);
      dst.router_b(0, static_cast<int>(slot)) = src.router_b(0, e);
      dst.up.middleRows(static_cast<int>(slot) * d, d) = src.up.middleRows(e * d, d);
      dst.up_b.row(static_cast<int>(slot)) = src.up_b.row(e);
      dst.down.middleRows(static_cast<int>(slot) * f, f) = src.down.middleRows(e * f, f);
      dst.down_b.row(static_cast<int>(slot)) = src.down_b.row(e);
      dst.remap[slot] = src.remap[e];
    }
  }
  return out;
}

struct EquivalenceReport {
  double max_logit_deviation = 0.0;  // over uncontaminated tokens
  long outside_mask_tokens = 0;      // tokens whose original top-K hit a drop
  long compared_tokens = 0;
};

// Runs both models on probe token sequences. A token is contaminated once
// it or any earlier token of its sequence routed to a dropped expert (the
// causal stream propagates the difference forward); the deviation bound is
// asserted by callers only over uncontaminated tokens.
EquivalenceReport verify_equivalence(const Checkpoint<float>& original,
                                     const Checkpoint<float>& pruned,
                                     const PruneMask& mask,
                                     const std::vector<std::vector<int>>& probes);

// Mask JSON round trip (k, methods, per-layer retained arrays, hashes).
void save_mask(const PruneMask& mask, const std::string& path);
PruneMask load_mask(const std::string& path);

}  // namespace moelab
