// Copyright (c) 2026 moelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Pretraining on translation episodes plus the two post-pruning recovery
// regimes: supervised fine-tuning on reference pairs and sequence-level
// distillation on teacher-generated targets. One Adam loop underlies all
// three; they differ only in how a batch of episodes is drawn.
//
// Loss per episode: masked next-token cross entropy over the target segment
// plus EOS, plus alpha times the switch-style load-balance penalty averaged
// over layers. Batch loss is the unweighted episode mean. Expert selection
// is treated as piecewise constant: gradients flow through the selected-K
// softmax weights and the selected experts; with alpha = 0 untouched
// experts receive exactly zero gradient.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "moelab/corpus.hpp"
#include "moelab/degeneration.hpp"
#include "moelab/model.hpp"

namespace moelab {

using Direction = std::pair<int, int>;  // (src_lang, tgt_lang)

// Defaults are the pinned parent recipe: on the default 8-language corpus it
// reaches exact-match 1.0 on every trained direction (verified at bring-up).
// The task's hard part — the variable-offset source/target alignment — needs
// the low-noise gradient of batch 32 and the long constant-then-cosine lr
// tail; hotter or shorter recipes stall at the "right language block, wrong
// concept" plateau (task loss ~ln 64).
struct TrainConfig {
  int steps = 12000;
  int batch_size = 32;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double aux_alpha = 0.01;
  double clip_norm = 5.0;
  bool cosine_decay = true;
  std::uint64_t seed = 0;

  void validate() const {
    check(steps >= 0, "train config: steps must be nonnegative");
    check(batch_size >= 1, "train config: batch size must be positive");
    check(lr > 0 && beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1 && eps > 0,
          "train config: optimizer constants out of range");
    check(aux_alpha >= 0, "train config: alpha must be nonnegative");
    check(clip_norm > 0, "train config: clip norm must be positive");
  }
};

struct LossPoint {
  int step;
  double task_loss;
  double aux_loss;
  double grad_norm;
};

// All pivot->X and X->pivot pairs for the non-pivot languages.
inline std::vector<Direction> default_train_directions(int n_langs) {
  std::vector<Direction> dirs;
  for (int x = 1; x < n_langs; ++x) {
    dirs.push_back({0, x});
    dirs.push_back({x, 0});
  }
  return dirs;
}

// Load-balance value on a captured trace (full router probabilities
// required): E_l * sum_e f_e * P_e with f_e the per-K-normalized selection
// frequency and P_e the mean full-softmax probability of expert e.
template <typename S>
double aux_load_balance(const RoutingTrace<S>& trace, int layer) {
  check(trace.n_tokens >= 1, "aux_load_balance: empty trace");
  check(layer >= 0 && layer < trace.n_layers, "aux_load_balance: bad layer");
  check(trace.has_full_probs, "aux_load_balance: trace lacks full probabilities");
  const Mat<S>& probs = trace.full_probs[layer];
  const int n_exp = static_cast<int>(probs.cols());
  const int n_tok = trace.n_tokens;
  std::vector<double> count(n_exp, 0.0);
  for (int i = 0; i < n_tok; ++i) {
    for (int e : trace.indices[layer][i]) count[e] += 1.0;
  }
  double value = 0.0;
  for (int e = 0; e < n_exp; ++e) {
    const double f = count[e] / n_tok / trace.k;
    const double p = probs.col(e).template cast<double>().mean();
    value += f * p;
  }
  return n_exp * value;
}

namespace detail {

// Next-token framing: input drops the last token, targets/mask shift by one.
struct NextTokenView {
  std::vector<int> input;
  std::vector<int> targets;
  std::vector<bool> mask;
};

inline NextTokenView next_token_view(const TranslationEpisode& ep) {
  const int t = static_cast<int>(ep.tokens.size());
  check(t >= 2, "episode too short for next-token training");
  NextTokenView v;
  v.input.assign(ep.tokens.begin(), ep.tokens.end() - 1);
  v.targets.assign(ep.tokens.begin() + 1, ep.tokens.end());
  v.mask.assign(ep.loss_mask.begin() + 1, ep.loss_mask.end());
  return v;
}

// Selection frequencies f_e for the balance penalty, from selected indices.
template <typename S>
RowVec<S> selection_freq(const std::vector<std::vector<int>>& indices, int n_exp, int k) {
  RowVec<S> f = RowVec<S>::Zero(n_exp);
  for (const auto& row : indices) {
    for (int e : row) f[e] += S(1);
  }
  const S denom = static_cast<S>(indices.size()) * static_cast<S>(k);
  f /= denom;
  return f;
}

}  // namespace detail

// Episode loss on the tape. Returns the combined scalar plus the raw pieces
// for logging.
template <typename S>
struct EpisodeLoss {
  Var total;
  double task_value;
  double aux_value;
};

template <typename S>
EpisodeLoss<S> episode_loss(Tape<S>& t, const CheckpointVars& vars,
                            const ModelConfig& cfg, const TranslationEpisode& ep,
                            double alpha) {
  const auto view = detail::next_token_view(ep);
  const bool want_probs = alpha > 0;
  TapeForward<S> fwd = forward_tape<S>(t, vars, cfg, view.input, want_probs);
  Var ce = cross_entropy_op<S>(t, fwd.logits, view.targets, view.mask);
  EpisodeLoss<S> out;
  out.task_value = static_cast<double>(t.val(ce)(0, 0));
  out.aux_value = 0.0;
  if (!want_probs) {
    out.total = ce;
    return out;
  }
  std::vector<Var> per_layer;
  for (int l = 0; l < cfg.n_layers; ++l) {
    RowVec<S> f = detail::selection_freq<S>(fwd.indices[l], cfg.experts_per_layer[l],
                                            cfg.top_k);
    per_layer.push_back(balance_penalty<S>(t, fwd.full_probs[l], std::move(f)));
  }
  Var aux = scalar_mean<S>(t, per_layer);
  out.aux_value = static_cast<double>(t.val(aux)(0, 0));
  out.total = scalar_axpy<S>(t, ce, aux, static_cast<S>(alpha));
  return out;
}

template <typename S>
struct AdamState {
  std::vector<Mat<S>> m, v;
  long long t = 0;

  static AdamState make(const Checkpoint<S>& c) {
    AdamState st;
    for_each_tensor(c, [&](const std::string&, const Mat<S>& mat) {
      st.m.push_back(Mat<S>::Zero(mat.rows(), mat.cols()));
      st.v.push_back(Mat<S>::Zero(mat.rows(), mat.cols()));
    });
    return st;
  }
};

// One optimizer step from accumulated gradients (canonical tensor order).
// Returns the pre-clip global gradient norm.
template <typename S>
double adam_step(Checkpoint<S>& c, AdamState<S>& st, const std::vector<Mat<S>>& grads,
                 const TrainConfig& cfg, double lr_now) {
  double sq_sum = 0.0;
  for (const Mat<S>& g : grads) sq_sum += static_cast<double>(g.template cast<double>().squaredNorm());
  const double norm = std::sqrt(sq_sum);
  const double scale = norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;

  st.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  int i = 0;
  for_each_tensor(c, [&](const std::string&, Mat<S>& w) {
    Mat<S> g = grads[i] * static_cast<S>(scale);
    Mat<S>& m = st.m[i];
    Mat<S>& v = st.v[i];
    m = static_cast<S>(cfg.beta1) * m + static_cast<S>(1.0 - cfg.beta1) * g;
    v = static_cast<S>(cfg.beta2) * v.array().matrix() +
        static_cast<S>(1.0 - cfg.beta2) * g.array().square().matrix();
    const S step_size = static_cast<S>(lr_now / bc1);
    w.array() -= step_size * m.array() /
                 ((v.array() / static_cast<S>(bc2)).sqrt() + static_cast<S>(cfg.eps));
    ++i;
  });
  return norm;
}

// Core loop: `make_batch(step)` supplies the episodes for each step.
template <typename S>
std::vector<LossPoint> train_core(
    Checkpoint<S>& c, const TrainConfig& cfg,
    const std::function<std::vector<TranslationEpisode>(int)>& make_batch) {
  cfg.validate();
  c.config.validate();
  std::vector<LossPoint> curve;
  if (cfg.steps == 0) return curve;
  AdamState<S> adam = AdamState<S>::make(c);
  const double pi = std::acos(-1.0);

  for (int step = 0; step < cfg.steps; ++step) {
    const double lr_now =
        cfg.cosine_decay
            ? cfg.lr * 0.5 * (1.0 + std::cos(pi * step / static_cast<double>(cfg.steps)))
            : cfg.lr;
    const std::vector<TranslationEpisode> batch = make_batch(step);
    check(!batch.empty(), "train: empty batch");

    Tape<S> tape(true);
    CheckpointVars vars = register_params(tape, c);
    std::vector<Var> losses;
    double task_sum = 0.0, aux_sum = 0.0;
    for (const TranslationEpisode& ep : batch) {
      EpisodeLoss<S> el = episode_loss<S>(tape, vars, c.config, ep, cfg.aux_alpha);
      losses.push_back(el.total);
      task_sum += el.task_value;
      aux_sum += el.aux_value;
    }
    Var loss = scalar_mean<S>(tape, losses);
    const double loss_value = static_cast<double>(tape.val(loss)(0, 0));
    if (!std::isfinite(loss_value)) {
      throw std::runtime_error("training diverged: non-finite loss at step " +
                               std::to_string(step));
    }
    tape.backward(loss);

    std::vector<Mat<S>> grads;
    grads.reserve(vars.all.size());
    for (Var v : vars.all) grads.push_back(tape.grad(v));
    const double gnorm = adam_step<S>(c, adam, grads, cfg, lr_now);
    curve.push_back(LossPoint{step, task_sum / batch.size(), aux_sum / batch.size(), gnorm});
  }
  return curve;
}

// Pretraining: episodes drawn uniformly over (direction, train passage).
template <typename S>
std::vector<LossPoint> train(Checkpoint<S>& c, const ParallelCorpus& corpus,
                             const std::vector<Direction>& directions,
                             const TrainConfig& cfg) {
  check(!directions.empty(), "train: need at least one direction");
  const TokenLayout layout = corpus.layout();
  Rng root(cfg.seed);
  auto make_batch = [&](int step) {
    Rng r = root.fork(static_cast<std::uint64_t>(step));
    std::vector<TranslationEpisode> batch;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const Direction dir = directions[r.below(directions.size())];
      const int pid = static_cast<int>(r.below(corpus.train.size()));
      batch.push_back(make_episode(corpus.train[pid], corpus.languages[dir.first],
                                   corpus.languages[dir.second], layout, pid));
    }
    return batch;
  };
  return train_core<S>(c, cfg, make_batch);
}

// Supervised recovery on reference dev pairs; default directions are
// pivot->X only (X->pivot recovery rides along via transfer).
template <typename S>
std::vector<LossPoint> sft_recover(Checkpoint<S>& c, const ParallelCorpus& corpus,
                                   const std::vector<Direction>& directions,
                                   const TrainConfig& cfg) {
  check(!directions.empty(), "sft_recover: need at least one direction");
  const TokenLayout layout = corpus.layout();
  Rng root(cfg.seed);
  auto make_batch = [&](int step) {
    Rng r = root.fork(static_cast<std::uint64_t>(step));
    std::vector<TranslationEpisode> batch;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const Direction dir = directions[r.below(directions.size())];
      const int pid = static_cast<int>(r.below(corpus.dev.size()));
      batch.push_back(make_episode(corpus.dev[pid], corpus.languages[dir.first],
                                   corpus.languages[dir.second], layout, pid));
    }
    return batch;
  };
  return train_core<S>(c, cfg, make_batch);
}

// --- sequence-level distillation ---------------------------------------------

struct DistillProvenance {
  int passage_id;
  int src_lang;
  int tgt_lang;
};

struct DistillSet {
  std::vector<TranslationEpisode> episodes;
  std::vector<DistillProvenance> provenance;
  int fallback_count = 0;  // degenerate decodes replaced by the reference
};

// Teacher-labeled episodes: passages are split round-robin across target
// languages and the teacher greedy-decodes each pivot->target prompt.
// Degenerate generations fall back to the reference render (and are
// counted), mirroring the calibration-episode policy, so the set always
// covers every requested passage.
template <typename S>
DistillSet build_distill_set(const Checkpoint<S>& teacher, const ParallelCorpus& corpus,
                             const std::vector<int>& passage_ids,
                             const std::string& split_name,
                             const std::vector<int>& target_langs) {
  check(!target_langs.empty(), "build_distill_set: need target languages");
  for (int tl : target_langs) {
    check(tl > 0 && tl < corpus.n_langs, "build_distill_set: bad target language");
  }
  const TokenLayout layout = corpus.layout();
  const std::vector<Passage>& split = corpus.split(split_name);
  DistillSet set;
  for (std::size_t i = 0; i < passage_ids.size(); ++i) {
    const int pid = passage_ids[i];
    check(pid >= 0 && pid < static_cast<int>(split.size()),
          "build_distill_set: passage id out of range");
    const Passage& p = split[pid];
    const int tgt = target_langs[i % target_langs.size()];
    const std::vector<int> prompt =
        make_prompt(p, corpus.languages[0], corpus.languages[tgt], layout);
    const std::vector<int> gen =
        greedy_decode<S>(teacher, prompt, decode_cap(static_cast<int>(p.size())));
    if (detect_degeneration(gen, tgt, layout, static_cast<int>(p.size())) ==
        ErrorKind::ok) {
      // Strip the trailing EOS; the episode assembler re-appends it.
      std::vector<int> target(gen.begin(), gen.end() - 1);
      set.episodes.push_back(make_episode_with_target(
          p, target, corpus.languages[0], corpus.languages[tgt], layout, pid));
    } else {
      ++set.fallback_count;
      set.episodes.push_back(make_episode(p, corpus.languages[0],
                                          corpus.languages[tgt], layout, pid));
    }
    set.provenance.push_back(DistillProvenance{pid, 0, tgt});
  }
  return set;
}

template <typename S>
std::vector<LossPoint> distill_recover(Checkpoint<S>& c, const DistillSet& set,
                                       const TrainConfig& cfg) {
  check(!set.episodes.empty(), "distill_recover: empty distill set");
  Rng root(cfg.seed);
  auto make_batch = [&](int step) {
    Rng r = root.fork(static_cast<std::uint64_t>(step));
    std::vector<TranslationEpisode> batch;
    for (int b = 0; b < cfg.batch_size; ++b) {
      batch.push_back(set.episodes[r.below(set.episodes.size())]);
    }
    return batch;
  };
  return train_core<S>(c, cfg, make_batch);
}

// Loss-curve CSV: step, task_loss, aux_loss, grad_norm.
inline void save_loss_csv(const std::vector<LossPoint>& curve, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  check(f != nullptr, "save_loss_csv: cannot open " + path);
  std::fprintf(f, "step,task_loss,aux_loss,grad_norm\n");
  for (const LossPoint& p : curve) {
    std::fprintf(f, "%d,%.6f,%.6f,%.6f\n", p.step, p.task_loss, p.aux_loss, p.grad_norm);
  }
  std::fclose(f);
}

}  // namespace moelab
