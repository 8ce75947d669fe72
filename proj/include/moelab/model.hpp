// Copyright (c) 2026 moelab authors
// SPDX-License-Identifier: Apache-2.0
//
// The toy MoE decoder: token+position embedding, n_layers blocks of
// (pre-norm causal single-head attention + pre-norm MoE feed-forward, both
// residual), final norm, tied-nothing linear head.
//
// Routing per layer: logits z = h * Wr^T + br over E_l experts; the top-K
// logits (ties to the lower index) are selected and their weights are the
// softmax over the K selected logits only. That normalization choice makes
// physical removal of never-selected experts exactly output-preserving,
// which the surgeon module's equivalence verifier relies on.
//
// Two forward paths share one operation order: forward_tape builds the
// autodiff graph for training, forward_infer is the lean value-only path
// for decoding and capture. A unit test pins them bit-identical.

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "moelab/common.hpp"
#include "moelab/matrix.hpp"
#include "moelab/rng.hpp"
#include "moelab/tape.hpp"

namespace moelab {

struct ModelConfig {
  int n_layers = 6;
  std::vector<int> experts_per_layer;  // E_l, one per layer
  int top_k = 2;
  int d_model = 64;
  int d_ff = 128;
  int vocab_size = 0;
  int max_seq_len = 64;
  std::uint64_t init_seed = 0;

  static ModelConfig toy_default(int vocab) {
    ModelConfig cfg;
    cfg.experts_per_layer.assign(cfg.n_layers, 16);
    cfg.vocab_size = vocab;
    return cfg;
  }

  void validate() const {
    check(n_layers >= 1, "config: need at least one layer");
    check(static_cast<int>(experts_per_layer.size()) == n_layers,
          "config: experts_per_layer length must equal n_layers");
    check(top_k >= 1, "config: K must be at least 1");
    for (int e : experts_per_layer) {
      check(e >= top_k, "config: every layer needs E_l >= K");
    }
    check(d_model >= 1 && d_ff >= 1, "config: widths must be positive");
    check(vocab_size >= 5, "config: vocabulary too small");
    check(max_seq_len >= 2, "config: max sequence length too small");
  }
};

template <typename S>
struct LayerParams {
  Mat<S> Wq, Wk, Wv, Wo;        // [d x d] each
  Mat<S> g_attn, g_moe;         // [1 x d] RMS-norm gains
  Mat<S> router_w;              // [E x d]
  Mat<S> router_b;              // [1 x E]
  Mat<S> up;                    // [(E*d) x f], row block e = expert e's up proj
  Mat<S> up_b;                  // [E x f]
  Mat<S> down;                  // [(E*f) x d]
  Mat<S> down_b;                // [E x d]
  std::vector<int> remap;       // original expert id per retained slot
};

template <typename S>
struct Checkpoint {
  ModelConfig config;
  Mat<S> emb;      // [V x d]
  Mat<S> pos;      // [max_seq x d]
  std::vector<LayerParams<S>> layers;
  Mat<S> g_final;  // [1 x d]
  Mat<S> head;     // [V x d]; logits = h * head^T
};

// Canonical tensor enumeration. Everything that walks all parameters
// (init, Adam, IO, leaf registration, counting) uses this one order.
template <typename S, typename F>
void for_each_tensor(Checkpoint<S>& c, F&& f) {
  f("emb", c.emb);
  f("pos", c.pos);
  for (int l = 0; l < c.config.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerParams<S>& lp = c.layers[l];
    f(p + "Wq", lp.Wq);
    f(p + "Wk", lp.Wk);
    f(p + "Wv", lp.Wv);
    f(p + "Wo", lp.Wo);
    f(p + "g_attn", lp.g_attn);
    f(p + "g_moe", lp.g_moe);
    f(p + "router_w", lp.router_w);
    f(p + "router_b", lp.router_b);
    f(p + "up", lp.up);
    f(p + "up_b", lp.up_b);
    f(p + "down", lp.down);
    f(p + "down_b", lp.down_b);
  }
  f("g_final", c.g_final);
  f("head", c.head);
}

template <typename S, typename F>
void for_each_tensor(const Checkpoint<S>& c, F&& f) {
  for_each_tensor(const_cast<Checkpoint<S>&>(c),
                  [&](const std::string& name, Mat<S>& m) {
                    f(name, static_cast<const Mat<S>&>(m));
                  });
}

// Number of tensors in the canonical enumeration.
inline int tensor_count(const ModelConfig& cfg) { return 4 + 12 * cfg.n_layers; }

template <typename S>
Checkpoint<S> make_empty_checkpoint(const ModelConfig& cfg) {
  cfg.validate();
  Checkpoint<S> c;
  c.config = cfg;
  const int d = cfg.d_model;
  const int f = cfg.d_ff;
  c.emb = Mat<S>::Zero(cfg.vocab_size, d);
  c.pos = Mat<S>::Zero(cfg.max_seq_len, d);
  c.layers.resize(cfg.n_layers);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const int e = cfg.experts_per_layer[l];
    LayerParams<S>& lp = c.layers[l];
    lp.Wq = Mat<S>::Zero(d, d);
    lp.Wk = Mat<S>::Zero(d, d);
    lp.Wv = Mat<S>::Zero(d, d);
    lp.Wo = Mat<S>::Zero(d, d);
    lp.g_attn = Mat<S>::Zero(1, d);
    lp.g_moe = Mat<S>::Zero(1, d);
    lp.router_w = Mat<S>::Zero(e, d);
    lp.router_b = Mat<S>::Zero(1, e);
    lp.up = Mat<S>::Zero(e * d, f);
    lp.up_b = Mat<S>::Zero(e, f);
    lp.down = Mat<S>::Zero(e * f, d);
    lp.down_b = Mat<S>::Zero(e, d);
    lp.remap.resize(e);
    for (int i = 0; i < e; ++i) lp.remap[i] = i;
  }
  c.g_final = Mat<S>::Zero(1, d);
  c.head = Mat<S>::Zero(cfg.vocab_size, d);
  return c;
}

template <typename S>
long long param_count(const Checkpoint<S>& c) {
  long long n = 0;
  for_each_tensor(c, [&](const std::string&, const Mat<S>& m) { n += m.size(); });
  return n;
}

template <typename S>
long long expert_param_count(const Checkpoint<S>& c) {
  long long n = 0;
  for_each_tensor(c, [&](const std::string& name, const Mat<S>& m) {
    if (name.find(".up") != std::string::npos ||
        name.find(".down") != std::string::npos) {
      n += m.size();
    }
  });
  return n;
}

// Deterministic initialization: gains 1, biases 0, weight matrices uniform
// on (-1/sqrt(fan_in), 1/sqrt(fan_in)); fan_in is d_ff for down projections
// and d_model everywhere else. Fill order is the canonical tensor order,
// row-major within each tensor.
template <typename S>
Checkpoint<S> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  Checkpoint<S> c = make_empty_checkpoint<S>(cfg);
  c.config.init_seed = seed;
  Rng rng(seed);
  for_each_tensor(c, [&](const std::string& name, Mat<S>& m) {
    if (name.find("g_attn") != std::string::npos ||
        name.find("g_moe") != std::string::npos || name == "g_final") {
      m.setConstant(S(1));
      return;
    }
    if (name.ends_with("_b")) {
      m.setZero();
      return;
    }
    const bool is_down = name.ends_with(".down");
    const double fan_in = is_down ? cfg.d_ff : cfg.d_model;
    const double scale = 1.0 / std::sqrt(fan_in);
    for (int i = 0; i < m.rows(); ++i) {
      for (int j = 0; j < m.cols(); ++j) {
        m(i, j) = static_cast<S>(rng.uniform(-scale, scale));
      }
    }
  });
  return c;
}

template <typename To, typename From>
Checkpoint<To> convert_checkpoint(const Checkpoint<From>& src) {
  Checkpoint<To> dst = make_empty_checkpoint<To>(src.config);
  for (int l = 0; l < src.config.n_layers; ++l) dst.layers[l].remap = src.layers[l].remap;
  // Zip the two canonical enumerations positionally.
  std::vector<Mat<To>*> dst_ptrs;
  for_each_tensor(dst, [&](const std::string&, Mat<To>& m) { dst_ptrs.push_back(&m); });
  int i = 0;
  for_each_tensor(src, [&](const std::string&, const Mat<From>& m) {
    *dst_ptrs[i++] = m.template cast<To>();
  });
  return dst;
}

// --- routing capture --------------------------------------------------------

struct CaptureOptions {
  bool norms = false;       // per-selected-expert output L2 norms
  bool full_probs = false;  // full-softmax router probabilities per token
};

template <typename S>
struct RoutingTrace {
  int n_layers = 0;
  int n_tokens = 0;
  int k = 0;
  std::vector<std::vector<std::vector<int>>> indices;  // [L][t][K], ascending
  std::vector<Mat<S>> weights;                         // [L] of [t x K]
  std::vector<Mat<S>> norms;                           // iff has_norms
  std::vector<Mat<S>> full_probs;                      // iff has_full_probs
  bool has_norms = false;
  bool has_full_probs = false;
};

template <typename S>
struct InferResult {
  Mat<S> logits;  // [t x V]
  RoutingTrace<S> trace;
  bool has_trace = false;
};

namespace detail {

// Value helpers shared in spirit by both forward paths; the tape ops use
// the same expressions so results stay bit-identical.
template <typename S>
Mat<S> rmsnorm_value(const Mat<S>& X, const Mat<S>& G, S eps) {
  const int cols = static_cast<int>(X.cols());
  Mat<S> inv_rms(X.rows(), 1);
  for (int i = 0; i < X.rows(); ++i) {
    inv_rms(i, 0) =
        S(1) / std::sqrt(X.row(i).squaredNorm() / static_cast<S>(cols) + eps);
  }
  return (X.array().colwise() * inv_rms.col(0).array()).rowwise() *
         G.row(0).array();
}

template <typename S>
Mat<S> causal_softmax_value(const Mat<S>& Z) {
  const int n = static_cast<int>(Z.rows());
  Mat<S> P = Mat<S>::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    RowVec<S> head = Z.row(i).head(i + 1);
    P.row(i).head(i + 1) = softmax<S>(head);
  }
  return P;
}

}  // namespace detail

inline constexpr double kRmsEps = 1e-5;

// Value-only forward pass; optionally captures the routing trace.
template <typename S>
InferResult<S> forward_infer(const Checkpoint<S>& c, const std::vector<int>& tokens,
                             std::optional<CaptureOptions> capture = std::nullopt) {
  const ModelConfig& cfg = c.config;
  const int t = static_cast<int>(tokens.size());
  check(t >= 1, "forward: empty input");
  check(t <= cfg.max_seq_len, "forward: input exceeds max sequence length");
  const int d = cfg.d_model;
  const int f = cfg.d_ff;
  const S scale = S(1) / std::sqrt(static_cast<S>(d));
  const S eps = static_cast<S>(kRmsEps);

  InferResult<S> result;
  RoutingTrace<S>& trace = result.trace;
  if (capture) {
    result.has_trace = true;
    trace.n_layers = cfg.n_layers;
    trace.n_tokens = t;
    trace.k = cfg.top_k;
    trace.indices.resize(cfg.n_layers);
    trace.weights.resize(cfg.n_layers);
    trace.has_norms = capture->norms;
    trace.has_full_probs = capture->full_probs;
    if (capture->norms) trace.norms.resize(cfg.n_layers);
    if (capture->full_probs) trace.full_probs.resize(cfg.n_layers);
  }

  Mat<S> h(t, d);
  for (int i = 0; i < t; ++i) {
    check(tokens[i] >= 0 && tokens[i] < cfg.vocab_size, "forward: token id out of range");
    h.row(i) = c.emb.row(tokens[i]) + c.pos.row(i);
  }

  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerParams<S>& lp = c.layers[l];
    const int e_l = cfg.experts_per_layer[l];

    // Attention sublayer.
    Mat<S> a_in = detail::rmsnorm_value<S>(h, lp.g_attn, eps);
    Mat<S> q = a_in * lp.Wq.transpose();
    Mat<S> k = a_in * lp.Wk.transpose();
    Mat<S> v = a_in * lp.Wv.transpose();
    Mat<S> scores = scale * (q * k.transpose());
    Mat<S> attn_p = detail::causal_softmax_value<S>(scores);
    Mat<S> attn = attn_p * v;
    Mat<S> attn_out = attn * lp.Wo.transpose();
    h = h + attn_out;

    // MoE sublayer.
    Mat<S> m_in = detail::rmsnorm_value<S>(h, lp.g_moe, eps);
    Mat<S> z = (m_in * lp.router_w.transpose()).rowwise() + lp.router_b.row(0);
    std::vector<std::vector<int>> idx(t);
    Mat<S> w(t, cfg.top_k);
    for (int i = 0; i < t; ++i) {
      idx[i] = top_k<S>(RowVec<S>(z.row(i)), cfg.top_k);
      RowVec<S> sub(cfg.top_k);
      for (int j = 0; j < cfg.top_k; ++j) sub[j] = z(i, idx[i][j]);
      w.row(i) = softmax<S>(sub);
    }
    Mat<S> y = Mat<S>::Zero(t, d);
    Mat<S> norms;
    const bool want_norms = capture && capture->norms;
    if (want_norms) norms.resize(t, cfg.top_k);
    RowVec<S> pre(f), act(f), expert_out(d);
    for (int i = 0; i < t; ++i) {
      for (int j = 0; j < cfg.top_k; ++j) {
        const int e = idx[i][j];
        pre.noalias() = m_in.row(i) * lp.up.middleRows(e * d, d);
        pre += lp.up_b.row(e);
        for (int cc = 0; cc < f; ++cc) {
          act[cc] = pre[cc] * detail::sigmoid(pre[cc]);
        }
        expert_out.noalias() = act * lp.down.middleRows(e * f, f);
        expert_out += lp.down_b.row(e);
        y.row(i) += w(i, j) * expert_out;
        if (want_norms) norms(i, j) = expert_out.norm();
      }
    }
    h = h + y;

    if (capture) {
      trace.indices[l] = std::move(idx);
      trace.weights[l] = std::move(w);
      if (capture->norms) trace.norms[l] = std::move(norms);
      if (capture->full_probs) {
        Mat<S> probs(t, e_l);
        for (int i = 0; i < t; ++i) probs.row(i) = softmax<S>(RowVec<S>(z.row(i)));
        trace.full_probs[l] = std::move(probs);
      }
    }
  }

  Mat<S> final_h = detail::rmsnorm_value<S>(h, c.g_final, eps);
  // noalias() keeps this GEMM on the same direct-evaluation path the tape's
  // matmul op uses; the plain-assignment form would round through an
  // aliasing temporary and drift from the training forward by a few ULP.
  result.logits.noalias() = final_h * c.head.transpose();
  return result;
}

// Greedy decode: argmax continuation (ties to the lower token id), stopping
// at EOS (token id 2), the new-token cap, or the model's context limit.
template <typename S>
std::vector<int> greedy_decode(const Checkpoint<S>& c, const std::vector<int>& prompt,
                               int max_new_tokens) {
  check(!prompt.empty(), "greedy_decode: empty prompt");
  std::vector<int> tokens = prompt;
  std::vector<int> generated;
  constexpr int kEos = 2;
  while (static_cast<int>(generated.size()) < max_new_tokens &&
         static_cast<int>(tokens.size()) < c.config.max_seq_len) {
    InferResult<S> out = forward_infer<S>(c, tokens);
    const int next = argmax_row<S>(RowVec<S>(out.logits.row(out.logits.rows() - 1)));
    generated.push_back(next);
    tokens.push_back(next);
    if (next == kEos) break;
  }
  return generated;
}

// --- tape (training) forward ------------------------------------------------

// Var handles for every parameter tensor, in canonical order.
struct CheckpointVars {
  std::vector<Var> all;
  int n_layers = 0;

  enum LayerSlot {
    kWq = 0, kWk, kWv, kWo, kGAttn, kGMoe, kRouterW, kRouterB,
    kUp, kUpB, kDown, kDownB, kLayerSlots
  };
  Var emb() const { return all[0]; }
  Var pos() const { return all[1]; }
  Var layer(int l, LayerSlot s) const { return all[2 + kLayerSlots * l + s]; }
  Var g_final() const { return all[2 + kLayerSlots * n_layers]; }
  Var head() const { return all[3 + kLayerSlots * n_layers]; }
};

template <typename S>
CheckpointVars register_params(Tape<S>& t, const Checkpoint<S>& c) {
  CheckpointVars vars;
  vars.n_layers = c.config.n_layers;
  for_each_tensor(c, [&](const std::string&, const Mat<S>& m) {
    vars.all.push_back(t.leaf(m));
  });
  return vars;
}

template <typename S>
struct TapeForward {
  Var logits;
  std::vector<std::vector<std::vector<int>>> indices;  // [L][t][K]
  std::vector<Var> sel_weights;                        // [L], each [t x K]
  std::vector<Var> full_probs;                         // [L], iff want_probs
};

// Mirrors forward_infer exactly (operation order and expressions) while
// recording the graph. want_probs additionally records the full router
// softmax per layer for the balance penalty.
template <typename S>
TapeForward<S> forward_tape(Tape<S>& t, const CheckpointVars& vars,
                            const ModelConfig& cfg, const std::vector<int>& tokens,
                            bool want_probs) {
  const int n = static_cast<int>(tokens.size());
  check(n >= 1, "forward: empty input");
  check(n <= cfg.max_seq_len, "forward: input exceeds max sequence length");
  const S scale = S(1) / std::sqrt(static_cast<S>(cfg.d_model));
  const S eps = static_cast<S>(kRmsEps);
  using CV = CheckpointVars;

  TapeForward<S> out;
  Var h = embed(t, vars.emb(), vars.pos(), tokens);
  for (int l = 0; l < cfg.n_layers; ++l) {
    Var a_in = rmsnorm(t, h, vars.layer(l, CV::kGAttn), eps);
    Var q = matmul_nt(t, a_in, vars.layer(l, CV::kWq));
    Var k = matmul_nt(t, a_in, vars.layer(l, CV::kWk));
    Var v = matmul_nt(t, a_in, vars.layer(l, CV::kWv));
    Var scores = matmul_nt(t, q, k, scale);
    Var attn_p = causal_softmax(t, scores);
    Var attn = matmul(t, attn_p, v);
    Var attn_out = matmul_nt(t, attn, vars.layer(l, CV::kWo));
    h = add(t, h, attn_out);

    Var m_in = rmsnorm(t, h, vars.layer(l, CV::kGMoe), eps);
    Var z = add_rowvec(t, matmul_nt(t, m_in, vars.layer(l, CV::kRouterW)),
                       vars.layer(l, CV::kRouterB));
    std::vector<std::vector<int>> idx(n);
    const Mat<S>& zv = t.val(z);
    for (int i = 0; i < n; ++i) {
      idx[i] = top_k<S>(RowVec<S>(zv.row(i)), cfg.top_k);
    }
    Var w = select_softmax(t, z, idx);
    if (want_probs) out.full_probs.push_back(softmax_rows(t, z));
    Var y = moe_apply(t, m_in, w, vars.layer(l, CV::kUp), vars.layer(l, CV::kUpB),
                      vars.layer(l, CV::kDown), vars.layer(l, CV::kDownB), idx,
                      cfg.d_model, cfg.d_ff);
    h = add(t, h, y);
    out.indices.push_back(std::move(idx));
    out.sel_weights.push_back(w);
  }
  Var final_h = rmsnorm(t, h, vars.g_final(), eps);
  out.logits = matmul_nt(t, final_h, vars.head());
  return out;
}

// --- checkpoint file I/O ----------------------------------------------------

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
// Header not parseable or missing required fields.
class CheckpointParseError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
// Header tensor shapes disagree with the embedded config.
class CheckpointShapeError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
// Blob shorter than the header's tensor directory promises.
class CheckpointTruncationError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

// JSON header + 64-byte-aligned little-endian f32 blob.
void save_checkpoint(const Checkpoint<float>& c, const std::string& path);
Checkpoint<float> load_checkpoint(const std::string& path);

}  // namespace moelab
