// Copyright (c) 2026 moelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode autodiff over Mat<S>. A Tape owns every intermediate value
// of one forward computation; each recorded node carries a closure that
// scatters its output adjoint back into its inputs' adjoints. Replaying the
// nodes in reverse creation order is a valid topological order because
// values are immutable once pushed.
//
// One tape per training step, single writer. With recording off the same
// ops run value-only, so inference and training share one forward path.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "moelab/matrix.hpp"

namespace moelab {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename S>
class Tape {
 public:
  using M = Mat<S>;

  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }

  Var leaf(M value) {
    slots_.push_back(Slot{std::move(value), M(), nullptr});
    return Var{static_cast<int>(slots_.size()) - 1};
  }

  // Id the next pushed slot will get; lets op closures capture their output.
  Var next_var() const { return Var{static_cast<int>(slots_.size())}; }

  Var record(M value, std::function<void(Tape&)> bwd) {
    slots_.push_back(
        Slot{std::move(value), M(), recording_ ? std::move(bwd) : nullptr});
    return Var{static_cast<int>(slots_.size()) - 1};
  }

  const M& val(Var v) const { return slots_[v.id].value; }

  // Adjoint buffer, zero-initialized on first touch.
  M& grad(Var v) {
    Slot& s = slots_[v.id];
    if (s.grad.size() == 0) s.grad = M::Zero(s.value.rows(), s.value.cols());
    return s.grad;
  }

  bool has_grad(Var v) const { return slots_[v.id].grad.size() != 0; }

  // Seeds the (scalar) root with adjoint 1 and replays all nodes backward.
  void backward(Var root) {
    check(recording_, "backward: tape was not recording");
    check(val(root).size() == 1, "backward: root must be scalar");
    grad(root)(0, 0) = S(1);
    for (int i = root.id; i >= 0; --i) {
      Slot& s = slots_[i];
      if (s.bwd && s.grad.size() != 0) s.bwd(*this);
    }
  }

  std::size_t size() const { return slots_.size(); }

 private:
  struct Slot {
    M value;
    M grad;
    std::function<void(Tape&)> bwd;
  };
  std::vector<Slot> slots_;
  bool recording_;
};

namespace detail {

template <typename S>
inline S sigmoid(S x) {
  return S(1) / (S(1) + std::exp(-x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive ops. Each computes its value eagerly and, when the tape is
// recording, registers the matching adjoint update.
// ---------------------------------------------------------------------------

template <typename S>
Var matmul(Tape<S>& t, Var a, Var b) {
  const Mat<S>& A = t.val(a);
  const Mat<S>& B = t.val(b);
  check(A.cols() == B.rows(), "matmul: inner dimensions disagree");
  Mat<S> C = A * B;
  const Var out = t.next_var();
  return t.record(std::move(C), [a, b, out](Tape<S>& tp) {
    const Mat<S>& g = tp.grad(out);
    tp.grad(a).noalias() += g * tp.val(b).transpose();
    tp.grad(b).noalias() += tp.val(a).transpose() * g;
  });
}

// C = scale * A * B^T
template <typename S>
Var matmul_nt(Tape<S>& t, Var a, Var b, S scale = S(1)) {
  const Mat<S>& A = t.val(a);
  const Mat<S>& B = t.val(b);
  check(A.cols() == B.cols(), "matmul_nt: inner dimensions disagree");
  Mat<S> C = scale * (A * B.transpose());
  const Var out = t.next_var();
  return t.record(std::move(C), [a, b, scale, out](Tape<S>& tp) {
    const Mat<S>& g = tp.grad(out);
    tp.grad(a).noalias() += scale * (g * tp.val(b));
    tp.grad(b).noalias() += scale * (g.transpose() * tp.val(a));
  });
}

template <typename S>
Var add(Tape<S>& t, Var a, Var b) {
  const Mat<S>& A = t.val(a);
  const Mat<S>& B = t.val(b);
  check(A.rows() == B.rows() && A.cols() == B.cols(), "add: shape mismatch");
  Mat<S> C = A + B;
  const Var out = t.next_var();
  return t.record(std::move(C), [a, b, out](Tape<S>& tp) {
    const Mat<S>& g = tp.grad(out);
    tp.grad(a) += g;
    tp.grad(b) += g;
  });
}

// Broadcast row vector b over the rows of a.
template <typename S>
Var add_rowvec(Tape<S>& t, Var a, Var b) {
  const Mat<S>& A = t.val(a);
  const Mat<S>& B = t.val(b);
  check(B.rows() == 1 && B.cols() == A.cols(), "add_rowvec: bad row vector");
  Mat<S> C = A.rowwise() + B.row(0);
  const Var out = t.next_var();
  return t.record(std::move(C), [a, b, out](Tape<S>& tp) {
    const Mat<S>& g = tp.grad(out);
    tp.grad(a) += g;
    tp.grad(b).row(0) += g.colwise().sum();
  });
}

// Per-row RMS normalization with a learned gain: y_ij = x_ij * g_j / rms_i.
template <typename S>
Var rmsnorm(Tape<S>& t, Var x, Var gain, S eps = S(1e-5)) {
  const Mat<S>& X = t.val(x);
  const Mat<S>& G = t.val(gain);
  check(G.rows() == 1 && G.cols() == X.cols(), "rmsnorm: bad gain shape");
  const int rows = static_cast<int>(X.rows());
  const int cols = static_cast<int>(X.cols());
  Mat<S> inv_rms(rows, 1);
  for (int i = 0; i < rows; ++i) {
    inv_rms(i, 0) =
        S(1) / std::sqrt(X.row(i).squaredNorm() / static_cast<S>(cols) + eps);
  }
  Mat<S> Y = (X.array().colwise() * inv_rms.col(0).array()).rowwise() *
             G.row(0).array();
  const Var out = t.next_var();
  return t.record(
      std::move(Y), [x, gain, inv_rms, cols, out](Tape<S>& tp) {
        const Mat<S>& g = tp.grad(out);
        const Mat<S>& X = tp.val(x);
        const Mat<S>& G = tp.val(gain);
        Mat<S>& gx = tp.grad(x);
        Mat<S>& gg = tp.grad(gain);
        for (int i = 0; i < X.rows(); ++i) {
          const S r = inv_rms(i, 0);
          // d(gain): dL/dg_j += g_ij * x_ij * r
          gg.row(0).array() += g.row(i).array() * X.row(i).array() * r;
          // d(x): r * (g .* gain) - r^3/cols * (sum_j g_ij gain_j x_ij) * x
          const S dot =
              (g.row(i).array() * G.row(0).array() * X.row(i).array()).sum();
          gx.row(i).array() += r * g.row(i).array() * G.row(0).array() -
                               (r * r * r / static_cast<S>(cols)) * dot *
                                   X.row(i).array();
        }
      });
}

// Full softmax applied independently to each row.
template <typename S>
Var softmax_rows(Tape<S>& t, Var z) {
  const Mat<S>& Z = t.val(z);
  Mat<S> P(Z.rows(), Z.cols());
  for (int i = 0; i < Z.rows(); ++i) {
    P.row(i) = softmax<S>(RowVec<S>(Z.row(i)));
  }
  const Var out = t.next_var();
  return t.record(std::move(P), [z, out](Tape<S>& tp) {
    const Mat<S>& g = tp.grad(out);
    const Mat<S>& P = tp.val(out);
    Mat<S>& gz = tp.grad(z);
    for (int i = 0; i < P.rows(); ++i) {
      const S dot = (g.row(i).array() * P.row(i).array()).sum();
      gz.row(i).array() += (g.row(i).array() - dot) * P.row(i).array();
    }
  });
}

// Softmax of row i restricted to columns 0..i (strictly causal attention
// weights); masked-out entries are exactly zero.
template <typename S>
Var causal_softmax(Tape<S>& t, Var scores) {
  const Mat<S>& Z = t.val(scores);
  check(Z.rows() == Z.cols(), "causal_softmax: scores must be square");
  const int n = static_cast<int>(Z.rows());
  Mat<S> P = Mat<S>::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    RowVec<S> head = Z.row(i).head(i + 1);
    P.row(i).head(i + 1) = softmax<S>(head);
  }
  const Var out = t.next_var();
  return t.record(std::move(P), [scores, n, out](Tape<S>& tp) {
    const Mat<S>& g = tp.grad(out);
    const Mat<S>& P = tp.val(out);
    Mat<S>& gz = tp.grad(scores);
    for (int i = 0; i < n; ++i) {
      const auto p = P.row(i).head(i + 1).array();
      const auto gi = g.row(i).head(i + 1).array();
      const S dot = (gi * p).sum();
      gz.row(i).head(i + 1).array() += (gi - dot) * p;
    }
  });
}

// Softmax over the K selected logits of each row; output is [t x K] in the
// order of `indices` (ascending expert index). Gradient flows only into the
// selected logits: expert selection is piecewise constant.
template <typename S>
Var select_softmax(Tape<S>& t, Var z, const std::vector<std::vector<int>>& indices) {
  const Mat<S>& Z = t.val(z);
  const int rows = static_cast<int>(Z.rows());
  check(static_cast<int>(indices.size()) == rows,
        "select_softmax: one index set per row");
  const int k = static_cast<int>(indices[0].size());
  Mat<S> W(rows, k);
  for (int i = 0; i < rows; ++i) {
    RowVec<S> sub(k);
    for (int j = 0; j < k; ++j) sub[j] = Z(i, indices[i][j]);
    W.row(i) = softmax<S>(sub);
  }
  const Var out = t.next_var();
  return t.record(std::move(W), [z, indices, k, out](Tape<S>& tp) {
    const Mat<S>& g = tp.grad(out);
    const Mat<S>& W = tp.val(out);
    Mat<S>& gz = tp.grad(z);
    for (int i = 0; i < W.rows(); ++i) {
      const S dot = (g.row(i).array() * W.row(i).array()).sum();
      for (int j = 0; j < k; ++j) {
        gz(i, indices[i][j]) += (g(i, j) - dot) * W(i, j);
      }
    }
  });
}

// Token + learned positional embedding: out.row(i) = emb.row(tokens[i]) + pos.row(i).
template <typename S>
Var embed(Tape<S>& t, Var emb, Var pos, const std::vector<int>& tokens) {
  const Mat<S>& E = t.val(emb);
  const Mat<S>& P = t.val(pos);
  const int n = static_cast<int>(tokens.size());
  check(n <= P.rows(), "embed: sequence exceeds positional table");
  Mat<S> H(n, E.cols());
  for (int i = 0; i < n; ++i) {
    check(tokens[i] >= 0 && tokens[i] < E.rows(), "embed: token id out of range");
    H.row(i) = E.row(tokens[i]) + P.row(i);
  }
  const Var out = t.next_var();
  return t.record(std::move(H), [emb, pos, tokens, out](Tape<S>& tp) {
    const Mat<S>& g = tp.grad(out);
    Mat<S>& ge = tp.grad(emb);
    Mat<S>& gp = tp.grad(pos);
    for (int i = 0; i < g.rows(); ++i) {
      ge.row(tokens[i]) += g.row(i);
      gp.row(i) += g.row(i);
    }
  });
}

// Mean negative log-softmax probability over masked-in rows (0 if none).
template <typename S>
Var cross_entropy_op(Tape<S>& t, Var logits, std::vector<int> targets,
                     std::vector<bool> mask) {
  const Mat<S>& Z = t.val(logits);
  const S value = cross_entropy<S>(Z, targets, mask);
  int count = 0;
  for (bool b : mask) count += b ? 1 : 0;
  Mat<S> out_val(1, 1);
  out_val(0, 0) = value;
  const Var out = t.next_var();
  return t.record(std::move(out_val), [logits, targets = std::move(targets),
                                       mask = std::move(mask), count,
                                       out](Tape<S>& tp) {
    if (count == 0) return;
    const S g = tp.grad(out)(0, 0) / static_cast<S>(count);
    const Mat<S>& Z = tp.val(logits);
    Mat<S>& gz = tp.grad(logits);
    for (int i = 0; i < Z.rows(); ++i) {
      if (!mask[i]) continue;
      RowVec<S> p = softmax<S>(RowVec<S>(Z.row(i)));
      gz.row(i) += g * p;
      gz(i, targets[i]) -= g;
    }
  });
}

// Load-balance penalty: n_experts * sum_e f_e * mean_i probs(i, e), linear in
// probs. f is the (piecewise-constant) selection frequency vector.
template <typename S>
Var balance_penalty(Tape<S>& t, Var probs, RowVec<S> f) {
  const Mat<S>& P = t.val(probs);
  const int n_tok = static_cast<int>(P.rows());
  const int n_exp = static_cast<int>(P.cols());
  check(f.size() == n_exp, "balance_penalty: f length must match experts");
  Mat<S> out_val(1, 1);
  out_val(0, 0) =
      static_cast<S>(n_exp) * (P.colwise().mean().array() * f.array()).sum();
  const Var out = t.next_var();
  return t.record(std::move(out_val),
                  [probs, f = std::move(f), n_tok, n_exp, out](Tape<S>& tp) {
                    const S g = tp.grad(out)(0, 0);
                    tp.grad(probs).array().rowwise() +=
                        (g * static_cast<S>(n_exp) / static_cast<S>(n_tok)) *
                        f.array();
                  });
}

// out = a + alpha * b, both scalars.
template <typename S>
Var scalar_axpy(Tape<S>& t, Var a, Var b, S alpha) {
  Mat<S> v(1, 1);
  v(0, 0) = t.val(a)(0, 0) + alpha * t.val(b)(0, 0);
  const Var out = t.next_var();
  return t.record(std::move(v), [a, b, alpha, out](Tape<S>& tp) {
    const S g = tp.grad(out)(0, 0);
    tp.grad(a)(0, 0) += g;
    tp.grad(b)(0, 0) += alpha * g;
  });
}

// Mean of a list of scalars.
template <typename S>
Var scalar_mean(Tape<S>& t, const std::vector<Var>& xs) {
  check(!xs.empty(), "scalar_mean: empty list");
  Mat<S> v(1, 1);
  S sum = 0;
  for (Var x : xs) sum += t.val(x)(0, 0);
  v(0, 0) = sum / static_cast<S>(xs.size());
  const Var out = t.next_var();
  return t.record(std::move(v), [xs, out](Tape<S>& tp) {
    const S g = tp.grad(out)(0, 0) / static_cast<S>(xs.size());
    for (Var x : xs) tp.grad(x)(0, 0) += g;
  });
}

// Sum of squared entries, as a scalar. Handy for tests and probes.
template <typename S>
Var sum_squares(Tape<S>& t, Var x) {
  Mat<S> v(1, 1);
  v(0, 0) = t.val(x).squaredNorm();
  const Var out = t.next_var();
  return t.record(std::move(v), [x, out](Tape<S>& tp) {
    const S g = tp.grad(out)(0, 0);
    tp.grad(x) += S(2) * g * tp.val(x);
  });
}

// ---------------------------------------------------------------------------
// Mixture-of-experts expert application.
//
// y.row(i) = sum_j w(i,j) * FFN_{idx[i][j]}(h.row(i)) with
// FFN_e(x) = silu(x * Up_e + ub_e) * Down_e + db_e.
//
// Up is stored as an (E*d_model) x d_ff matrix whose e-th row block is
// expert e's up projection; Down likewise as (E*d_ff) x d_model. Gradients
// reach only the selected experts; with the balance loss off, untouched
// experts receive exactly zero gradient.
// ---------------------------------------------------------------------------
template <typename S>
Var moe_apply(Tape<S>& t, Var h, Var w, Var up, Var up_bias, Var down,
              Var down_bias, const std::vector<std::vector<int>>& indices,
              int d_model, int d_ff, std::vector<std::vector<S>>* norms_out = nullptr) {
  const Mat<S>& H = t.val(h);
  const Mat<S>& W = t.val(w);
  const int rows = static_cast<int>(H.rows());
  const int k = static_cast<int>(W.cols());
  Mat<S> Y = Mat<S>::Zero(rows, d_model);
  // Cached pre-activations and activations for the backward pass,
  // one row per (token, slot).
  Mat<S> pre(rows * k, d_ff);
  Mat<S> act(rows * k, d_ff);
  Mat<S> expert_out(rows * k, d_model);
  const Mat<S>& Up = t.val(up);
  const Mat<S>& UpB = t.val(up_bias);
  const Mat<S>& Down = t.val(down);
  const Mat<S>& DownB = t.val(down_bias);
  if (norms_out) norms_out->assign(rows, std::vector<S>(k));
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < k; ++j) {
      const int e = indices[i][j];
      const int slot = i * k + j;
      pre.row(slot).noalias() =
          H.row(i) * Up.middleRows(e * d_model, d_model);
      pre.row(slot) += UpB.row(e);
      for (int c = 0; c < d_ff; ++c) {
        act(slot, c) = pre(slot, c) * detail::sigmoid(pre(slot, c));
      }
      expert_out.row(slot).noalias() =
          act.row(slot) * Down.middleRows(e * d_ff, d_ff);
      expert_out.row(slot) += DownB.row(e);
      Y.row(i) += W(i, j) * expert_out.row(slot);
      if (norms_out) (*norms_out)[i][j] = expert_out.row(slot).norm();
    }
  }
  const Var out = t.next_var();
  if (!t.recording()) return t.record(std::move(Y), nullptr);
  return t.record(
      std::move(Y),
      [h, w, up, up_bias, down, down_bias, indices, d_model, d_ff, k,
       pre = std::move(pre), act = std::move(act),
       expert_out = std::move(expert_out), out](Tape<S>& tp) {
        const Mat<S>& g = tp.grad(out);
        const Mat<S>& H = tp.val(h);
        const Mat<S>& W = tp.val(w);
        const Mat<S>& Up = tp.val(up);
        const Mat<S>& Down = tp.val(down);
        Mat<S>& gh = tp.grad(h);
        Mat<S>& gw = tp.grad(w);
        Mat<S>& gup = tp.grad(up);
        Mat<S>& gupb = tp.grad(up_bias);
        Mat<S>& gdown = tp.grad(down);
        Mat<S>& gdownb = tp.grad(down_bias);
        RowVec<S> d_out(d_model), d_act(d_ff), d_pre(d_ff);
        for (int i = 0; i < H.rows(); ++i) {
          for (int j = 0; j < k; ++j) {
            const int e = indices[i][j];
            const int slot = i * static_cast<int>(k) + j;
            gw(i, j) += g.row(i).dot(expert_out.row(slot));
            d_out = W(i, j) * g.row(i);
            gdownb.row(e) += d_out;
            gdown.middleRows(e * d_ff, d_ff).noalias() +=
                act.row(slot).transpose() * d_out;
            d_act.noalias() = d_out * Down.middleRows(e * d_ff, d_ff).transpose();
            for (int c = 0; c < d_ff; ++c) {
              const S sg = detail::sigmoid(pre(slot, c));
              d_pre[c] = d_act[c] * (sg + pre(slot, c) * sg * (S(1) - sg));
            }
            gupb.row(e) += d_pre;
            gup.middleRows(e * d_model, d_model).noalias() +=
                H.row(i).transpose() * d_pre;
            gh.row(i).noalias() +=
                d_pre * Up.middleRows(e * d_model, d_model).transpose();
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

// Probe result of one scalar evaluation: the value plus a signature of every
// discrete routing decision taken along the way (hash of selected indices).
template <typename S>
struct FnProbe {
  S value = 0;
  std::uint64_t routing_sig = 0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  int checked = 0;
  int skipped = 0;  // coordinates skipped because a routing tie flipped
};

// Compares an analytic gradient against central differences, coordinate by
// coordinate. Coordinates where the routing signature changes between the
// +step and -step evaluations sit on a top-K tie and are skipped.
template <typename S, typename EvalFn>
GradCheckReport grad_check(EvalFn&& f, const Mat<S>& analytic,
                           const Mat<S>& point, S step) {
  GradCheckReport report;
  const FnProbe<S> base = f(point);
  Mat<S> x = point;
  for (int i = 0; i < x.rows(); ++i) {
    for (int j = 0; j < x.cols(); ++j) {
      const S orig = x(i, j);
      x(i, j) = orig + step;
      const FnProbe<S> up = f(x);
      x(i, j) = orig - step;
      const FnProbe<S> dn = f(x);
      x(i, j) = orig;
      if (up.routing_sig != dn.routing_sig || up.routing_sig != base.routing_sig) {
        ++report.skipped;
        continue;
      }
      const double numeric =
          (static_cast<double>(up.value) - static_cast<double>(dn.value)) /
          (2.0 * static_cast<double>(step));
      const double exact = static_cast<double>(analytic(i, j));
      const double denom =
          std::max({std::abs(exact), std::abs(numeric), 1e-8});
      report.max_rel_err =
          std::max(report.max_rel_err, std::abs(exact - numeric) / denom);
      ++report.checked;
    }
  }
  return report;
}

}  // namespace moelab
