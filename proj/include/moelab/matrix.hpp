// Copyright (c) 2026 moelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense numeric substrate. Matrices are row-major Eigen matrices templated
// on the scalar: float for training/evaluation, double for gradient-check
// runs. Free functions here are the value-only versions; tape.hpp wraps the
// same computations with reverse-mode recording.

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "moelab/common.hpp"

namespace moelab {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

using MatF = Mat<float>;
using MatD = Mat<double>;

template <typename S>
bool all_finite(const Mat<S>& m) {
  return m.allFinite();
}

// Softmax of a row vector, max-subtracted for stability.
template <typename S>
RowVec<S> softmax(const Eigen::Ref<const RowVec<S>>& v) {
  check(v.size() >= 1, "softmax: empty vector");
  RowVec<S> e = (v.array() - v.maxCoeff()).exp();
  return e / e.sum();
}

template <typename S>
RowVec<S> softmax(const RowVec<S>& v) {
  return softmax<S>(Eigen::Ref<const RowVec<S>>(v));
}

// Indices of the k largest entries. Ties broken by lower index; the result
// is sorted ascending by index. Routing and pruning both depend on this
// tie-break, so it is fixed here once.
template <typename S>
std::vector<int> top_k(const Eigen::Ref<const RowVec<S>>& v, int k) {
  const int n = static_cast<int>(v.size());
  check(k >= 1 && k <= n, "top_k: need 1 <= k <= n");
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(),
                    [&](int a, int b) {
                      if (v[a] != v[b]) return v[a] > v[b];
                      return a < b;
                    });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <typename S>
std::vector<int> top_k(const RowVec<S>& v, int k) {
  return top_k<S>(Eigen::Ref<const RowVec<S>>(v), k);
}

// Mean negative log-softmax probability of the target over masked-in rows.
// Returns 0 when the mask is empty.
template <typename S>
S cross_entropy(const Mat<S>& logits, const std::vector<int>& targets,
                const std::vector<bool>& mask) {
  const int t = static_cast<int>(logits.rows());
  const int v = static_cast<int>(logits.cols());
  check(static_cast<int>(targets.size()) == t &&
            static_cast<int>(mask.size()) == t,
        "cross_entropy: targets/mask length must match logits rows");
  S total = 0;
  int count = 0;
  for (int i = 0; i < t; ++i) {
    if (!mask[i]) continue;
    check(targets[i] >= 0 && targets[i] < v,
          "cross_entropy: target out of range");
    const S mx = logits.row(i).maxCoeff();
    const S lse = std::log((logits.row(i).array() - mx).exp().sum()) + mx;
    total += lse - logits(i, targets[i]);
    ++count;
  }
  return count == 0 ? S(0) : total / static_cast<S>(count);
}

// Argmax with ties to the lower index.
template <typename S>
int argmax_row(const Eigen::Ref<const RowVec<S>>& v) {
  int best = 0;
  for (int j = 1; j < v.size(); ++j) {
    if (v[j] > v[best]) best = j;
  }
  return best;
}

}  // namespace moelab
