// Copyright (c) 2026 moelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Divergence profiles and capacity allocation. The JS oracle values are
// derived in comments; the allocator is checked against two full hand
// traces plus budget/bounds sweeps over random profiles.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <unistd.h>

#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "moelab/allocation.hpp"
#include "moelab/importance.hpp"
#include "moelab/rng.hpp"

using namespace moelab;

namespace {

ModelConfig shaped_config(int n_layers, int n_experts, int top_k) {
  ModelConfig cfg;
  cfg.n_layers = n_layers;
  cfg.experts_per_layer.assign(n_layers, n_experts);
  cfg.top_k = top_k;
  cfg.d_model = 8;
  cfg.d_ff = 12;
  cfg.vocab_size = 40;
  cfg.max_seq_len = 32;
  return cfg;
}

DivergenceProfile profile_of(std::vector<double> d) {
  DivergenceProfile p;
  p.lang = 1;
  p.d = std::move(d);
  p.passage_count = 1;
  return p;
}

std::string temp_path(const std::string& name) {
  static int counter = 0;
  const auto dir = std::filesystem::temp_directory_path() /
                   ("moelab_allocation_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  return (dir / (std::to_string(counter++) + "_" + name)).string();
}

}  // namespace

TEST_CASE("js_divergence: identity, maximum, closed form, symmetry, bounds") {
  RowVec<double> p(2), q(2), u(2);
  p << 1.0, 0.0;
  q << 0.0, 1.0;
  u << 0.5, 0.5;
  CHECK(js_divergence(p, p) == doctest::Approx(0.0).epsilon(1e-12));
  // Disjoint supports: each KL to the mixture is 1 bit, so JS = 1.
  CHECK(js_divergence(p, q) == doctest::Approx(1.0).epsilon(1e-12));
  // js([1,0],[0.5,0.5]): m = [0.75, 0.25];
  //   KL(p||m) = 1*log2(1/0.75)              = 0.415037499...
  //   KL(q||m) = 0.5*log2(0.5/0.75) + 0.5*log2(0.5/0.25)
  //            = 0.5*(-0.584962500) + 0.5*1  = 0.207518749...
  //   JS = (0.415037499 + 0.207518749)/2     = 0.311278124...
  CHECK(js_divergence(p, u) == doctest::Approx(0.311278124459).epsilon(1e-9));

  Rng rng(17);
  for (int rep = 0; rep < 1000; ++rep) {
    const int n = 2 + static_cast<int>(rng.below(7));
    RowVec<double> a(n), b(n);
    for (int i = 0; i < n; ++i) {
      a[i] = rng.uniform() + 1e-9;
      b[i] = rng.uniform() + 1e-9;
    }
    a /= a.sum();
    b /= b.sum();
    const double ab = js_divergence(a, b);
    const double ba = js_divergence(b, a);
    CHECK(ab == doctest::Approx(ba).epsilon(1e-12));
    CHECK(ab >= 0.0);
    CHECK(ab <= 1.0);
  }

  RowVec<double> neg(2), ok(2);
  neg << -0.5, 1.5;
  ok << 0.5, 0.5;
  CHECK_THROWS_AS(js_divergence(neg, ok), ContractError);
  RowVec<double> unnorm(2);
  unnorm << 0.9, 0.9;
  CHECK_THROWS_AS(js_divergence(unnorm, ok), ContractError);
  RowVec<double> short_v(3);
  short_v << 0.2, 0.3, 0.5;
  CHECK_THROWS_AS(js_divergence(short_v, ok), ContractError);
}

TEST_CASE("hamilton_round: hand traces, integers, tie rule, totals") {
  // floors [2,3,5] use 10 of 12; remainders 0.9 > 0.7 > 0.4 give the two
  // spare units to layers 1 and 2.
  CHECK(hamilton_round({2.4, 3.9, 5.7}, 12, 2, 8) == std::vector<int>{2, 4, 6});
  CHECK(hamilton_round({2.0, 4.0, 6.0}, 12, 2, 8) == std::vector<int>{2, 4, 6});
  // Equal remainders: the unit goes to the lower index.
  CHECK(hamilton_round({2.5, 2.5}, 5, 2, 8) == std::vector<int>{3, 2});
  // Upper bound: a layer at E cannot absorb the spare unit.
  CHECK(hamilton_round({4.0, 2.5, 2.5}, 9, 2, 4) == std::vector<int>{4, 3, 2});

  Rng rng(23);
  for (int rep = 0; rep < 300; ++rep) {
    const int L = 2 + static_cast<int>(rng.below(6));
    const int E = 4 + static_cast<int>(rng.below(12));
    const int K = 1 + static_cast<int>(rng.below(3));
    // Build real capacities in [K, E] whose sum is an integer: start from
    // random values, then shift to hit a feasible integer total.
    std::vector<double> caps(L);
    double sum = 0;
    for (int l = 0; l < L; ++l) {
      caps[l] = K + rng.uniform() * (E - K);
      sum += caps[l];
    }
    const int target = static_cast<int>(std::lround(sum));
    const double adjust = (target - sum) / L;
    bool feasible = true;
    for (int l = 0; l < L; ++l) {
      caps[l] += adjust;
      if (caps[l] < K || caps[l] > E) feasible = false;
    }
    if (!feasible) continue;
    const auto rounded = hamilton_round(caps, target, K, E);
    int total = 0;
    for (int l = 0; l < L; ++l) {
      CHECK(rounded[l] >= K);
      CHECK(rounded[l] <= E);
      // Post-rounding values differ from the reals by less than 1.
      CHECK(std::abs(rounded[l] - caps[l]) < 1.0);
      total += rounded[l];
    }
    CHECK(total == target);
  }
}

TEST_CASE("allocate_uniform: closed form") {
  const ModelConfig cfg = shaped_config(6, 16, 2);
  const auto p0 = allocate_uniform(cfg, 0);
  CHECK(p0.retained == std::vector<int>(6, 16));
  CHECK(p0.method == "uniform");
  CHECK(p0.k == 0);
  const auto pfloor = allocate_uniform(cfg, 14);
  CHECK(pfloor.retained == std::vector<int>(6, 2));
  const auto p4 = allocate_uniform(cfg, 4);
  CHECK(p4.retained == std::vector<int>(6, 12));
  int total = 0;
  for (int c : p4.retained) total += c;
  CHECK(total == 72);
  CHECK_THROWS_AS(allocate_uniform(cfg, 15), ContractError);
  CHECK_THROWS_AS(allocate_uniform(cfg, -1), ContractError);
}

TEST_CASE("allocate_dynamic: hand trace without capping -> [3,4,5]") {
  // L=3, E=8, K=2, k=4: budget = 3*(8-4) = 12, base 3*K = 6, spare B = 6.
  // Proportional to d = [0.1, 0.2, 0.3] (sum 0.6): shares 1, 2, 3.
  // Capacities [3, 4, 5], all below E, no overflow; integers so rounding
  // leaves them unchanged.
  const ModelConfig cfg = shaped_config(3, 8, 2);
  const auto plan = allocate_dynamic(profile_of({0.1, 0.2, 0.3}), cfg, 4);
  CHECK(plan.retained == std::vector<int>{3, 4, 5});
  CHECK(plan.method == "dynamic");
  CHECK(plan.k == 4);
}

TEST_CASE("allocate_dynamic: hand trace with capping -> [2,4,6]") {
  // L=3, E=6, K=2, k=2: budget = 3*(6-2) = 12, base 6, spare B = 6.
  // d = [0.0, 0.1, 0.5] (sum 0.6): first pass adds [0, 1, 5] -> [2, 3, 7];
  // layer 2 caps at 6 returning overflow 1; second pass splits 1 over
  // non-full layers {0, 1} proportional to [0.0, 0.1] -> all to layer 1:
  // [2, 4, 6].
  const ModelConfig cfg = shaped_config(3, 6, 2);
  const auto plan = allocate_dynamic(profile_of({0.0, 0.1, 0.5}), cfg, 2);
  CHECK(plan.retained == std::vector<int>{2, 4, 6});
}

TEST_CASE("allocate_dynamic: uniform divergence equals allocate_uniform") {
  const ModelConfig cfg = shaped_config(5, 12, 2);
  for (int k = 0; k <= 10; k += 2) {
    const auto dyn = allocate_dynamic(profile_of(std::vector<double>(5, 0.37)), cfg, k);
    const auto uni = allocate_uniform(cfg, k);
    CHECK(dyn.retained == uni.retained);
  }
  // All-zero divergence triggers the documented equal-split fallback, which
  // for equal layers is also the uniform plan.
  const auto zero = allocate_dynamic(profile_of(std::vector<double>(5, 0.0)), cfg, 4);
  CHECK(zero.retained == allocate_uniform(cfg, 4).retained);
}

TEST_CASE("allocate_dynamic: budget and bounds over random profiles, all k") {
  Rng rng(31);
  for (int rep = 0; rep < 200; ++rep) {
    const int L = 2 + static_cast<int>(rng.below(7));
    const int E = 4 + static_cast<int>(rng.below(13));
    const int K = 1 + static_cast<int>(rng.below(3));
    const ModelConfig cfg = shaped_config(L, E, K);
    std::vector<double> d(L);
    for (int l = 0; l < L; ++l) {
      // Mix in exact zeros and ties to stress the fallback paths.
      const double roll = rng.uniform();
      d[l] = roll < 0.2 ? 0.0 : rng.uniform();
    }
    for (int k = 0; k <= E - K; ++k) {
      const auto plan = allocate_dynamic(profile_of(d), cfg, k);
      REQUIRE(static_cast<int>(plan.retained.size()) == L);
      int total = 0;
      for (int c : plan.retained) {
        CHECK(c >= K);
        CHECK(c <= E);
        total += c;
      }
      CHECK(total == L * (E - k));
    }
  }
}

TEST_CASE("allocate_dynamic: more divergent layers keep at least as many experts") {
  // Without capping, proportional shares preserve the divergence order.
  const ModelConfig cfg = shaped_config(4, 16, 2);
  const auto plan = allocate_dynamic(profile_of({0.05, 0.2, 0.2, 0.4}), cfg, 8);
  CHECK(plan.retained[0] <= plan.retained[1]);
  CHECK(plan.retained[1] == plan.retained[2]);  // tied divergence, no capping
  CHECK(plan.retained[2] <= plan.retained[3]);
}

TEST_CASE("allocate_inverse_dynamic: reflection, same budget") {
  const ModelConfig cfg = shaped_config(2, 8, 2);
  // d = [0.1, 0.3]: dynamic favors layer 1; inverse must swap the pattern
  // exactly because (max+min) - d = [0.3, 0.1] mirrors the profile.
  const auto dyn = allocate_dynamic(profile_of({0.1, 0.3}), cfg, 4);
  const auto inv = allocate_inverse_dynamic(profile_of({0.1, 0.3}), cfg, 4);
  CHECK(inv.method == "inverse-dynamic");
  CHECK(dyn.retained[0] == inv.retained[1]);
  CHECK(dyn.retained[1] == inv.retained[0]);
  CHECK(dyn.retained[0] < dyn.retained[1]);

  // Uniform profile: inverse equals dynamic.
  const auto du = allocate_dynamic(profile_of({0.2, 0.2}), cfg, 2);
  const auto iu = allocate_inverse_dynamic(profile_of({0.2, 0.2}), cfg, 2);
  CHECK(du.retained == iu.retained);

  Rng rng(41);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<double> d{rng.uniform(), rng.uniform()};
    for (int k = 0; k <= 6; ++k) {
      const auto plan = allocate_inverse_dynamic(profile_of(d), cfg, k);
      int total = 0;
      for (int c : plan.retained) {
        CHECK(c >= 2);
        CHECK(c <= 8);
        total += c;
      }
      CHECK(total == 2 * (8 - k));
    }
  }
}

TEST_CASE("merge_profiles: equal-weight mean and validation") {
  DivergenceProfile a = profile_of({0.2, 0.4});
  DivergenceProfile b = profile_of({0.4, 0.0});
  b.lang = 2;
  a.passage_count = 3;
  b.passage_count = 5;
  const auto m = merge_profiles({a, b});
  CHECK(m.d.size() == 2);
  CHECK(m.d[0] == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(m.d[1] == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(m.passage_count == 8);

  DivergenceProfile wrong = profile_of({0.1});
  CHECK_THROWS_AS(merge_profiles({a, wrong}), ContractError);
  CHECK_THROWS_AS(merge_profiles({}), ContractError);
}

TEST_CASE("divergence_profile: self-comparison is zero; output well-formed") {
  CorpusSizes sizes;
  sizes.train = 8;
  sizes.dev = 8;
  sizes.devtest = 8;
  const auto corpus = gen_corpus(3, 16, sizes, 4, 7, 13);
  ModelConfig cfg = shaped_config(2, 4, 2);
  cfg.vocab_size = corpus.layout().vocab_size();
  const auto model = init_model<float>(cfg, 3);

  const auto self = divergence_profile(model, corpus, 1, {0, 1, 2, 3}, 1);
  CHECK(self.lang == 1);
  CHECK(self.passage_count == 4);
  for (double d : self.d) CHECK(d == doctest::Approx(0.0).epsilon(1e-9));

  const auto vs_pivot = divergence_profile(model, corpus, 1, {0, 1, 2, 3}, 0);
  REQUIRE(static_cast<int>(vs_pivot.d.size()) == cfg.n_layers);
  for (double d : vs_pivot.d) {
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
  }

  // A uniform router (zeroed weights) routes every token identically, so
  // both languages share one routing distribution and the divergence is 0.
  auto flat = model;
  for (auto& layer : flat.layers) {
    layer.router_w.setZero();
    layer.router_b.setZero();
  }
  const auto zero_prof = divergence_profile(flat, corpus, 1, {0, 1, 2, 3}, 0);
  for (double d : zero_prof.d) CHECK(d == doctest::Approx(0.0).epsilon(1e-9));

  CHECK_THROWS_AS(divergence_profile(model, corpus, 9, {0}, 0), ContractError);
  CHECK_THROWS_AS(divergence_profile(model, corpus, 1, {999}, 0), ContractError);
}

TEST_CASE("plan and profile CSV round trips") {
  const ModelConfig cfg = shaped_config(3, 8, 2);
  const auto plan = allocate_dynamic(profile_of({0.1, 0.2, 0.3}), cfg, 4);
  const std::string plan_path = temp_path("plan.csv");
  save_plan(plan, 8, plan_path);
  const auto loaded = load_plan(plan_path);
  CHECK(loaded.retained == plan.retained);
  CHECK(loaded.method == plan.method);
  CHECK(loaded.k == plan.k);

  DivergenceProfile prof = profile_of({0.25, 0.5, 0.125});
  prof.lang = 3;
  prof.passage_count = 7;
  const std::string prof_path = temp_path("profile.csv");
  save_profile(prof, prof_path);
  const auto ploaded = load_profile(prof_path);
  CHECK(ploaded.lang == 3);
  CHECK(ploaded.d.size() == 3);
  for (int l = 0; l < 3; ++l) {
    CHECK(ploaded.d[l] == doctest::Approx(prof.d[l]).epsilon(1e-9));
  }
}
