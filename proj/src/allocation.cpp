// Copyright (c) 2026 moelab authors
// SPDX-License-Identifier: Apache-2.0

#include "moelab/allocation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace moelab {

double js_divergence(const RowVec<double>& p, const RowVec<double>& q) {
  check(p.size() == q.size(), "js_divergence: length mismatch");
  check(p.size() >= 1, "js_divergence: empty distributions");
  check((p.array() >= 0).all() && (q.array() >= 0).all(),
        "js_divergence: negative entries");
  check(std::abs(p.sum() - 1.0) <= 1e-6 && std::abs(q.sum() - 1.0) <= 1e-6,
        "js_divergence: inputs must sum to 1");
  double js = 0.0;
  for (int i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0) js += 0.5 * p[i] * std::log2(p[i] / m);
    if (q[i] > 0) js += 0.5 * q[i] * std::log2(q[i] / m);
  }
  return std::clamp(js, 0.0, 1.0);
}

namespace {

// Token-mean routing distribution per layer for one token sequence.
std::vector<RowVec<double>> mean_routing(const Checkpoint<float>& c,
                                         const std::vector<int>& tokens) {
  InferResult<float> res = forward_infer<float>(c, tokens, CaptureOptions{});
  const RoutingTrace<float>& tr = res.trace;
  std::vector<RowVec<double>> out(tr.n_layers);
  for (int l = 0; l < tr.n_layers; ++l) {
    RowVec<double> acc = RowVec<double>::Zero(c.config.experts_per_layer[l]);
    for (int i = 0; i < tr.n_tokens; ++i) {
      for (int j = 0; j < tr.k; ++j) {
        acc[tr.indices[l][i][j]] += static_cast<double>(tr.weights[l](i, j));
      }
    }
    out[l] = acc / static_cast<double>(tr.n_tokens);
  }
  return out;
}

std::vector<int> monolingual_tokens(const Passage& p, const LanguageSpec& lang,
                                    const TokenLayout& layout) {
  std::vector<int> tokens;
  tokens.reserve(p.size() + 2);
  tokens.push_back(TokenLayout::BOS);
  tokens.push_back(layout.tag(lang.id));
  const std::vector<int> body = render(p, lang, layout);
  tokens.insert(tokens.end(), body.begin(), body.end());
  return tokens;
}

}  // namespace

DivergenceProfile divergence_profile(const Checkpoint<float>& c,
                                     const ParallelCorpus& corpus, int lang,
                                     const std::vector<int>& passage_ids,
                                     int compare_lang) {
  check(lang >= 0 && lang < corpus.n_langs, "divergence_profile: bad language");
  check(compare_lang >= 0 && compare_lang < corpus.n_langs,
        "divergence_profile: bad comparison language");
  check(!passage_ids.empty(), "divergence_profile: need passages");
  const TokenLayout layout = corpus.layout();
  DivergenceProfile profile;
  profile.lang = lang;
  profile.passage_count = static_cast<int>(passage_ids.size());
  profile.d.assign(c.config.n_layers, 0.0);
  for (int pid : passage_ids) {
    check(pid >= 0 && pid < static_cast<int>(corpus.dev.size()),
          "divergence_profile: passage id outside dev split");
    const Passage& p = corpus.dev[pid];
    const auto q_lang =
        mean_routing(c, monolingual_tokens(p, corpus.languages[lang], layout));
    const auto q_ref =
        mean_routing(c, monolingual_tokens(p, corpus.languages[compare_lang], layout));
    for (int l = 0; l < c.config.n_layers; ++l) {
      profile.d[l] += js_divergence(q_lang[l], q_ref[l]);
    }
  }
  for (double& v : profile.d) v /= profile.passage_count;
  return profile;
}

DivergenceProfile merge_profiles(const std::vector<DivergenceProfile>& profiles) {
  check(!profiles.empty(), "merge_profiles: no profiles");
  DivergenceProfile out;
  out.lang = -1;
  out.d.assign(profiles.front().d.size(), 0.0);
  for (const DivergenceProfile& p : profiles) {
    check(p.d.size() == out.d.size(), "merge_profiles: layer count mismatch");
    for (std::size_t l = 0; l < p.d.size(); ++l) out.d[l] += p.d[l];
    out.passage_count += p.passage_count;
  }
  for (double& v : out.d) v /= static_cast<double>(profiles.size());
  return out;
}

namespace {

void check_k(const ModelConfig& cfg, int k) {
  const int e = cfg.experts_per_layer[0];
  for (int el : cfg.experts_per_layer) {
    check(el == e, "allocation: plans require a uniform unpruned expert count");
  }
  check(k >= 0 && k <= e - cfg.top_k, "allocation: k must lie in [0, E-K]");
}

}  // namespace

CapacityPlan allocate_uniform(const ModelConfig& cfg, int k) {
  check_k(cfg, k);
  CapacityPlan plan;
  plan.k = k;
  plan.method = "uniform";
  plan.retained.assign(cfg.n_layers, cfg.experts_per_layer[0] - k);
  return plan;
}

std::vector<int> hamilton_round(const std::vector<double>& real_caps, int total,
                                int cap_min, int cap_max) {
  const int n = static_cast<int>(real_caps.size());
  double sum = 0.0;
  for (double v : real_caps) {
    check(v >= cap_min - 1e-9 && v <= cap_max + 1e-9,
          "hamilton_round: input outside bounds");
    sum += v;
  }
  check(std::abs(sum - total) <= 1e-6, "hamilton_round: inputs must sum to the total");

  std::vector<int> out(n);
  std::vector<double> frac(n);
  int assigned = 0;
  for (int i = 0; i < n; ++i) {
    out[i] = static_cast<int>(std::floor(real_caps[i] + 1e-12));
    out[i] = std::clamp(out[i], cap_min, cap_max);
    frac[i] = real_caps[i] - out[i];
    assigned += out[i];
  }
  int remaining = total - assigned;
  check(remaining >= 0, "hamilton_round: floors exceed the total");
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (frac[a] != frac[b]) return frac[a] > frac[b];
    return a < b;
  });
  for (int idx : order) {
    if (remaining == 0) break;
    if (out[idx] < cap_max) {
      ++out[idx];
      --remaining;
    }
  }
  check(remaining == 0, "hamilton_round: could not place all units under the cap");
  return out;
}

CapacityPlan allocate_dynamic(const DivergenceProfile& profile, const ModelConfig& cfg,
                              int k) {
  check_k(cfg, k);
  const int L = cfg.n_layers;
  check(static_cast<int>(profile.d.size()) == L,
        "allocate_dynamic: profile length must equal layer count");
  const int E = cfg.experts_per_layer[0];
  const int K = cfg.top_k;
  const int total = L * (E - k);

  std::vector<double> caps(L, static_cast<double>(K));
  double budget = static_cast<double>(total - L * K);
  for (int round = 0; round <= L && budget > 1e-9; ++round) {
    std::vector<int> open;
    double d_sum = 0.0;
    for (int l = 0; l < L; ++l) {
      if (caps[l] < E - 1e-12) {
        open.push_back(l);
        d_sum += profile.d[l];
      }
    }
    check(!open.empty(), "allocate_dynamic: budget left but every layer is full");
    double overflow = 0.0;
    for (int l : open) {
      // Zero-divergence fallback: split the remainder equally.
      const double share =
          d_sum > 0 ? budget * (profile.d[l] / d_sum) : budget / open.size();
      caps[l] += share;
      if (caps[l] > E) {
        overflow += caps[l] - E;
        caps[l] = E;
      }
    }
    budget = overflow;
  }
  check(budget <= 1e-6, "allocate_dynamic: failed to place the budget");

  CapacityPlan plan;
  plan.k = k;
  plan.method = "dynamic";
  plan.retained = hamilton_round(caps, total, K, E);
  return plan;
}

CapacityPlan allocate_inverse_dynamic(const DivergenceProfile& profile,
                                      const ModelConfig& cfg, int k) {
  check(!profile.d.empty(), "allocate_inverse_dynamic: empty profile");
  const double lo = *std::min_element(profile.d.begin(), profile.d.end());
  const double hi = *std::max_element(profile.d.begin(), profile.d.end());
  DivergenceProfile reflected = profile;
  for (double& v : reflected.d) v = (hi + lo) - v;
  CapacityPlan plan = allocate_dynamic(reflected, cfg, k);
  plan.method = "inverse-dynamic";
  return plan;
}

void save_plan(const CapacityPlan& plan, int n_experts, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  check(f != nullptr, "save_plan: cannot open " + path);
  std::fprintf(f, "layer,retained,pruned,method,k\n");
  for (std::size_t l = 0; l < plan.retained.size(); ++l) {
    std::fprintf(f, "%zu,%d,%d,%s,%d\n", l, plan.retained[l],
                 n_experts - plan.retained[l], plan.method.c_str(), plan.k);
  }
  std::fclose(f);
}

CapacityPlan load_plan(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "load_plan: cannot open " + path);
  std::string line;
  std::getline(in, line);
  check(line == "layer,retained,pruned,method,k", "load_plan: bad CSV header");
  CapacityPlan plan;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    check(cells.size() == 5, "load_plan: bad CSV row: " + line);
    plan.retained.push_back(std::stoi(cells[1]));
    plan.method = cells[3];
    plan.k = std::stoi(cells[4]);
  }
  check(!plan.retained.empty(), "load_plan: no rows");
  return plan;
}

void save_profile(const DivergenceProfile& profile, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  check(f != nullptr, "save_profile: cannot open " + path);
  std::fprintf(f, "layer,language,d\n");
  for (std::size_t l = 0; l < profile.d.size(); ++l) {
    std::fprintf(f, "%zu,%d,%.12g\n", l, profile.lang, profile.d[l]);
  }
  std::fclose(f);
}

DivergenceProfile load_profile(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "load_profile: cannot open " + path);
  std::string line;
  std::getline(in, line);
  check(line == "layer,language,d", "load_profile: bad CSV header");
  DivergenceProfile profile;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    int l = 0, lang = 0;
    double d = 0;
    check(std::sscanf(line.c_str(), "%d,%d,%lf", &l, &lang, &d) == 3,
          "load_profile: bad CSV row: " + line);
    profile.lang = lang;
    profile.d.push_back(d);
  }
  check(!profile.d.empty(), "load_profile: no rows");
  return profile;
}

}  // namespace moelab
