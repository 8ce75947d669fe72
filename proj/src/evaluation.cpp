// Copyright (c) 2026 moelab authors
// SPDX-License-Identifier: Apache-2.0

#include "moelab/evaluation.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <tuple>

#include "moelab/rng.hpp"

namespace moelab {

std::vector<int> sample_subset(int split_size, int subset_size, std::uint64_t seed) {
  check(subset_size >= 1 && subset_size <= split_size,
        "sample_subset: need 1 <= subset <= split size");
  std::vector<int> ids(split_size);
  for (int i = 0; i < split_size; ++i) ids[i] = i;
  Rng rng(seed);
  for (int i = 0; i < subset_size; ++i) {
    const int j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(split_size - i)));
    std::swap(ids[i], ids[j]);
  }
  ids.resize(subset_size);
  return ids;
}

EvalResult evaluate(const Checkpoint<float>& c, const ParallelCorpus& corpus,
                    Direction direction, const std::string& split, int subset_size,
                    std::uint64_t seed) {
  check(direction.first != direction.second, "evaluate: direction must change language");
  check(direction.first >= 0 && direction.first < corpus.n_langs &&
            direction.second >= 0 && direction.second < corpus.n_langs,
        "evaluate: bad language id");
  const std::vector<Passage>& passages = corpus.split(split);
  const TokenLayout layout = corpus.layout();
  const LanguageSpec& src = corpus.languages[direction.first];
  const LanguageSpec& tgt = corpus.languages[direction.second];
  const std::vector<int> subset =
      sample_subset(static_cast<int>(passages.size()), subset_size, seed);

  EvalResult result;
  result.direction = direction;
  result.seed = seed;
  result.n_episodes = subset_size;
  long masked_total = 0, masked_correct = 0;
  int exact = 0, errors = 0;

  for (int pid : subset) {
    const Passage& p = passages[pid];

    // Teacher-forced token accuracy on the reference episode.
    const TranslationEpisode ep = make_episode(p, src, tgt, layout, pid);
    const int t = static_cast<int>(ep.tokens.size());
    std::vector<int> input(ep.tokens.begin(), ep.tokens.end() - 1);
    InferResult<float> res = forward_infer<float>(c, input);
    for (int i = 0; i + 1 < t; ++i) {
      if (!ep.loss_mask[i + 1]) continue;
      ++masked_total;
      const int pred = argmax_row<float>(RowVec<float>(res.logits.row(i)));
      if (pred == ep.tokens[i + 1]) ++masked_correct;
    }

    // Greedy decode scored against the reference, degenerations as zero.
    const std::vector<int> prompt = make_prompt(p, src, tgt, layout);
    const std::vector<int> gen =
        greedy_decode<float>(c, prompt, decode_cap(static_cast<int>(p.size())));
    const ErrorKind kind =
        detect_degeneration(gen, tgt.id, layout, static_cast<int>(p.size()));
    if (kind != ErrorKind::ok) {
      ++errors;
      if (kind == ErrorKind::no_eos) ++result.err_no_eos;
      if (kind == ErrorKind::off_target_vocab) ++result.err_off_vocab;
      continue;
    }
    if (gen == reference_target(p, tgt, layout)) ++exact;
  }

  result.token_acc = masked_total > 0
                         ? static_cast<double>(masked_correct) / masked_total
                         : 0.0;
  result.exact_match = static_cast<double>(exact) / subset_size;
  result.error_rate = static_cast<double>(errors) / subset_size;
  return result;
}

SweepReport sweep(const Checkpoint<float>& parent, const ParallelCorpus& corpus,
                  const ImportanceTable& table, const DivergenceProfile& profile,
                  const std::string& allocation_method, const std::vector<int>& k_grid,
                  const std::vector<Direction>& directions,
                  const std::vector<std::uint64_t>& seeds, int subset_size,
                  const std::string& split) {
  check(!k_grid.empty() && !directions.empty() && !seeds.empty(),
        "sweep: grid, directions and seeds must be nonempty");
  const int n_experts = parent.config.experts_per_layer[0];
  SweepReport report;
  report.importance_method = table.method;
  report.allocation_method = allocation_method;
  report.split = split;
  report.subset_size = subset_size;

  for (int k : k_grid) {
    const double pct = 100.0 * k / n_experts;
    std::string cell_error;
    std::vector<SweepRow> cell_rows;
    try {
      CapacityPlan plan;
      if (allocation_method == "uniform") {
        plan = allocate_uniform(parent.config, k);
      } else if (allocation_method == "dynamic") {
        plan = allocate_dynamic(profile, parent.config, k);
      } else if (allocation_method == "inverse-dynamic") {
        plan = allocate_inverse_dynamic(profile, parent.config, k);
      } else {
        throw ContractError("sweep: unknown allocation method " + allocation_method);
      }
      const PruneMask mask = build_mask(table, plan);
      const Checkpoint<float> pruned = extract(parent, mask);
      for (const Direction& dir : directions) {
        for (std::uint64_t seed : seeds) {
          const EvalResult r = evaluate(pruned, corpus, dir, split, subset_size, seed);
          SweepRow row;
          row.k = k;
          row.pct_dropped = pct;
          row.importance_method = table.method;
          row.allocation_method = allocation_method;
          row.direction = dir;
          row.seed = seed;
          row.token_acc = r.token_acc;
          row.exact_match = r.exact_match;
          row.error_rate = r.error_rate;
          row.err_no_eos = r.err_no_eos;
          row.err_off_vocab = r.err_off_vocab;
          cell_rows.push_back(std::move(row));
        }
      }
    } catch (const std::exception& e) {
      cell_error = e.what();
    }
    if (!cell_error.empty()) {
      cell_rows.clear();
      for (const Direction& dir : directions) {
        for (std::uint64_t seed : seeds) {
          SweepRow row;
          row.k = k;
          row.pct_dropped = pct;
          row.importance_method = table.method;
          row.allocation_method = allocation_method;
          row.direction = dir;
          row.seed = seed;
          row.token_acc = std::nan("");
          row.exact_match = std::nan("");
          row.error_rate = std::nan("");
          row.err_no_eos = -1;
          row.err_off_vocab = -1;
          row.failed = true;
          row.error = cell_error;
          cell_rows.push_back(std::move(row));
        }
      }
    }
    for (auto& row : cell_rows) report.rows.push_back(std::move(row));
  }
  return report;
}

void save_sweep_csv(const SweepReport& report, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  check(f != nullptr, "save_sweep_csv: cannot open " + path);
  std::fprintf(f,
               "k,pct_dropped,importance_method,allocation_method,direction,seed,"
               "token_acc,exact_match,error_rate,err_no_eos,err_off_vocab\n");
  for (const SweepRow& r : report.rows) {
    std::fprintf(f, "%d,%.6g,%s,%s,%s,%llu,%.6f,%.6f,%.6f,%d,%d\n", r.k,
                 r.pct_dropped, r.importance_method.c_str(),
                 r.allocation_method.c_str(), direction_str(r.direction).c_str(),
                 static_cast<unsigned long long>(r.seed), r.token_acc, r.exact_match,
                 r.error_rate, r.err_no_eos, r.err_off_vocab);
  }
  std::fclose(f);
}

std::vector<TransferRow> direction_transfer_report(const SweepReport& a,
                                                   const SweepReport& b) {
  using Key = std::tuple<int, int, int, std::uint64_t>;
  std::map<Key, const SweepRow*> b_index;
  for (const SweepRow& row : b.rows) {
    if (row.direction.second != 0) continue;  // X->pivot rows only
    b_index[{row.k, row.direction.first, row.direction.second, row.seed}] = &row;
  }
  std::vector<TransferRow> out;
  for (const SweepRow& row : a.rows) {
    if (row.direction.second != 0) continue;
    const Key key{row.k, row.direction.first, row.direction.second, row.seed};
    auto it = b_index.find(key);
    check(it != b_index.end(),
          "direction_transfer_report: sweeps do not align on " +
              direction_str(row.direction) + " at k=" + std::to_string(row.k));
    TransferRow t;
    t.k = row.k;
    t.direction = row.direction;
    t.seed = row.seed;
    t.exact_match_a = row.exact_match;
    t.exact_match_b = it->second->exact_match;
    t.delta = t.exact_match_a - t.exact_match_b;
    out.push_back(t);
  }
  check(!out.empty(), "direction_transfer_report: no X->pivot rows to pair");
  return out;
}

void save_transfer_csv(const std::vector<TransferRow>& rows, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  check(f != nullptr, "save_transfer_csv: cannot open " + path);
  std::fprintf(f, "k,direction,seed,exact_match_fwd_calib,exact_match_rev_calib,delta\n");
  for (const TransferRow& r : rows) {
    std::fprintf(f, "%d,%s,%llu,%.6f,%.6f,%.6f\n", r.k,
                 direction_str(r.direction).c_str(),
                 static_cast<unsigned long long>(r.seed), r.exact_match_a,
                 r.exact_match_b, r.delta);
  }
  std::fclose(f);
}

}  // namespace moelab
