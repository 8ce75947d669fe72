// Copyright (c) 2026 moelab authors
// SPDX-License-Identifier: Apache-2.0
//
// moelab: single command-line entry point for the expert-pruning pipeline.
//
// Every subcommand resolves its settings from (defaults < config file <
// flags), runs purely from that resolved map plus declared input artifacts
// and the global seed, writes its artifacts, and records a manifest.json
// naming inputs and outputs by content hash. `moelab replay <manifest>`
// re-runs any manifest into a scratch directory and compares output hashes,
// which machine-checks that artifacts are reconstructible from configs +
// seeds + inputs alone.
//
// Exit codes: 0 success, 1 validation error (bad flags, missing or
// mismatched inputs), 2 runtime failure (including replay mismatches).

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "moelab/allocation.hpp"
#include "moelab/analysis.hpp"
#include "moelab/corpus.hpp"
#include "moelab/evaluation.hpp"
#include "moelab/importance.hpp"
#include "moelab/manifest.hpp"
#include "moelab/model.hpp"
#include "moelab/surgeon.hpp"
#include "moelab/training.hpp"

namespace fs = std::filesystem;
using moelab::ArtifactRef;
using moelab::check;
using moelab::ContractError;
using moelab::RunManifest;

namespace {

using KV = std::map<std::string, std::string>;

// ---------------------------------------------------------------------------
// Config plumbing

const std::string& get(const KV& cfg, const std::string& key) {
  auto it = cfg.find(key);
  check(it != cfg.end(), "missing config key: " + key);
  return it->second;
}

int get_int(const KV& cfg, const std::string& key) {
  const std::string& s = get(cfg, key);
  try {
    std::size_t pos = 0;
    const int v = std::stoi(s, &pos);
    check(pos == s.size(), "config " + key + ": trailing junk in '" + s + "'");
    return v;
  } catch (const ContractError&) {
    throw;
  } catch (const std::exception&) {
    throw ContractError("config " + key + ": not an integer: '" + s + "'");
  }
}

double get_double(const KV& cfg, const std::string& key) {
  const std::string& s = get(cfg, key);
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    check(pos == s.size(), "config " + key + ": trailing junk in '" + s + "'");
    return v;
  } catch (const ContractError&) {
    throw;
  } catch (const std::exception&) {
    throw ContractError("config " + key + ": not a number: '" + s + "'");
  }
}

bool get_bool(const KV& cfg, const std::string& key) {
  const std::string& s = get(cfg, key);
  if (s == "1" || s == "true" || s == "yes") return true;
  if (s == "0" || s == "false" || s == "no") return false;
  throw ContractError("config " + key + ": not a boolean: '" + s + "'");
}

std::vector<int> parse_int_list(const std::string& s, const std::string& what) {
  std::vector<int> out;
  std::string cur;
  auto flush = [&] {
    if (cur.empty()) return;
    try {
      out.push_back(std::stoi(cur));
    } catch (const std::exception&) {
      throw ContractError(what + ": bad integer '" + cur + "'");
    }
    cur.clear();
  };
  for (char ch : s) {
    if (ch == ',' || ch == ' ') {
      flush();
    } else {
      cur.push_back(ch);
    }
  }
  flush();
  check(!out.empty(), what + ": empty list");
  return out;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> out;
  for (int v : parse_int_list(s, "seeds")) {
    check(v >= 0, "seeds: must be nonnegative");
    out.push_back(static_cast<std::uint64_t>(v));
  }
  return out;
}

// "0>1,2>0" -> pairs; "all" -> every pivot<->X pair for n_langs.
std::vector<moelab::Direction> parse_directions(const std::string& s, int n_langs) {
  if (s == "all") return moelab::default_train_directions(n_langs);
  std::vector<moelab::Direction> out;
  std::string cur;
  auto flush = [&] {
    if (cur.empty()) return;
    const auto gt = cur.find('>');
    check(gt != std::string::npos && gt > 0 && gt + 1 < cur.size(),
          "directions: expected SRC>TGT, got '" + cur + "'");
    int a = 0, b = 0;
    try {
      a = std::stoi(cur.substr(0, gt));
      b = std::stoi(cur.substr(gt + 1));
    } catch (const std::exception&) {
      throw ContractError("directions: bad language id in '" + cur + "'");
    }
    check(a >= 0 && a < n_langs && b >= 0 && b < n_langs && a != b,
          "directions: language ids out of range in '" + cur + "'");
    out.push_back({a, b});
    cur.clear();
  };
  for (char ch : s) {
    if (ch == ',' || ch == ' ') {
      flush();
    } else {
      cur.push_back(ch);
    }
  }
  flush();
  check(!out.empty(), "directions: empty list");
  return out;
}

// Simple `key value` / `key = value` lines, '#' comments.
void load_config_file(const std::string& path, KV& cfg) {
  std::ifstream in(path);
  check(in.good(), "cannot open config file: " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::string key, value;
    std::size_t i = 0;
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i])) &&
           line[i] != '=') {
      key.push_back(line[i++]);
    }
    while (i < line.size() && (std::isspace(static_cast<unsigned char>(line[i])) ||
                               line[i] == '=')) {
      ++i;
    }
    while (i < line.size()) value.push_back(line[i++]);
    while (!value.empty() && std::isspace(static_cast<unsigned char>(value.back()))) {
      value.pop_back();
    }
    if (key.empty()) continue;
    check(!value.empty(), path + ":" + std::to_string(lineno) + ": key '" + key +
                              "' has no value");
    cfg[key] = value;
  }
}

// Centralized defaults table; the README documents these.
void apply_defaults(const std::string& cmd, KV& cfg) {
  auto def = [&](const std::string& k, const std::string& v) { cfg.emplace(k, v); };
  if (cmd == "gen-corpus") {
    def("n_langs", "8");
    def("vocab_per_lang", "64");
    def("len_min", "8");
    def("len_max", "16");
    def("train", "4096");
    def("dev", "256");
    def("devtest", "256");
  } else if (cmd == "train") {
    def("steps", "12000");
    def("batch_size", "32");
    def("lr", "1e-3");
    def("beta1", "0.9");
    def("beta2", "0.999");
    def("eps", "1e-8");
    def("alpha", "0.01");
    def("clip_norm", "5.0");
    def("cosine", "1");
    def("directions", "all");
    def("n_layers", "6");
    def("n_experts", "16");
    def("top_k", "2");
    def("d_model", "64");
    def("d_ff", "128");
    def("max_seq", "64");
  } else if (cmd == "calibrate") {
    def("method", "routing-mass");
    def("directions", "0>1,0>2,0>3,0>4");
    def("passages", "64");
    def("generated", "1");
  } else if (cmd == "divergence") {
    def("langs", "1,2,3,4");
    def("compare_lang", "0");
    def("passages", "64");
  } else if (cmd == "allocate") {
    def("method", "uniform");
  } else if (cmd == "verify") {
    def("direction", "0>1");
    def("episodes", "64");
    def("split", "dev");
  } else if (cmd == "eval") {
    def("directions", "all");
    def("split", "devtest");
    def("subset", "16");
  } else if (cmd == "sweep") {
    def("grid", "0,2,4,6,8,10,12,14");
    def("allocation", "uniform");
    def("directions", "all");
    def("seeds", "0,1,2,3,4");
    def("subset", "16");
    def("split", "devtest");
  } else if (cmd == "sft-recover" || cmd == "distill") {
    def("steps", "1000");
    def("batch_size", "32");
    def("lr", "1e-3");
    def("beta1", "0.9");
    def("beta2", "0.999");
    def("eps", "1e-8");
    def("alpha", "0.01");
    def("clip_norm", "5.0");
    def("cosine", "1");
    if (cmd == "sft-recover") {
      def("directions", "0>1,0>2,0>3,0>4,0>7");
    } else {
      def("target_langs", "1,2,3,4,7");
      def("passages", "256");
      def("split", "dev");
    }
  } else if (cmd == "overlap") {
    // k = 0 is excluded: unpruned masks are identical by construction and
    // the random baseline is exactly 1, so excess IoU is undefined there.
    def("grid", "2,4,6,8,10,12,14");
  }
}

// ---------------------------------------------------------------------------
// Artifact plumbing

const ArtifactRef* find_input(const std::vector<ArtifactRef>& inputs,
                              const std::string& role) {
  for (const ArtifactRef& a : inputs) {
    if (a.role == role) return &a;
  }
  return nullptr;
}

std::string require_input(const std::vector<ArtifactRef>& inputs,
                          const std::string& role) {
  const ArtifactRef* a = find_input(inputs, role);
  check(a != nullptr, "missing required input: --" + role);
  check(fs::exists(a->path), "input " + role + " not found: " + a->path);
  return a->path;
}

std::string sidecar_for(const std::string& csv_path) {
  fs::path p(csv_path);
  p.replace_extension(".json");
  return p.string();
}

struct Outputs {
  std::string dir;
  std::vector<ArtifactRef> refs;

  std::string path(const std::string& name) const { return dir + "/" + name; }
  void add(const std::string& role, const std::string& name) {
    refs.push_back(ArtifactRef{role, path(name), ""});
  }
};

// TrainConfig shared by train / sft-recover / distill.
moelab::TrainConfig train_config_from(const KV& cfg, std::uint64_t seed) {
  moelab::TrainConfig tc;
  tc.steps = get_int(cfg, "steps");
  tc.batch_size = get_int(cfg, "batch_size");
  tc.lr = get_double(cfg, "lr");
  tc.beta1 = get_double(cfg, "beta1");
  tc.beta2 = get_double(cfg, "beta2");
  tc.eps = get_double(cfg, "eps");
  tc.aux_alpha = get_double(cfg, "alpha");
  tc.clip_norm = get_double(cfg, "clip_norm");
  tc.cosine_decay = get_bool(cfg, "cosine");
  tc.seed = seed;
  return tc;
}

void write_json(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  check(out.good(), "cannot open for writing: " + path);
  out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Subcommand implementations. Each consumes only (cfg, inputs, out, seed)
// so replay can reproduce it from the manifest alone.

void run_gen_corpus(const KV& cfg, const std::vector<ArtifactRef>&, Outputs& out,
                    std::uint64_t seed) {
  moelab::CorpusSizes sizes;
  sizes.train = get_int(cfg, "train");
  sizes.dev = get_int(cfg, "dev");
  sizes.devtest = get_int(cfg, "devtest");
  const moelab::ParallelCorpus corpus =
      moelab::gen_corpus(get_int(cfg, "n_langs"), get_int(cfg, "vocab_per_lang"),
                         sizes, get_int(cfg, "len_min"), get_int(cfg, "len_max"), seed);
  moelab::save_corpus(corpus, out.path("corpus.json"), out.path("corpus.bin"));
  out.add("corpus", "corpus.json");
  out.add("corpus_bin", "corpus.bin");
  std::printf("gen-corpus: %d languages, %zu/%zu/%zu passages, vocab %d\n",
              corpus.n_langs, corpus.train.size(), corpus.dev.size(),
              corpus.devtest.size(), corpus.layout().vocab_size());
}

void run_train(const KV& cfg, const std::vector<ArtifactRef>& inputs, Outputs& out,
               std::uint64_t seed) {
  const moelab::ParallelCorpus corpus =
      moelab::load_corpus(require_input(inputs, "corpus"));
  moelab::ModelConfig mc;
  mc.n_layers = get_int(cfg, "n_layers");
  mc.experts_per_layer.assign(mc.n_layers, get_int(cfg, "n_experts"));
  mc.top_k = get_int(cfg, "top_k");
  mc.d_model = get_int(cfg, "d_model");
  mc.d_ff = get_int(cfg, "d_ff");
  mc.max_seq_len = get_int(cfg, "max_seq");
  mc.vocab_size = corpus.layout().vocab_size();
  mc.init_seed = seed;
  mc.validate();

  const auto directions = parse_directions(get(cfg, "directions"), corpus.n_langs);
  const moelab::TrainConfig tc = train_config_from(cfg, seed);
  moelab::Checkpoint<float> model = moelab::init_model<float>(mc, seed);
  const std::vector<moelab::LossPoint> curve =
      moelab::train<float>(model, corpus, directions, tc);
  moelab::save_checkpoint(model, out.path("model.bin"));
  moelab::save_loss_csv(curve, out.path("loss.csv"));
  out.add("model", "model.bin");
  out.add("loss_csv", "loss.csv");
  if (!curve.empty()) {
    std::printf("train: %d steps, final task loss %.4f\n", tc.steps,
                curve.back().task_loss);
  } else {
    std::printf("train: 0 steps, model initialized only\n");
  }
}

void run_calibrate(const KV& cfg, const std::vector<ArtifactRef>& inputs, Outputs& out,
                   std::uint64_t seed) {
  const moelab::ParallelCorpus corpus =
      moelab::load_corpus(require_input(inputs, "corpus"));
  const moelab::Checkpoint<float> model =
      moelab::load_checkpoint(require_input(inputs, "model"));

  std::string method = get(cfg, "method");
  bool inverted = false;
  if (method.rfind("inverted-", 0) == 0) {
    inverted = true;
    method = method.substr(std::string("inverted-").size());
  }

  moelab::CalibrationSpec spec;
  spec.directions = parse_directions(get(cfg, "directions"), corpus.n_langs);
  const int passages = get_int(cfg, "passages");
  check(passages >= 1 && passages <= static_cast<int>(corpus.dev.size()),
        "calibrate: passages out of range for the dev split");
  for (int i = 0; i < passages; ++i) spec.passage_ids.push_back(i);
  spec.use_generated_target = get_bool(cfg, "generated");

  moelab::ImportanceTable table;
  if (method == "random") {
    table = moelab::random_scores(model.config, seed);
    table.spec_hash = spec.hash();
  } else {
    const moelab::CalibrationEpisodes cal =
        moelab::build_calibration_episodes<float>(corpus, spec, model);
    if (method == "routing-mass") {
      table = moelab::routing_mass<float>(cal.episodes, model);
    } else if (method == "norm-weighted") {
      table = moelab::norm_weighted<float>(cal.episodes, model);
    } else {
      throw ContractError("calibrate: unknown method '" + get(cfg, "method") + "'");
    }
    table.spec_hash = spec.hash();
    table.fallback_count = cal.fallback_count;
  }
  if (inverted) table = moelab::invert(table);

  moelab::save_importance(table, out.path("importance.csv"), out.path("importance.json"));
  out.add("importance", "importance.csv");
  out.add("importance_sidecar", "importance.json");
  std::printf("calibrate: method %s over %zu episodes (%d fallbacks)\n",
              table.method.c_str(),
              static_cast<std::size_t>(table.sequence_count), table.fallback_count);
}

void run_divergence(const KV& cfg, const std::vector<ArtifactRef>& inputs,
                    Outputs& out, std::uint64_t) {
  const moelab::ParallelCorpus corpus =
      moelab::load_corpus(require_input(inputs, "corpus"));
  const moelab::Checkpoint<float> model =
      moelab::load_checkpoint(require_input(inputs, "model"));
  const std::vector<int> langs = parse_int_list(get(cfg, "langs"), "langs");
  const int compare_lang = get_int(cfg, "compare_lang");
  const int passages = get_int(cfg, "passages");
  check(passages >= 1 && passages <= static_cast<int>(corpus.dev.size()),
        "divergence: passages out of range for the dev split");
  std::vector<int> pids;
  for (int i = 0; i < passages; ++i) pids.push_back(i);

  std::vector<moelab::DivergenceProfile> profiles;
  for (int lang : langs) {
    profiles.push_back(
        moelab::divergence_profile(model, corpus, lang, pids, compare_lang));
    const std::string name = "profile_lang" + std::to_string(lang) + ".csv";
    moelab::save_profile(profiles.back(), out.path(name));
    out.add("profile_lang" + std::to_string(lang), name);
  }
  const moelab::DivergenceProfile merged = moelab::merge_profiles(profiles);
  moelab::save_profile(merged, out.path("profile.csv"));
  out.add("profile", "profile.csv");
  double dmax = 0;
  for (double v : merged.d) dmax = std::max(dmax, v);
  std::printf("divergence: %zu languages merged, max layer divergence %.4f\n",
              langs.size(), dmax);
}

void run_allocate(const KV& cfg, const std::vector<ArtifactRef>& inputs, Outputs& out,
                  std::uint64_t) {
  const moelab::Checkpoint<float> model =
      moelab::load_checkpoint(require_input(inputs, "model"));
  const std::string method = get(cfg, "method");
  const int k = get_int(cfg, "k");
  moelab::CapacityPlan plan;
  if (method == "uniform") {
    plan = moelab::allocate_uniform(model.config, k);
  } else if (method == "dynamic" || method == "inverse-dynamic") {
    const moelab::DivergenceProfile profile =
        moelab::load_profile(require_input(inputs, "profile"));
    plan = method == "dynamic"
               ? moelab::allocate_dynamic(profile, model.config, k)
               : moelab::allocate_inverse_dynamic(profile, model.config, k);
  } else {
    throw ContractError("allocate: unknown method '" + method + "'");
  }
  moelab::save_plan(plan, model.config.experts_per_layer[0], out.path("plan.csv"));
  out.add("plan", "plan.csv");
  std::printf("allocate: method %s, k=%d, capacities", plan.method.c_str(), plan.k);
  for (int c : plan.retained) std::printf(" %d", c);
  std::printf("\n");
}

void run_prune(const KV&, const std::vector<ArtifactRef>& inputs, Outputs& out,
               std::uint64_t) {
  const moelab::Checkpoint<float> model =
      moelab::load_checkpoint(require_input(inputs, "model"));
  const std::string csv = require_input(inputs, "importance");
  const moelab::ImportanceTable table =
      moelab::load_importance(csv, sidecar_for(csv));
  const moelab::CapacityPlan plan = moelab::load_plan(require_input(inputs, "plan"));
  const moelab::PruneMask mask = moelab::build_mask(table, plan);
  const moelab::Checkpoint<float> pruned = moelab::extract(model, mask);
  moelab::save_checkpoint(pruned, out.path("pruned.bin"));
  moelab::save_mask(mask, out.path("mask.json"));
  out.add("pruned", "pruned.bin");
  out.add("mask", "mask.json");
  std::printf("prune: %lld of %lld expert parameters retained\n",
              moelab::expert_param_count(pruned), moelab::expert_param_count(model));
}

void run_verify(const KV& cfg, const std::vector<ArtifactRef>& inputs, Outputs& out,
                std::uint64_t) {
  const moelab::ParallelCorpus corpus =
      moelab::load_corpus(require_input(inputs, "corpus"));
  const moelab::Checkpoint<float> model =
      moelab::load_checkpoint(require_input(inputs, "model"));
  const moelab::Checkpoint<float> pruned =
      moelab::load_checkpoint(require_input(inputs, "pruned"));
  const moelab::PruneMask mask = moelab::load_mask(require_input(inputs, "mask"));

  const auto dirs = parse_directions(get(cfg, "direction"), corpus.n_langs);
  check(dirs.size() == 1, "verify: exactly one direction expected");
  const auto& split = corpus.split(get(cfg, "split"));
  const int episodes = get_int(cfg, "episodes");
  check(episodes >= 1 && episodes <= static_cast<int>(split.size()),
        "verify: episodes out of range for the split");
  const moelab::TokenLayout layout = corpus.layout();
  std::vector<std::vector<int>> probes;
  for (int i = 0; i < episodes; ++i) {
    probes.push_back(moelab::make_episode(split[i], corpus.languages[dirs[0].first],
                                          corpus.languages[dirs[0].second], layout, i)
                         .tokens);
  }
  const moelab::EquivalenceReport rep =
      moelab::verify_equivalence(model, pruned, mask, probes);
  nlohmann::json j;
  j["max_logit_deviation"] = rep.max_logit_deviation;
  j["outside_mask_tokens"] = rep.outside_mask_tokens;
  j["compared_tokens"] = rep.compared_tokens;
  j["episodes"] = episodes;
  write_json(j, out.path("equivalence.json"));
  out.add("equivalence", "equivalence.json");
  std::printf("verify: max logit deviation %.3g over %ld tokens, %ld outside mask\n",
              rep.max_logit_deviation, rep.compared_tokens, rep.outside_mask_tokens);
}

void run_eval(const KV& cfg, const std::vector<ArtifactRef>& inputs, Outputs& out,
              std::uint64_t seed) {
  const moelab::ParallelCorpus corpus =
      moelab::load_corpus(require_input(inputs, "corpus"));
  const moelab::Checkpoint<float> model =
      moelab::load_checkpoint(require_input(inputs, "model"));
  const auto directions = parse_directions(get(cfg, "directions"), corpus.n_langs);
  const std::string split = get(cfg, "split");
  const int subset = get_int(cfg, "subset");

  std::FILE* f = std::fopen(out.path("eval.csv").c_str(), "w");
  check(f != nullptr, "cannot open eval.csv for writing");
  std::fprintf(f, "direction,token_acc,exact_match,error_rate,err_no_eos,err_off_vocab,episodes\n");
  double em_sum = 0;
  for (const auto& dir : directions) {
    const moelab::EvalResult r =
        moelab::evaluate(model, corpus, dir, split, subset, seed);
    std::fprintf(f, "%s,%.6f,%.6f,%.6f,%d,%d,%d\n",
                 moelab::direction_str(dir).c_str(), r.token_acc, r.exact_match,
                 r.error_rate, r.err_no_eos, r.err_off_vocab, r.n_episodes);
    em_sum += r.exact_match;
  }
  std::fclose(f);
  out.add("eval", "eval.csv");
  std::printf("eval: mean exact match %.4f over %zu directions\n",
              em_sum / directions.size(), directions.size());
}

void run_sweep(const KV& cfg, const std::vector<ArtifactRef>& inputs, Outputs& out,
               std::uint64_t) {
  const moelab::ParallelCorpus corpus =
      moelab::load_corpus(require_input(inputs, "corpus"));
  const moelab::Checkpoint<float> model =
      moelab::load_checkpoint(require_input(inputs, "model"));
  const std::string csv = require_input(inputs, "importance");
  const moelab::ImportanceTable table =
      moelab::load_importance(csv, sidecar_for(csv));
  const std::string allocation = get(cfg, "allocation");
  moelab::DivergenceProfile profile;
  if (allocation != "uniform") {
    profile = moelab::load_profile(require_input(inputs, "profile"));
  }
  const moelab::SweepReport report = moelab::sweep(
      model, corpus, table, profile, allocation,
      parse_int_list(get(cfg, "grid"), "grid"),
      parse_directions(get(cfg, "directions"), corpus.n_langs),
      parse_seed_list(get(cfg, "seeds")), get_int(cfg, "subset"), get(cfg, "split"));
  moelab::save_sweep_csv(report, out.path("sweep.csv"));
  out.add("sweep", "sweep.csv");
  std::printf("sweep: %zu rows (%s importance, %s allocation)\n", report.rows.size(),
              table.method.c_str(), allocation.c_str());
}

void run_sft_recover(const KV& cfg, const std::vector<ArtifactRef>& inputs,
                     Outputs& out, std::uint64_t seed) {
  const moelab::ParallelCorpus corpus =
      moelab::load_corpus(require_input(inputs, "corpus"));
  moelab::Checkpoint<float> student =
      moelab::load_checkpoint(require_input(inputs, "pruned"));
  const auto directions = parse_directions(get(cfg, "directions"), corpus.n_langs);
  const moelab::TrainConfig tc = train_config_from(cfg, seed);
  const std::vector<moelab::LossPoint> curve =
      moelab::sft_recover<float>(student, corpus, directions, tc);
  moelab::save_checkpoint(student, out.path("recovered.bin"));
  moelab::save_loss_csv(curve, out.path("loss.csv"));
  out.add("recovered", "recovered.bin");
  out.add("loss_csv", "loss.csv");
  std::printf("sft-recover: %d steps, final task loss %.4f\n", tc.steps,
              curve.empty() ? 0.0 : curve.back().task_loss);
}

void run_distill(const KV& cfg, const std::vector<ArtifactRef>& inputs, Outputs& out,
                 std::uint64_t seed) {
  const moelab::ParallelCorpus corpus =
      moelab::load_corpus(require_input(inputs, "corpus"));
  const moelab::Checkpoint<float> teacher =
      moelab::load_checkpoint(require_input(inputs, "model"));
  moelab::Checkpoint<float> student =
      moelab::load_checkpoint(require_input(inputs, "pruned"));
  const std::string split = get(cfg, "split");
  const int passages = get_int(cfg, "passages");
  check(passages >= 1 &&
            passages <= static_cast<int>(corpus.split(split).size()),
        "distill: passages out of range for the split");
  std::vector<int> pids;
  for (int i = 0; i < passages; ++i) pids.push_back(i);
  const std::vector<int> target_langs =
      parse_int_list(get(cfg, "target_langs"), "target_langs");

  const moelab::DistillSet set =
      moelab::build_distill_set<float>(teacher, corpus, pids, split, target_langs);
  const moelab::TrainConfig tc = train_config_from(cfg, seed);
  const std::vector<moelab::LossPoint> curve =
      moelab::distill_recover<float>(student, set, tc);
  moelab::save_checkpoint(student, out.path("recovered.bin"));
  moelab::save_loss_csv(curve, out.path("loss.csv"));

  nlohmann::json j;
  j["episodes"] = set.episodes.size();
  j["fallback_count"] = set.fallback_count;
  nlohmann::json prov = nlohmann::json::array();
  for (const auto& p : set.provenance) {
    prov.push_back({{"passage_id", p.passage_id},
                    {"src_lang", p.src_lang},
                    {"tgt_lang", p.tgt_lang}});
  }
  j["provenance"] = prov;
  write_json(j, out.path("distill.json"));
  out.add("recovered", "recovered.bin");
  out.add("loss_csv", "loss.csv");
  out.add("distill", "distill.json");
  std::printf("distill: %zu teacher episodes (%d fallbacks), %d steps, final loss %.4f\n",
              set.episodes.size(), set.fallback_count, tc.steps,
              curve.empty() ? 0.0 : curve.back().task_loss);
}

void run_overlap(const KV& cfg, const std::vector<ArtifactRef>& inputs, Outputs& out,
                 std::uint64_t) {
  const moelab::Checkpoint<float> model =
      moelab::load_checkpoint(require_input(inputs, "model"));
  std::vector<moelab::ImportanceTable> tables;
  for (int i = 0;; ++i) {
    const ArtifactRef* a = find_input(inputs, "importance" + std::to_string(i));
    if (a == nullptr) break;
    check(fs::exists(a->path), "input importance table not found: " + a->path);
    tables.push_back(moelab::load_importance(a->path, sidecar_for(a->path)));
  }
  check(tables.size() >= 2, "overlap: need at least two --importance tables");

  const int n_experts = model.config.experts_per_layer[0];
  std::vector<moelab::OverlapRow> rows;
  for (int k : parse_int_list(get(cfg, "grid"), "grid")) {
    const moelab::CapacityPlan plan = moelab::allocate_uniform(model.config, k);
    std::vector<moelab::PruneMask> masks;
    std::vector<moelab::CapacityPlan> plans;
    for (const auto& t : tables) {
      masks.push_back(moelab::build_mask(t, plan));
      plans.push_back(plan);
    }
    const moelab::IoUPair obs = moelab::retained_iou(masks, n_experts);
    const moelab::IoUPair rnd = moelab::random_baseline_iou(plans, n_experts);
    moelab::OverlapRow row;
    row.k = k;
    row.pct_dropped = 100.0 * k / n_experts;
    row.pairwise_obs = obs.pairwise;
    row.pairwise_rand = rnd.pairwise;
    row.pairwise_excess = moelab::excess_iou(obs.pairwise, rnd.pairwise);
    row.alln_obs = obs.all_n;
    row.alln_rand = rnd.all_n;
    row.alln_excess = moelab::excess_iou(obs.all_n, rnd.all_n);
    rows.push_back(row);
  }
  moelab::save_overlap_csv(rows, out.path("overlap.csv"));
  out.add("overlap", "overlap.csv");
  std::printf("overlap: %zu grid points over %zu masks\n", rows.size(), tables.size());
}

// ---------------------------------------------------------------------------
// Dispatch + manifest + replay

using Runner = void (*)(const KV&, const std::vector<ArtifactRef>&, Outputs&,
                        std::uint64_t);

Runner runner_for(const std::string& cmd) {
  static const std::map<std::string, Runner> table = {
      {"gen-corpus", run_gen_corpus}, {"train", run_train},
      {"calibrate", run_calibrate},   {"divergence", run_divergence},
      {"allocate", run_allocate},     {"prune", run_prune},
      {"verify", run_verify},         {"eval", run_eval},
      {"sweep", run_sweep},           {"sft-recover", run_sft_recover},
      {"distill", run_distill},       {"overlap", run_overlap},
  };
  auto it = table.find(cmd);
  check(it != table.end(), "unknown command: " + cmd);
  return it->second;
}

// Runs one resolved command, hashing inputs and outputs into a manifest.
void execute(const std::string& cmd, const KV& cfg, std::vector<ArtifactRef> inputs,
             const std::string& out_dir, std::uint64_t seed) {
  fs::create_directories(out_dir);
  for (ArtifactRef& a : inputs) {
    check(fs::exists(a.path), "missing input " + a.role + ": " + a.path);
    a.hash = moelab::hash_file(a.path);
  }
  Outputs out;
  out.dir = out_dir;
  runner_for(cmd)(cfg, inputs, out, seed);
  for (ArtifactRef& a : out.refs) a.hash = moelab::hash_file(a.path);

  RunManifest m;
  m.command = cmd;
  m.seed = seed;
  m.out_dir = out_dir;
  m.config = cfg;
  m.inputs = std::move(inputs);
  m.outputs = std::move(out.refs);
  moelab::save_manifest(m, out_dir + "/manifest.json");
}

int run_replay(const std::string& manifest_path, std::string scratch) {
  const RunManifest m = moelab::load_manifest(manifest_path);
  for (const ArtifactRef& a : m.inputs) {
    check(fs::exists(a.path), "replay: declared input missing: " + a.path);
    const std::string h = moelab::hash_file(a.path);
    check(h == a.hash, "replay: hash mismatch on declared input " + a.role + " (" +
                           a.path + "): recorded " + a.hash + ", found " + h);
  }
  if (scratch.empty()) scratch = m.out_dir + "-replay";
  execute(m.command, m.config, m.inputs, scratch, m.seed);

  int mismatches = 0;
  for (const ArtifactRef& a : m.outputs) {
    const std::string name = fs::path(a.path).filename().string();
    const std::string replayed = scratch + "/" + name;
    if (!fs::exists(replayed)) {
      std::printf("replay: MISSING %s\n", name.c_str());
      ++mismatches;
      continue;
    }
    const std::string h = moelab::hash_file(replayed);
    const bool same = h == a.hash;
    std::printf("replay: %s %s\n", same ? "match   " : "MISMATCH", name.c_str());
    if (!same) ++mismatches;
  }
  if (mismatches > 0) {
    std::fprintf(stderr, "replay: %d artifact(s) differ from the manifest\n",
                 mismatches);
    return 2;
  }
  std::printf("replay: all %zu artifacts byte-identical\n", m.outputs.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moelab: a desk-scale laboratory for mixture-of-experts expert "
               "pruning on synthetic cipher languages"};
  app.require_subcommand(1);

  struct Common {
    std::string out;
    std::string config_file;
    std::uint64_t seed = 0;
    int workers = 1;
    std::vector<std::string> sets;
  };

  struct PendingInput {
    std::string role;
    std::string path;
  };

  struct CmdState {
    Common common;
    KV flags;  // flag overrides collected as strings
    std::vector<PendingInput> inputs;
    std::vector<std::string> importance_paths;  // overlap only
  };

  std::map<std::string, std::shared_ptr<CmdState>> states;

  auto add_common = [&](CLI::App* sub, const std::string& name) {
    auto st = std::make_shared<CmdState>();
    states[name] = st;
    sub->add_option("--out", st->common.out, "Output directory");
    sub->add_option("--config", st->common.config_file,
                    "Key-value config file (flags override)");
    sub->add_option("--seed", st->common.seed, "Global seed for this run");
    sub->add_option("--workers", st->common.workers,
                    "Worker count (must not change results)")
        ->check(CLI::PositiveNumber);
    sub->add_option("--set", st->common.sets,
                    "Extra config override as key=value (repeatable)");
    return st;
  };

  auto add_cfg_flag = [&](CLI::App* sub, std::shared_ptr<CmdState> st,
                          const std::string& flag, const std::string& key,
                          const std::string& help) {
    sub->add_option_function<std::string>(
        flag, [st, key](const std::string& v) { st->flags[key] = v; }, help);
  };

  auto add_input = [&](CLI::App* sub, std::shared_ptr<CmdState> st,
                       const std::string& role, const std::string& help,
                       bool required = true) {
    auto* opt = sub->add_option_function<std::string>(
        "--" + role,
        [st, role](const std::string& v) {
          st->inputs.push_back({role, v});
        },
        help);
    if (required) opt->required();
  };

  // --- subcommand schemas ---
  {
    auto* sub = app.add_subcommand("gen-corpus", "Generate a cipher-language corpus");
    auto st = add_common(sub, "gen-corpus");
    add_cfg_flag(sub, st, "--n-langs", "n_langs", "Number of languages");
    add_cfg_flag(sub, st, "--vocab-per-lang", "vocab_per_lang", "Concepts per language");
    add_cfg_flag(sub, st, "--len-min", "len_min", "Minimum passage length");
    add_cfg_flag(sub, st, "--len-max", "len_max", "Maximum passage length");
    add_cfg_flag(sub, st, "--train", "train", "Train split size");
    add_cfg_flag(sub, st, "--dev", "dev", "Dev split size");
    add_cfg_flag(sub, st, "--devtest", "devtest", "Devtest split size");
  }
  {
    auto* sub = app.add_subcommand("train", "Train the mixture-of-experts translator");
    auto st = add_common(sub, "train");
    add_input(sub, st, "corpus", "Corpus manifest (corpus.json)");
    for (const char* key : {"steps", "batch_size", "lr", "beta1", "beta2", "eps",
                            "alpha", "clip_norm", "cosine", "directions", "n_layers",
                            "n_experts", "top_k", "d_model", "d_ff", "max_seq"}) {
      std::string flag = "--" + std::string(key);
      for (auto& ch : flag) {
        if (ch == '_') ch = '-';
      }
      add_cfg_flag(sub, st, flag, key, std::string("Config key ") + key);
    }
  }
  {
    auto* sub = app.add_subcommand("calibrate", "Score experts on calibration episodes");
    auto st = add_common(sub, "calibrate");
    add_input(sub, st, "corpus", "Corpus manifest");
    add_input(sub, st, "model", "Model checkpoint");
    add_cfg_flag(sub, st, "--method", "method",
                 "routing-mass | norm-weighted | random | inverted-<base>");
    add_cfg_flag(sub, st, "--directions", "directions", "Calibration directions");
    add_cfg_flag(sub, st, "--passages", "passages", "Dev passages per direction");
    add_cfg_flag(sub, st, "--generated", "generated",
                 "Use model-generated targets (1) or references (0)");
  }
  {
    auto* sub = app.add_subcommand("divergence",
                                   "Per-layer routing divergence vs the pivot");
    auto st = add_common(sub, "divergence");
    add_input(sub, st, "corpus", "Corpus manifest");
    add_input(sub, st, "model", "Model checkpoint");
    add_cfg_flag(sub, st, "--langs", "langs", "Languages to profile, e.g. 1,2,3,4");
    add_cfg_flag(sub, st, "--compare-lang", "compare_lang", "Reference language");
    add_cfg_flag(sub, st, "--passages", "passages", "Dev passages per language");
  }
  {
    auto* sub = app.add_subcommand("allocate", "Per-layer retained-capacity plan");
    auto st = add_common(sub, "allocate");
    add_input(sub, st, "model", "Model checkpoint (for layer/expert shape)");
    add_input(sub, st, "profile", "Divergence profile CSV", /*required=*/false);
    add_cfg_flag(sub, st, "--method", "method", "uniform | dynamic | inverse-dynamic");
    add_cfg_flag(sub, st, "--k", "k", "Average experts pruned per layer");
  }
  {
    auto* sub = app.add_subcommand("prune", "Physically extract retained experts");
    auto st = add_common(sub, "prune");
    add_input(sub, st, "model", "Parent checkpoint");
    add_input(sub, st, "importance", "Importance CSV (JSON sidecar alongside)");
    add_input(sub, st, "plan", "Capacity plan CSV");
  }
  {
    auto* sub = app.add_subcommand("verify",
                                   "Check pruned-vs-parent logit equivalence");
    auto st = add_common(sub, "verify");
    add_input(sub, st, "corpus", "Corpus manifest");
    add_input(sub, st, "model", "Parent checkpoint");
    add_input(sub, st, "pruned", "Pruned checkpoint");
    add_input(sub, st, "mask", "Prune mask JSON");
    add_cfg_flag(sub, st, "--direction", "direction", "Probe direction, e.g. 0>1");
    add_cfg_flag(sub, st, "--episodes", "episodes", "Probe episode count");
    add_cfg_flag(sub, st, "--split", "split", "Corpus split for probes");
  }
  {
    auto* sub = app.add_subcommand("eval", "Greedy-decoding translation quality");
    auto st = add_common(sub, "eval");
    add_input(sub, st, "corpus", "Corpus manifest");
    add_input(sub, st, "model", "Model checkpoint");
    add_cfg_flag(sub, st, "--directions", "directions", "Directions or 'all'");
    add_cfg_flag(sub, st, "--split", "split", "Corpus split");
    add_cfg_flag(sub, st, "--subset", "subset", "Episodes per direction");
  }
  {
    auto* sub = app.add_subcommand("sweep", "Prune-and-evaluate across a k grid");
    auto st = add_common(sub, "sweep");
    add_input(sub, st, "corpus", "Corpus manifest");
    add_input(sub, st, "model", "Parent checkpoint");
    add_input(sub, st, "importance", "Importance CSV");
    add_input(sub, st, "profile", "Divergence profile (for dynamic allocation)",
              /*required=*/false);
    add_cfg_flag(sub, st, "--grid", "grid", "Comma-separated k values");
    add_cfg_flag(sub, st, "--allocation", "allocation",
                 "uniform | dynamic | inverse-dynamic");
    add_cfg_flag(sub, st, "--directions", "directions", "Directions or 'all'");
    add_cfg_flag(sub, st, "--seeds", "seeds", "Evaluation subset seeds");
    add_cfg_flag(sub, st, "--subset", "subset", "Episodes per direction per seed");
    add_cfg_flag(sub, st, "--split", "split", "Corpus split");
  }
  {
    auto* sub = app.add_subcommand("sft-recover",
                                   "Supervised fine-tuning of a pruned checkpoint");
    auto st = add_common(sub, "sft-recover");
    add_input(sub, st, "corpus", "Corpus manifest");
    add_input(sub, st, "pruned", "Pruned checkpoint to recover");
    for (const char* key : {"steps", "batch_size", "lr", "beta1", "beta2", "eps",
                            "alpha", "clip_norm", "cosine", "directions"}) {
      std::string flag = "--" + std::string(key);
      for (auto& ch : flag) {
        if (ch == '_') ch = '-';
      }
      add_cfg_flag(sub, st, flag, key, std::string("Config key ") + key);
    }
  }
  {
    auto* sub = app.add_subcommand("distill",
                                   "Sequence-level distillation from the parent");
    auto st = add_common(sub, "distill");
    add_input(sub, st, "corpus", "Corpus manifest");
    add_input(sub, st, "model", "Teacher (parent) checkpoint");
    add_input(sub, st, "pruned", "Student (pruned) checkpoint");
    for (const char* key : {"steps", "batch_size", "lr", "beta1", "beta2", "eps",
                            "alpha", "clip_norm", "cosine", "target_langs",
                            "passages", "split"}) {
      std::string flag = "--" + std::string(key);
      for (auto& ch : flag) {
        if (ch == '_') ch = '-';
      }
      add_cfg_flag(sub, st, flag, key, std::string("Config key ") + key);
    }
  }
  {
    auto* sub = app.add_subcommand("overlap",
                                   "Retained-set IoU across importance tables");
    auto st = add_common(sub, "overlap");
    add_input(sub, st, "model", "Model checkpoint (for expert shape)");
    sub->add_option("--importance", st->importance_paths,
                    "Importance CSV (repeat once per language)")
        ->required();
    add_cfg_flag(sub, st, "--grid", "grid", "Comma-separated k values");
  }

  std::string replay_manifest, replay_scratch;
  {
    auto* sub = app.add_subcommand("replay",
                                   "Re-run a manifest and compare artifact hashes");
    sub->add_option("manifest", replay_manifest, "Path to a manifest.json")
        ->required();
    sub->add_option("--scratch", replay_scratch,
                    "Replay output directory (default: <out_dir>-replay)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    const std::string cmd = sub->get_name();
    if (cmd == "replay") {
      return run_replay(replay_manifest, replay_scratch);
    }

    CmdState& st = *states.at(cmd);
    KV cfg;
    apply_defaults(cmd, cfg);
    if (!st.common.config_file.empty()) load_config_file(st.common.config_file, cfg);
    for (const std::string& kv : st.common.sets) {
      const auto eq = kv.find('=');
      check(eq != std::string::npos && eq > 0, "--set expects key=value, got " + kv);
      cfg[kv.substr(0, eq)] = kv.substr(eq + 1);
    }
    for (const auto& [key, value] : st.flags) cfg[key] = value;
    cfg["workers"] = std::to_string(st.common.workers);

    std::string out_dir = st.common.out;
    if (const char* env = std::getenv("MOELAB_OUT"); env != nullptr && *env != '\0') {
      out_dir = env;
    }
    if (out_dir.empty()) out_dir = "out-" + cmd;

    std::vector<ArtifactRef> inputs;
    for (const auto& pi : st.inputs) inputs.push_back({pi.role, pi.path, ""});
    for (std::size_t i = 0; i < st.importance_paths.size(); ++i) {
      inputs.push_back(
          {"importance" + std::to_string(i), st.importance_paths[i], ""});
    }
    // Importance tables live in two files; declare the JSON sidecar so its
    // hash is pinned in the manifest as well.
    const std::size_t declared = inputs.size();
    for (std::size_t i = 0; i < declared; ++i) {
      const ArtifactRef& a = inputs[i];
      if (a.role.rfind("importance", 0) == 0 &&
          a.role.find("_sidecar") == std::string::npos) {
        inputs.push_back({a.role + "_sidecar", sidecar_for(a.path), ""});
      }
    }

    execute(cmd, cfg, std::move(inputs), out_dir, st.common.seed);
    return 0;
  } catch (const ContractError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const moelab::CheckpointError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "runtime failure: %s\n", e.what());
    return 2;
  }
}
