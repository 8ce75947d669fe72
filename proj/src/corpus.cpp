// Copyright (c) 2026 moelab authors
// SPDX-License-Identifier: Apache-2.0

#include "moelab/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include "json.hpp"
#include "moelab/rng.hpp"

namespace moelab {

using nlohmann::json;

std::string to_string(PosTransform t) {
  switch (t) {
    case PosTransform::identity: return "identity";
    case PosTransform::reverse: return "reverse";
    case PosTransform::rotate_left_1: return "rotate-left-1";
  }
  throw ContractError("to_string: unknown transform");
}

PosTransform pos_transform_from_string(const std::string& s) {
  if (s == "identity") return PosTransform::identity;
  if (s == "reverse") return PosTransform::reverse;
  if (s == "rotate-left-1") return PosTransform::rotate_left_1;
  throw ContractError("unknown positional transform: " + s);
}

const std::vector<Passage>& ParallelCorpus::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "dev") return dev;
  if (name == "devtest") return devtest;
  throw ContractError("unknown split: " + name);
}

std::vector<LanguageSpec> gen_languages(int n_langs, int vocab_per_lang,
                                        std::uint64_t seed) {
  check(n_langs >= 2, "gen_languages: need at least two languages");
  check(vocab_per_lang >= 8, "gen_languages: need V_c >= 8");
  const TokenLayout layout{n_langs, vocab_per_lang};
  Rng rng(seed);
  std::vector<LanguageSpec> langs(n_langs);
  for (int i = 0; i < n_langs; ++i) {
    LanguageSpec& spec = langs[i];
    spec.id = i;
    spec.block_offset = layout.block_offset(i);
    spec.perm.resize(vocab_per_lang);
    std::iota(spec.perm.begin(), spec.perm.end(), 0);
    if (i > 0) {
      // Fisher-Yates with our own RNG so the shuffle is seed-stable.
      Rng lang_rng = rng.fork(static_cast<std::uint64_t>(i));
      for (int j = vocab_per_lang - 1; j > 0; --j) {
        const int r = static_cast<int>(lang_rng.below(static_cast<std::uint64_t>(j + 1)));
        std::swap(spec.perm[j], spec.perm[r]);
      }
      spec.transform = static_cast<PosTransform>(lang_rng.below(3));
    }
    spec.inv_perm.resize(vocab_per_lang);
    for (int c = 0; c < vocab_per_lang; ++c) spec.inv_perm[spec.perm[c]] = c;
  }
  return langs;
}

static Passage apply_transform(const Passage& p, PosTransform t) {
  Passage out = p;
  switch (t) {
    case PosTransform::identity:
      break;
    case PosTransform::reverse:
      std::reverse(out.begin(), out.end());
      break;
    case PosTransform::rotate_left_1:
      if (out.size() > 1) std::rotate(out.begin(), out.begin() + 1, out.end());
      break;
  }
  return out;
}

static Passage undo_transform(const Passage& p, PosTransform t) {
  Passage out = p;
  switch (t) {
    case PosTransform::identity:
      break;
    case PosTransform::reverse:
      std::reverse(out.begin(), out.end());
      break;
    case PosTransform::rotate_left_1:
      if (out.size() > 1) std::rotate(out.begin(), out.end() - 1, out.end());
      break;
  }
  return out;
}

std::vector<int> render(const Passage& p, const LanguageSpec& lang,
                        const TokenLayout& layout) {
  const Passage transformed = apply_transform(p, lang.transform);
  std::vector<int> out(transformed.size());
  for (std::size_t i = 0; i < transformed.size(); ++i) {
    const int c = transformed[i];
    check(c >= 0 && c < layout.vocab_per_lang, "render: concept id out of range");
    out[i] = lang.block_offset + lang.perm[c];
  }
  return out;
}

Passage un_render(const std::vector<int>& tokens, const LanguageSpec& lang,
                  const TokenLayout& layout) {
  Passage transformed(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int local = tokens[i] - lang.block_offset;
    check(local >= 0 && local < layout.vocab_per_lang,
          "un_render: token outside language block");
    transformed[i] = lang.inv_perm[local];
  }
  return undo_transform(transformed, lang.transform);
}

std::vector<int> make_prompt(const Passage& p, const LanguageSpec& src,
                             const LanguageSpec& tgt, const TokenLayout& layout) {
  std::vector<int> tokens;
  tokens.reserve(p.size() + 4);
  tokens.push_back(TokenLayout::BOS);
  tokens.push_back(layout.tag(src.id));
  const std::vector<int> source = render(p, src, layout);
  tokens.insert(tokens.end(), source.begin(), source.end());
  tokens.push_back(TokenLayout::SEP);
  tokens.push_back(layout.tag(tgt.id));
  return tokens;
}

std::vector<int> reference_target(const Passage& p, const LanguageSpec& tgt,
                                  const TokenLayout& layout) {
  std::vector<int> target = render(p, tgt, layout);
  target.push_back(TokenLayout::EOS);
  return target;
}

static TranslationEpisode assemble_episode(const Passage& p,
                                           const std::vector<int>& target_segment,
                                           const LanguageSpec& src,
                                           const LanguageSpec& tgt,
                                           const TokenLayout& layout,
                                           int passage_id) {
  check(src.id != tgt.id, "make_episode: source and target language must differ");
  TranslationEpisode ep;
  ep.tokens = make_prompt(p, src, tgt, layout);
  const std::size_t prompt_len = ep.tokens.size();
  ep.tokens.insert(ep.tokens.end(), target_segment.begin(), target_segment.end());
  ep.tokens.push_back(TokenLayout::EOS);
  ep.loss_mask.assign(ep.tokens.size(), false);
  for (std::size_t i = prompt_len; i < ep.tokens.size(); ++i) ep.loss_mask[i] = true;
  ep.src_lang = src.id;
  ep.tgt_lang = tgt.id;
  ep.passage_id = passage_id;
  return ep;
}

TranslationEpisode make_episode(const Passage& p, const LanguageSpec& src,
                                const LanguageSpec& tgt, const TokenLayout& layout,
                                int passage_id) {
  return assemble_episode(p, render(p, tgt, layout), src, tgt, layout, passage_id);
}

TranslationEpisode make_episode_with_target(const Passage& p,
                                            const std::vector<int>& target_tokens,
                                            const LanguageSpec& src,
                                            const LanguageSpec& tgt,
                                            const TokenLayout& layout,
                                            int passage_id) {
  for (int tok : target_tokens) {
    check(tok >= 4 + layout.n_langs && tok < layout.vocab_size(),
          "make_episode_with_target: target token outside language blocks");
  }
  return assemble_episode(p, target_tokens, src, tgt, layout, passage_id);
}

ParallelCorpus gen_corpus(int n_langs, int vocab_per_lang, CorpusSizes sizes,
                          int len_min, int len_max, std::uint64_t seed) {
  check(sizes.train > 0 && sizes.dev > 0 && sizes.devtest > 0,
        "gen_corpus: split sizes must be positive");
  check(len_min >= 1 && len_min <= len_max, "gen_corpus: bad length bounds");
  ParallelCorpus corpus;
  corpus.n_langs = n_langs;
  corpus.vocab_per_lang = vocab_per_lang;
  corpus.len_min = len_min;
  corpus.len_max = len_max;
  corpus.seed = seed;
  Rng root(seed);
  corpus.languages = gen_languages(n_langs, vocab_per_lang, root.fork(0).seed());

  // Draw train+dev+devtest distinct concept passages in one stream, then
  // carve splits off in order; distinctness makes the splits disjoint.
  Rng passage_rng = root.fork(1);
  const int total = sizes.train + sizes.dev + sizes.devtest;
  std::set<Passage> seen;
  std::vector<Passage> all;
  all.reserve(total);
  while (static_cast<int>(all.size()) < total) {
    const int len = len_min + static_cast<int>(passage_rng.below(
                                  static_cast<std::uint64_t>(len_max - len_min + 1)));
    Passage p(len);
    for (int i = 0; i < len; ++i) {
      p[i] = static_cast<int>(passage_rng.below(static_cast<std::uint64_t>(vocab_per_lang)));
    }
    if (seen.insert(p).second) all.push_back(std::move(p));
  }
  corpus.train.assign(all.begin(), all.begin() + sizes.train);
  corpus.dev.assign(all.begin() + sizes.train, all.begin() + sizes.train + sizes.dev);
  corpus.devtest.assign(all.begin() + sizes.train + sizes.dev, all.end());
  return corpus;
}

// --- serialization ---------------------------------------------------------

static void append_split(const std::vector<Passage>& split, std::string& blob,
                         json& offsets) {
  for (const Passage& p : split) {
    const std::uint64_t offset = blob.size();
    for (int id : p) {
      const auto u = static_cast<std::uint32_t>(id);
      blob.push_back(static_cast<char>(u & 0xff));
      blob.push_back(static_cast<char>((u >> 8) & 0xff));
      blob.push_back(static_cast<char>((u >> 16) & 0xff));
      blob.push_back(static_cast<char>((u >> 24) & 0xff));
    }
    offsets.push_back(json::array({offset, p.size()}));
  }
}

void save_corpus(const ParallelCorpus& corpus, const std::string& json_path,
                 const std::string& bin_path) {
  std::string blob;
  json splits = json::object();
  for (const char* name : {"train", "dev", "devtest"}) {
    json offsets = json::array();
    append_split(corpus.split(name), blob, offsets);
    splits[name] = {{"count", corpus.split(name).size()}, {"offsets", offsets}};
  }

  json langs = json::array();
  for (const LanguageSpec& spec : corpus.languages) {
    langs.push_back({{"id", spec.id},
                     {"block_offset", spec.block_offset},
                     {"transform", to_string(spec.transform)},
                     {"perm", spec.perm}});
  }

  json manifest = {
      {"format", "moelab-corpus-v1"},
      {"n_langs", corpus.n_langs},
      {"vocab_per_lang", corpus.vocab_per_lang},
      {"len_min", corpus.len_min},
      {"len_max", corpus.len_max},
      {"seed", corpus.seed},
      {"languages", langs},
      {"splits", splits},
      {"bin_file", bin_path.substr(bin_path.find_last_of('/') + 1)},
      {"bin_hash", to_hex(fnv1a64(blob.data(), blob.size()))},
  };

  std::ofstream bin(bin_path, std::ios::binary);
  check(bin.good(), "save_corpus: cannot open " + bin_path);
  bin.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  bin.close();
  check(bin.good(), "save_corpus: write failed for " + bin_path);

  std::ofstream out(json_path);
  check(out.good(), "save_corpus: cannot open " + json_path);
  out << manifest.dump(2) << "\n";
  out.close();
  check(out.good(), "save_corpus: write failed for " + json_path);
}

static std::vector<Passage> read_split(const json& split, const std::string& blob) {
  std::vector<Passage> out;
  out.reserve(split.at("count").get<std::size_t>());
  for (const auto& entry : split.at("offsets")) {
    const std::uint64_t offset = entry.at(0).get<std::uint64_t>();
    const std::uint64_t len = entry.at(1).get<std::uint64_t>();
    check(offset + 4 * len <= blob.size(), "load_corpus: offset past end of blob");
    Passage p(len);
    for (std::uint64_t i = 0; i < len; ++i) {
      const auto* b =
          reinterpret_cast<const unsigned char*>(blob.data() + offset + 4 * i);
      p[i] = static_cast<int>(static_cast<std::uint32_t>(b[0]) |
                              (static_cast<std::uint32_t>(b[1]) << 8) |
                              (static_cast<std::uint32_t>(b[2]) << 16) |
                              (static_cast<std::uint32_t>(b[3]) << 24));
    }
    out.push_back(std::move(p));
  }
  return out;
}

ParallelCorpus load_corpus(const std::string& json_path) {
  std::ifstream in(json_path);
  check(in.good(), "load_corpus: cannot open " + json_path);
  json manifest = json::parse(in, nullptr, /*allow_exceptions=*/true);
  check(manifest.value("format", "") == "moelab-corpus-v1",
        "load_corpus: unrecognized format");

  ParallelCorpus corpus;
  corpus.n_langs = manifest.at("n_langs").get<int>();
  corpus.vocab_per_lang = manifest.at("vocab_per_lang").get<int>();
  corpus.len_min = manifest.at("len_min").get<int>();
  corpus.len_max = manifest.at("len_max").get<int>();
  corpus.seed = manifest.at("seed").get<std::uint64_t>();
  for (const auto& entry : manifest.at("languages")) {
    LanguageSpec spec;
    spec.id = entry.at("id").get<int>();
    spec.block_offset = entry.at("block_offset").get<int>();
    spec.transform = pos_transform_from_string(entry.at("transform").get<std::string>());
    spec.perm = entry.at("perm").get<std::vector<int>>();
    check(static_cast<int>(spec.perm.size()) == corpus.vocab_per_lang,
          "load_corpus: permutation length mismatch");
    spec.inv_perm.resize(spec.perm.size());
    for (int c = 0; c < static_cast<int>(spec.perm.size()); ++c) {
      spec.inv_perm[spec.perm[c]] = c;
    }
    corpus.languages.push_back(std::move(spec));
  }

  const std::string dir = json_path.substr(0, json_path.find_last_of('/') + 1);
  const std::string bin_path = dir + manifest.at("bin_file").get<std::string>();
  std::ifstream bin(bin_path, std::ios::binary);
  check(bin.good(), "load_corpus: cannot open " + bin_path);
  std::string blob((std::istreambuf_iterator<char>(bin)),
                   std::istreambuf_iterator<char>());
  check(to_hex(fnv1a64(blob.data(), blob.size())) ==
            manifest.at("bin_hash").get<std::string>(),
        "load_corpus: token blob hash mismatch");

  corpus.train = read_split(manifest.at("splits").at("train"), blob);
  corpus.dev = read_split(manifest.at("splits").at("dev"), blob);
  corpus.devtest = read_split(manifest.at("splits").at("devtest"), blob);
  return corpus;
}

}  // namespace moelab
