// Copyright (c) 2026 moelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic n-way-parallel translation world. Each "language" is a
// substitution cipher over a shared concept vocabulary plus a positional
// transform, so translation is an exactly learnable bijection and every
// passage has one reference rendering per language.
//
// Token id layout (fixed so corpora and checkpoints are independently
// regenerable):
//   0..3                specials PAD, BOS, EOS, SEP
//   4..4+n_langs-1      language tags
//   4+n_langs + i*V_c   start of language i's block of V_c ids

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "moelab/common.hpp"

namespace moelab {

enum class PosTransform { identity, reverse, rotate_left_1 };

std::string to_string(PosTransform t);
PosTransform pos_transform_from_string(const std::string& s);

struct TokenLayout {
  int n_langs = 0;
  int vocab_per_lang = 0;  // V_c

  static constexpr int PAD = 0;
  static constexpr int BOS = 1;
  static constexpr int EOS = 2;
  static constexpr int SEP = 3;

  int tag(int lang) const { return 4 + lang; }
  int block_offset(int lang) const { return 4 + n_langs + lang * vocab_per_lang; }
  int vocab_size() const { return 4 + n_langs + n_langs * vocab_per_lang; }
  // Language owning a token id, or -1 for specials and tags.
  int lang_of_token(int tok) const {
    const int base = 4 + n_langs;
    if (tok < base || tok >= vocab_size()) return -1;
    return (tok - base) / vocab_per_lang;
  }
};

struct LanguageSpec {
  int id = 0;
  int block_offset = 0;
  std::vector<int> perm;      // concept id -> block-local id, bijection
  std::vector<int> inv_perm;  // block-local id -> concept id
  PosTransform transform = PosTransform::identity;
};

using Passage = std::vector<int>;  // concept ids in [0, V_c)

struct TranslationEpisode {
  std::vector<int> tokens;      // BOS, src tag, source, SEP, tgt tag, target, EOS
  std::vector<bool> loss_mask;  // marks exactly the target rendering plus EOS
  int src_lang = -1;
  int tgt_lang = -1;
  int passage_id = -1;
};

struct CorpusSizes {
  int train = 4096;
  int dev = 256;
  int devtest = 256;
};

struct ParallelCorpus {
  int n_langs = 0;
  int vocab_per_lang = 0;
  int len_min = 0;
  int len_max = 0;
  std::uint64_t seed = 0;
  std::vector<LanguageSpec> languages;
  std::vector<Passage> train, dev, devtest;

  TokenLayout layout() const { return TokenLayout{n_langs, vocab_per_lang}; }
  const std::vector<Passage>& split(const std::string& name) const;
};

// Deterministic language generation. Language 0 (the pivot) gets the
// identity permutation and identity transform; the rest draw a random
// permutation and a transform uniform over the three-element set.
std::vector<LanguageSpec> gen_languages(int n_langs, int vocab_per_lang,
                                        std::uint64_t seed);

// Positional transform first, then per-id substitution into the block.
std::vector<int> render(const Passage& p, const LanguageSpec& lang,
                        const TokenLayout& layout);

// Exact inverse of render; throws if a token lies outside the block.
Passage un_render(const std::vector<int>& tokens, const LanguageSpec& lang,
                  const TokenLayout& layout);

// Prompt prefix of an episode: BOS, src tag, rendered source, SEP, tgt tag.
std::vector<int> make_prompt(const Passage& p, const LanguageSpec& src,
                             const LanguageSpec& tgt, const TokenLayout& layout);

// Reference continuation of the prompt: rendered target plus EOS.
std::vector<int> reference_target(const Passage& p, const LanguageSpec& tgt,
                                  const TokenLayout& layout);

TranslationEpisode make_episode(const Passage& p, const LanguageSpec& src,
                                const LanguageSpec& tgt, const TokenLayout& layout,
                                int passage_id = -1);

// Episode with an explicit (e.g. model-generated) target segment; the
// target must not contain specials, and EOS is appended by this function.
TranslationEpisode make_episode_with_target(const Passage& p,
                                            const std::vector<int>& target_tokens,
                                            const LanguageSpec& src,
                                            const LanguageSpec& tgt,
                                            const TokenLayout& layout,
                                            int passage_id = -1);

ParallelCorpus gen_corpus(int n_langs, int vocab_per_lang, CorpusSizes sizes,
                          int len_min, int len_max, std::uint64_t seed);

// JSON manifest + little-endian u32 token blob with per-sequence offsets.
void save_corpus(const ParallelCorpus& corpus, const std::string& json_path,
                 const std::string& bin_path);
ParallelCorpus load_corpus(const std::string& json_path);

}  // namespace moelab
