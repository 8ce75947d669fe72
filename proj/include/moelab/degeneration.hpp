// Copyright (c) 2026 moelab authors
// SPDX-License-Identifier: Apache-2.0
//
// Generation-failure taxonomy for the toy task. Degenerate outputs score
// zero on exact match but are counted separately so error rates can be
// reported alongside quality.

#pragma once

#include <string>
#include <vector>

#include "moelab/corpus.hpp"

namespace moelab {

enum class ErrorKind { ok, no_eos, off_target_vocab };

inline std::string to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::ok: return "ok";
    case ErrorKind::no_eos: return "no-eos";
    case ErrorKind::off_target_vocab: return "off-target-vocab";
  }
  return "unknown";
}

// Generation cap used everywhere a model decodes a translation.
inline int decode_cap(int source_len) { return 2 * source_len + 8; }

// "no-eos" if EOS never appears within the cap; otherwise
// "off-target-vocab" if strictly more than 20% of the emitted tokens lie
// outside the target language's block plus EOS. no-eos takes precedence
// when both conditions hold.
inline ErrorKind detect_degeneration(const std::vector<int>& generated, int target_lang,
                                     const TokenLayout& layout, int source_len) {
  const int cap = decode_cap(source_len);
  bool saw_eos = false;
  int within = 0;
  for (int i = 0; i < static_cast<int>(generated.size()) && i < cap; ++i) {
    ++within;
    if (generated[i] == TokenLayout::EOS) {
      saw_eos = true;
      break;
    }
  }
  if (!saw_eos) return ErrorKind::no_eos;

  int off = 0;
  for (int i = 0; i < within; ++i) {
    const int tok = generated[i];
    if (tok == TokenLayout::EOS) continue;
    if (layout.lang_of_token(tok) != target_lang) ++off;
  }
  if (5 * off > within) return ErrorKind::off_target_vocab;  // strict > 20%
  return ErrorKind::ok;
}

}  // namespace moelab
