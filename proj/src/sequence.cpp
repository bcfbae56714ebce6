// Copyright 2026 The refseq Authors
// SPDX-License-Identifier: Apache-2.0

#include "refseq/sequence.hpp"

#include <string>

namespace refseq {

namespace {

Diagnostic at(std::size_t row, std::string msg) {
  return Diagnostic{row, std::move(msg)};
}

}  // namespace

std::optional<Diagnostic> validate_sequence(const AssembledSequence& seq) {
  const std::size_t L = seq.tokens.rows();
  if (seq.metas.size() != L) {
    return at(0, "metadata count " + std::to_string(seq.metas.size()) +
                     " does not match token rows " + std::to_string(L));
  }

  // Walk rows and track the block structure directly from metadata.
  int current_image = 0;     // image whose block is open, 0 = none yet
  int last_closed_image = 0; // highest image index whose block has ended
  bool text_started = false;
  std::size_t sep_run = 0;
  int sep_after = 0;  // image the current separator run follows
  std::vector<int> separators_after;

  for (std::size_t r = 0; r < L; ++r) {
    const TokenMeta& m = seq.metas[r];
    switch (m.kind) {
      case TokenKind::image: {
        if (text_started) return at(r, "image token after text");
        if (!m.image_index || *m.image_index < 1) {
          return at(r, "image token without a valid image index");
        }
        const int j = *m.image_index;
        if (j != current_image) {
          if (j <= last_closed_image || (current_image != 0 && j < current_image)) {
            return at(r, "non-contiguous image block");
          }
          if (j != std::max(current_image, last_closed_image) + 1) {
            return at(r, "image blocks out of index order");
          }
          if (current_image != 0) {
            last_closed_image = current_image;
            if (seq.options.use_separator &&
                (separators_after.empty() ||
                 separators_after.back() != current_image)) {
              return at(r, "missing separator between images " +
                               std::to_string(current_image) + " and " +
                               std::to_string(j));
            }
          }
          current_image = j;
        }
        if (sep_run != 0) sep_run = 0;
        break;
      }
      case TokenKind::separator: {
        if (text_started) return at(r, "separator after text");
        if (current_image == 0) return at(r, "separator before first image");
        if (!seq.options.use_separator) {
          return at(r, "separator present while separators are disabled");
        }
        if (!m.image_index || *m.image_index != current_image) {
          return at(r, "separator attributed to the wrong image");
        }
        if (sep_run == 0) {
          sep_after = current_image;
          separators_after.push_back(current_image);
        }
        if (m.slot != static_cast<std::int64_t>(sep_run)) {
          return at(r, "separator slot out of order");
        }
        ++sep_run;
        if (sep_run > seq.separator_width) {
          return at(r, "separator run longer than separator width");
        }
        break;
      }
      case TokenKind::text: {
        if (m.image_index) return at(r, "text token carries an image index");
        if (!text_started) {
          text_started = true;
          if (current_image != 0) last_closed_image = current_image;
        }
        break;
      }
    }
    if (m.kind != TokenKind::separator && sep_run != 0 &&
        sep_run != seq.separator_width) {
      return at(r, "separator run shorter than separator width");
    }
    if (m.kind != TokenKind::separator) sep_run = 0;
  }
  if (sep_run != 0 && sep_run != seq.separator_width) {
    return at(L, "separator run shorter than separator width");
  }
  (void)sep_after;

  const int final_image = std::max(current_image, last_closed_image);
  if (final_image != seq.image_count) {
    return at(L, "sequence holds " + std::to_string(final_image) +
                     " images but image_count is " +
                     std::to_string(seq.image_count));
  }
  if (seq.options.use_separator) {
    const std::size_t expected =
        seq.options.trailing_separator
            ? static_cast<std::size_t>(seq.image_count)
            : static_cast<std::size_t>(std::max(seq.image_count - 1, 0));
    if (separators_after.size() != expected) {
      return at(L, "expected " + std::to_string(expected) +
                       " separators, found " +
                       std::to_string(separators_after.size()));
    }
  }

  // Layout spans must tile [0, L) and agree with the metadata.
  std::size_t cursor = 0;
  for (const Span& s : seq.layout) {
    if (s.start != cursor) return at(s.start, "layout spans leave a gap or overlap");
    if (s.end() > L) return at(s.start, "layout span runs past sequence end");
    for (std::size_t r = s.start; r < s.end(); ++r) {
      const TokenMeta& m = seq.metas[r];
      if (m.kind != s.kind ||
          (s.kind != TokenKind::text && m.image_index != s.image_index)) {
        return at(r, "layout span disagrees with token metadata");
      }
    }
    cursor = s.end();
  }
  if (cursor != L) return at(cursor, "layout does not cover the sequence");
  return std::nullopt;
}

}  // namespace refseq
