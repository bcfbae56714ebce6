// Copyright 2026 The refseq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "refseq/core.hpp"

namespace refseq {

// Where a separator sits in RoPE space.
enum class SeparatorPositions {
  identity,       // zero angles, no rotation
  inherit_frame,  // frame of the preceding image, h = w = 0, rotated
};

struct AssemblyOptions {
  bool use_separator = true;
  bool use_index_embed = true;
  // A separator after the last image too (N separators) instead of N - 1.
  bool trailing_separator = true;
  SeparatorPositions separator_positions = SeparatorPositions::identity;
};

struct Span {
  TokenKind kind = TokenKind::image;
  int image_index = 0;  // 0 for text
  std::size_t start = 0;
  std::size_t length = 0;

  std::size_t end() const { return start + length; }
  bool operator==(const Span&) const = default;
};

struct AssembledSequence {
  Matrix tokens;  // L x C
  std::vector<TokenMeta> metas;
  int image_count = 0;
  std::size_t separator_width = 0;
  std::size_t text_length = 0;
  std::vector<Span> layout;  // disjoint, ordered, covering [0, L)
  AssemblyOptions options;

  std::size_t length() const { return tokens.rows(); }
  std::size_t channels() const { return tokens.cols(); }
};

struct Diagnostic {
  std::size_t row = 0;
  std::string message;
};

// Checks the metadata partition, per-image contiguity and separator placement
// against seq.options. Returns the first violation, or nullopt when the
// sequence is well formed.
std::optional<Diagnostic> validate_sequence(const AssembledSequence& seq);

}  // namespace refseq
