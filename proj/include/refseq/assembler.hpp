// Copyright 2026 The refseq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <vector>

#include "refseq/canonical_json.hpp"
#include "refseq/core.hpp"
#include "refseq/index_embed.hpp"
#include "refseq/sequence.hpp"

namespace refseq {

// Shared boundary token of shape d x C. One instance backs every insertion
// point of a sequence.
struct SeparatorToken {
  Matrix values;  // width x channels
  bool learnable = true;

  std::size_t width() const { return values.rows(); }
  std::size_t channels() const { return values.cols(); }
  void validate() const;

  // Zero-mean Gaussian init.
  static SeparatorToken random(std::size_t width, std::size_t channels,
                               Rng& rng, double stddev = 0.02);
};

// Image blocks with their index embedding, a separator after each image
// (optionally not after the last), then the text rows untouched.
AssembledSequence assemble(std::span<const LatentImage> images,
                           const SeparatorToken& sep,
                           const IndexEmbedConfig& icfg, const Matrix& text,
                           const AssemblyOptions& options = {});

// Rewrites every separator row from `sep`.
void bind_separator(AssembledSequence& seq, const SeparatorToken& sep);

// RoPE coordinate of one row. rotate = false means zero angles.
struct RopePosition {
  Position3 pos;
  bool rotate = true;
  bool operator==(const RopePosition&) const = default;
};

// Image j, cell (f, h, w)  -> (j - 1 + f, h, w)
// Separator after image j  -> (j - 1, 0, 0), rotated only under inherit_frame
// Text row t               -> (N + 1, 0, t)
std::vector<RopePosition> assign_positions(const AssembledSequence& seq);

// Per-image token matrices with the index embedding removed.
std::vector<Matrix> recover_images(const AssembledSequence& seq,
                                   const IndexEmbedConfig& icfg);

struct SequenceReport {
  std::string text;
  Json json;
};

SequenceReport sequence_report(const AssembledSequence& seq);

}  // namespace refseq
