// Copyright 2026 The refseq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "refseq/core.hpp"

namespace refseq {

// Channel split of one attention head across the frame, height and width axes.
struct RopeConfig {
  std::array<int, 3> axes_dim{8, 12, 12};
  double theta = 10000.0;

  int head_dim() const { return axes_dim[0] + axes_dim[1] + axes_dim[2]; }
  void validate() const;
  bool operator==(const RopeConfig&) const = default;
};

// Per-axis inverse frequencies; entry i of an axis with d channels is
// theta^(-2i/d).
struct FrequencyTable {
  std::vector<double> frame;
  std::vector<double> height;
  std::vector<double> width;

  std::size_t angle_count() const {
    return frame.size() + height.size() + width.size();
  }
};

FrequencyTable build_freq_table(const RopeConfig& cfg);

// [f * frame, h * height, w * width], length head_dim / 2.
std::vector<double> token_frequencies(const Position3& pos,
                                      const FrequencyTable& table);
void token_frequencies(const Position3& pos, const FrequencyTable& table,
                       std::span<double> out);

enum class RopeForm {
  // Interleaved pairwise rotation of (x[2i], x[2i+1]) by angle a_i.
  rotation,
  // The printed even/odd shorthand read literally:
  //   out[2i]   = x[2i] cos a + x[2i+1] sin a
  //   out[2i+1] = x[2i+1] cos a + x[2i] sin a
  // Not norm preserving. Kept for comparison only.
  literal,
};

std::vector<double> apply_rope(std::span<const double> x,
                               std::span<const double> angles,
                               RopeForm form = RopeForm::rotation);

// Rotates q at p_q and k at p_k with the same table.
std::pair<std::vector<double>, std::vector<double>> positions_to_rotated_qk(
    std::span<const double> q, std::span<const double> k, const Position3& p_q,
    const Position3& p_k, const FrequencyTable& table);

// Canonical JSON dump of a table together with the config that produced it.
std::string freq_table_json(const RopeConfig& cfg, const FrequencyTable& table);

}  // namespace refseq
