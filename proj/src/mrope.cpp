// Copyright 2026 The refseq Authors
// SPDX-License-Identifier: Apache-2.0

#include "refseq/mrope.hpp"

#include <cmath>

#include "refseq/canonical_json.hpp"

namespace refseq {

void RopeConfig::validate() const {
  for (int d : axes_dim) {
    if (d < 2 || d % 2 != 0) {
      throw ConfigError("rope axis dimension must be even and >= 2, got " +
                        std::to_string(d));
    }
  }
  if (!(theta > 1.0) || !std::isfinite(theta)) {
    throw ConfigError("rope base must be > 1");
  }
}

namespace {

// Evaluated in long double and rounded once so the table does not depend on
// the last-ulp behaviour of the platform's double pow.
std::vector<double> axis_freqs(int dim, double theta) {
  std::vector<double> out(static_cast<std::size_t>(dim / 2));
  for (int i = 0; i < dim / 2; ++i) {
    const long double expo = -2.0L * i / dim;
    out[static_cast<std::size_t>(i)] =
        static_cast<double>(std::pow(static_cast<long double>(theta), expo));
  }
  return out;
}

}  // namespace

FrequencyTable build_freq_table(const RopeConfig& cfg) {
  cfg.validate();
  return FrequencyTable{axis_freqs(cfg.axes_dim[0], cfg.theta),
                        axis_freqs(cfg.axes_dim[1], cfg.theta),
                        axis_freqs(cfg.axes_dim[2], cfg.theta)};
}

void token_frequencies(const Position3& pos, const FrequencyTable& table,
                       std::span<double> out) {
  if (out.size() != table.angle_count()) {
    throw ValidationError("token_frequencies: output length mismatch");
  }
  std::size_t i = 0;
  for (double f : table.frame) out[i++] = static_cast<double>(pos.f) * f;
  for (double f : table.height) out[i++] = static_cast<double>(pos.h) * f;
  for (double f : table.width) out[i++] = static_cast<double>(pos.w) * f;
}

std::vector<double> token_frequencies(const Position3& pos,
                                      const FrequencyTable& table) {
  std::vector<double> out(table.angle_count());
  token_frequencies(pos, table, out);
  return out;
}

std::vector<double> apply_rope(std::span<const double> x,
                               std::span<const double> angles, RopeForm form) {
  if (x.size() != 2 * angles.size()) {
    throw ValidationError("apply_rope: vector length " +
                          std::to_string(x.size()) + " needs " +
                          std::to_string(x.size() / 2) + " angles, got " +
                          std::to_string(angles.size()));
  }
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < angles.size(); ++i) {
    const double e = x[2 * i];
    const double o = x[2 * i + 1];
    const double c = std::cos(angles[i]);
    const double s = std::sin(angles[i]);
    if (form == RopeForm::rotation) {
      out[2 * i] = e * c - o * s;
      out[2 * i + 1] = e * s + o * c;
    } else {
      out[2 * i] = e * c + o * s;
      out[2 * i + 1] = o * c + e * s;
    }
  }
  return out;
}

std::pair<std::vector<double>, std::vector<double>> positions_to_rotated_qk(
    std::span<const double> q, std::span<const double> k, const Position3& p_q,
    const Position3& p_k, const FrequencyTable& table) {
  return {apply_rope(q, token_frequencies(p_q, table)),
          apply_rope(k, token_frequencies(p_k, table))};
}

std::string freq_table_json(const RopeConfig& cfg, const FrequencyTable& table) {
  Json j;
  j["axes_dim"] = cfg.axes_dim;
  j["base"] = cfg.theta;
  j["head_dim"] = cfg.head_dim();
  j["frame"] = table.frame;
  j["height"] = table.height;
  j["width"] = table.width;
  return dump_canonical(j);
}

}  // namespace refseq
