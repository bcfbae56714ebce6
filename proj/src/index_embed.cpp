// Copyright 2026 The refseq Authors
// SPDX-License-Identifier: Apache-2.0

#include "refseq/index_embed.hpp"

#include <cmath>

#include "refseq/canonical_json.hpp"

namespace refseq {

void IndexEmbedConfig::validate() const {
  if (!(tau > 1.0) || !std::isfinite(tau)) {
    throw ConfigError("index embedding base tau must be > 1");
  }
  if (channels < 2 || channels % 2 != 0) {
    throw ConfigError("index embedding channels must be even and >= 2, got " +
                      std::to_string(channels));
  }
}

IndexEmbedding index_embedding(int j, int n, const IndexEmbedConfig& cfg) {
  cfg.validate();
  if (n < 1 || j < 1 || j > n) {
    throw DomainError("image index " + std::to_string(j) +
                      " outside [1, " + std::to_string(n) + "]");
  }
  IndexEmbedding e{j, n, std::vector<double>(static_cast<std::size_t>(cfg.channels))};
  // j~ is rounded to double first so E(j, N) == E(cj, cN) bit for bit.
  const double normalized = static_cast<double>(j) / static_cast<double>(n);
  const long double tau = cfg.tau;
  for (int k = 0; k < cfg.channels / 2; ++k) {
    const long double denom =
        std::pow(tau, 2.0L * k / static_cast<long double>(cfg.channels));
    const long double angle = static_cast<long double>(normalized) / denom;
    e.values[static_cast<std::size_t>(2 * k)] = static_cast<double>(std::sin(angle));
    e.values[static_cast<std::size_t>(2 * k + 1)] = static_cast<double>(std::cos(angle));
  }
  return e;
}

Matrix embedding_table(int n, const IndexEmbedConfig& cfg) {
  if (n < 1) throw DomainError("embedding table needs N >= 1");
  Matrix out(static_cast<std::size_t>(n), static_cast<std::size_t>(cfg.channels));
  for (int j = 1; j <= n; ++j) {
    const IndexEmbedding e = index_embedding(j, n, cfg);
    std::copy(e.values.begin(), e.values.end(),
              out.row(static_cast<std::size_t>(j - 1)).begin());
  }
  return out;
}

namespace {

Matrix shift_rows(const Matrix& tokens, const IndexEmbedding& e, double sign) {
  if (tokens.cols() != e.values.size()) {
    throw ValidationError("index embedding has " +
                          std::to_string(e.values.size()) +
                          " channels but tokens have " +
                          std::to_string(tokens.cols()));
  }
  Matrix out = tokens;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += sign * e.values[c];
  }
  return out;
}

}  // namespace

Matrix add_index_embedding(const Matrix& tokens, const IndexEmbedding& e) {
  return shift_rows(tokens, e, 1.0);
}

Matrix subtract_index_embedding(const Matrix& tokens, const IndexEmbedding& e) {
  return shift_rows(tokens, e, -1.0);
}

std::string embedding_table_json(int n, const IndexEmbedConfig& cfg) {
  const Matrix table = embedding_table(n, cfg);
  Json rows = Json::array();
  for (std::size_t r = 0; r < table.rows(); ++r) {
    rows.push_back(std::vector<double>(table.row(r).begin(), table.row(r).end()));
  }
  Json j;
  j["channels"] = cfg.channels;
  j["tau"] = cfg.tau;
  j["total_images"] = n;
  j["rows"] = std::move(rows);
  return dump_canonical(j);
}

}  // namespace refseq
