// Copyright 2026 The refseq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "refseq/core.hpp"

namespace refseq {

struct IndexEmbedConfig {
  double tau = 10000.0;
  int channels = 32;

  void validate() const;
  bool operator==(const IndexEmbedConfig&) const = default;
};

// Identity vector of image j out of N:
//   values[2k]   = sin(j~ / tau^(2k/C))
//   values[2k+1] = cos(j~ / tau^(2k/C)),   j~ = j / N
// Fixed, never trained.
struct IndexEmbedding {
  int image_index = 1;
  int total_images = 1;
  std::vector<double> values;
};

// Throws DomainError when j is outside [1, N].
IndexEmbedding index_embedding(int j, int n, const IndexEmbedConfig& cfg);

// N x C, row j - 1 = index_embedding(j, N).
Matrix embedding_table(int n, const IndexEmbedConfig& cfg);

// Adds E to every row. All tokens of one image receive the same vector.
Matrix add_index_embedding(const Matrix& tokens, const IndexEmbedding& e);
Matrix subtract_index_embedding(const Matrix& tokens, const IndexEmbedding& e);

std::string embedding_table_json(int n, const IndexEmbedConfig& cfg);

}  // namespace refseq
