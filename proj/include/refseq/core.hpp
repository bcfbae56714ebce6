// Copyright 2026 The refseq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace refseq {

// Error hierarchy. The CLI maps these onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ValidationError : public Error {
 public:
  using Error::Error;
};
class ConfigError : public Error {
 public:
  using Error::Error;
};
class DomainError : public Error {
 public:
  using Error::Error;
};
class TrainingError : public Error {
 public:
  using Error::Error;
};
class SpecError : public Error {
 public:
  using Error::Error;
};
class IoError : public Error {
 public:
  using Error::Error;
};

// Dense row-major matrix. Used for token matrices, parameter blocks and
// activations alike.
template <typename T>
class BasicMatrix {
 public:
  using value_type = T;

  BasicMatrix() = default;
  BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<T> flat() { return data_; }
  std::span<const T> flat() const { return data_; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const BasicMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = BasicMatrix<double>;

template <typename To, typename From>
BasicMatrix<To> matrix_cast(const BasicMatrix<From>& m) {
  BasicMatrix<To> out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) {
    out.flat()[i] = static_cast<To>(m.flat()[i]);
  }
  return out;
}

// Token grid of one image: frames x height x width.
struct GridShape {
  std::int64_t frames = 1;
  std::int64_t height = 1;
  std::int64_t width = 1;

  std::int64_t token_count() const { return frames * height * width; }
  void validate() const;
  bool operator==(const GridShape&) const = default;
};

struct Position3 {
  std::int64_t f = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;
  bool operator==(const Position3&) const = default;
};

// One reference image in latent space. image_index is 1-based.
struct LatentImage {
  int image_index = 1;
  GridShape grid;
  Matrix data;  // grid.token_count() rows x channels

  std::size_t channels() const { return data.cols(); }
  void validate() const;
};

enum class TokenKind { image, separator, text };

const char* to_string(TokenKind kind);

// Provenance of one row of an assembled sequence.
//  image:     image_index = j, cell = grid cell (f, h, w)
//  separator: image_index = j of the preceding image, slot = column in [0, d)
//  text:      no image_index, slot = position within the text span
struct TokenMeta {
  TokenKind kind = TokenKind::image;
  std::optional<int> image_index;
  Position3 cell;
  std::int64_t slot = 0;

  bool operator==(const TokenMeta&) const = default;
};

struct FlatImage {
  Matrix tokens;
  std::vector<TokenMeta> metas;
};

// Row-major (f, then h, then w) flattening of an image grid.
FlatImage flatten_image(const LatentImage& img);

// Inverse of flatten_image: places each row back at its recorded cell.
Matrix fold_image(const Matrix& tokens, std::span<const TokenMeta> metas,
                  const GridShape& grid);

// splitmix64-seeded xoshiro256** generator. Integer draws are bit-identical
// on every platform; normal() goes through libm.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_int(std::uint64_t n);
  // Standard normal via Box-Muller.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  std::uint64_t seed() const { return seed_; }

  // Seed derived from (seed, stream) so that independent streams do not
  // overlap in practice.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream);

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t& state);

}  // namespace refseq
