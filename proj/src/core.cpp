// Copyright 2026 The refseq Authors
// SPDX-License-Identifier: Apache-2.0

#include "refseq/core.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace refseq {

void GridShape::validate() const {
  if (frames < 1 || height < 1 || width < 1) {
    throw ValidationError("grid shape must be positive, got " +
                          std::to_string(frames) + "x" +
                          std::to_string(height) + "x" +
                          std::to_string(width));
  }
}

void LatentImage::validate() const {
  grid.validate();
  if (image_index < 1) {
    throw ValidationError("image_index is 1-based, got " +
                          std::to_string(image_index));
  }
  if (static_cast<std::int64_t>(data.rows()) != grid.token_count()) {
    throw ValidationError("image " + std::to_string(image_index) + " has " +
                          std::to_string(data.rows()) +
                          " token rows but grid holds " +
                          std::to_string(grid.token_count()));
  }
  if (data.cols() == 0) {
    throw ValidationError("image has zero channels");
  }
  for (double v : data.flat()) {
    if (!std::isfinite(v)) {
      throw ValidationError("image " + std::to_string(image_index) +
                            " contains a non-finite value");
    }
  }
}

const char* to_string(TokenKind kind) {
  switch (kind) {
    case TokenKind::image:
      return "image";
    case TokenKind::separator:
      return "separator";
    case TokenKind::text:
      return "text";
  }
  return "unknown";
}

FlatImage flatten_image(const LatentImage& img) {
  img.validate();
  FlatImage out;
  out.tokens = img.data;
  out.metas.reserve(img.data.rows());
  for (std::int64_t f = 0; f < img.grid.frames; ++f) {
    for (std::int64_t h = 0; h < img.grid.height; ++h) {
      for (std::int64_t w = 0; w < img.grid.width; ++w) {
        out.metas.push_back(TokenMeta{TokenKind::image, img.image_index,
                                      Position3{f, h, w}, 0});
      }
    }
  }
  return out;
}

Matrix fold_image(const Matrix& tokens, std::span<const TokenMeta> metas,
                  const GridShape& grid) {
  grid.validate();
  if (metas.size() != tokens.rows() ||
      static_cast<std::int64_t>(tokens.rows()) != grid.token_count()) {
    throw ValidationError("fold_image: row count does not match grid");
  }
  Matrix out(tokens.rows(), tokens.cols());
  for (std::size_t r = 0; r < metas.size(); ++r) {
    const Position3& p = metas[r].cell;
    if (p.f < 0 || p.f >= grid.frames || p.h < 0 || p.h >= grid.height ||
        p.w < 0 || p.w >= grid.width) {
      throw ValidationError("fold_image: cell outside grid");
    }
    const std::size_t dst =
        static_cast<std::size_t>((p.f * grid.height + p.h) * grid.width + p.w);
    std::copy(tokens.row(r).begin(), tokens.row(r).end(), out.row(dst).begin());
  }
  return out;
}

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {
constexpr std::uint64_t rotl(std::uint64_t x, int k) {
  return (x << k) | (x >> (64 - k));
}
}  // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed) {
  std::uint64_t sm = seed;
  for (auto& s : s_) s = splitmix64(sm);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::uniform_int(std::uint64_t n) {
  if (n == 0) throw DomainError("uniform_int: empty range");
  // Rejection sampling on the top of the range keeps draws unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::uint64_t Rng::derive(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t s = seed ^ (0xd1b54a32d192ed03ULL * (stream + 1));
  splitmix64(s);
  return splitmix64(s);
}

}  // namespace refseq
