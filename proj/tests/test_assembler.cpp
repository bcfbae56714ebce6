// Copyright 2026 The refseq Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "refseq/assembler.hpp"
#include "refseq/sequence.hpp"
#include "test_util.hpp"

namespace refseq {
namespace {

using testing::binade_image;
using testing::random_image;

std::vector<LatentImage> images_of(const std::vector<GridShape>& grids, int channels,
                                   Rng& rng, bool binade = false) {
  std::vector<LatentImage> out;
  for (std::size_t i = 0; i < grids.size(); ++i) {
    const int idx = static_cast<int>(i) + 1;
    out.push_back(binade ? binade_image(idx, grids[i], channels, rng)
                          : random_image(idx, grids[i], channels, rng));
  }
  return out;
}

// Independent enumeration of the expected layout.
std::vector<Span> expected_layout(const std::vector<GridShape>& grids, std::size_t d,
                                  std::size_t text, bool sep, bool trailing) {
  std::vector<Span> spans;
  std::size_t at = 0;
  for (std::size_t i = 0; i < grids.size(); ++i) {
    const auto n = static_cast<std::size_t>(grids[i].token_count());
    spans.push_back({TokenKind::image, static_cast<int>(i) + 1, at, n});
    at += n;
    if (sep && (trailing || i + 1 < grids.size())) {
      spans.push_back({TokenKind::separator, static_cast<int>(i) + 1, at, d});
      at += d;
    }
  }
  if (text > 0) spans.push_back({TokenKind::text, 0, at, text});
  return spans;
}

TEST(Assemble, TwoImagesNoText) {
  Rng rng(1);
  const auto imgs = images_of({{1, 2, 2}, {1, 2, 2}}, 4, rng);
  const auto seq = assemble(imgs, SeparatorToken::random(1, 4, rng),
                            IndexEmbedConfig{10000.0, 4}, Matrix(0, 4));
  EXPECT_EQ(seq.length(), 10u);
  const std::vector<Span> want{{TokenKind::image, 1, 0, 4},
                               {TokenKind::separator, 1, 4, 1},
                               {TokenKind::image, 2, 5, 4},
                               {TokenKind::separator, 2, 9, 1}};
  EXPECT_EQ(seq.layout, want);
  EXPECT_FALSE(validate_sequence(seq).has_value());
}

TEST(Assemble, SingleImage) {
  Rng rng(2);
  const auto imgs = images_of({{2, 3, 2}}, 4, rng);
  const auto seq = assemble(imgs, SeparatorToken::random(1, 4, rng),
                            IndexEmbedConfig{10000.0, 4}, Matrix(0, 4));
  EXPECT_EQ(seq.length(), 13u);
}

TEST(Assemble, MixedGridsWideSeparator) {
  Rng rng(3);
  const std::vector<GridShape> grids{{1, 2, 2}, {1, 1, 3}, {1, 3, 1}};
  const auto seq = assemble(images_of(grids, 6, rng), SeparatorToken::random(2, 6, rng),
                            IndexEmbedConfig{10000.0, 6}, Matrix(0, 6));
  EXPECT_EQ(seq.length(), 16u);
  EXPECT_EQ(seq.layout, expected_layout(grids, 2, 0, true, true));
}

TEST(Assemble, LengthLawAndRoundTripOverRandomSpecs) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng.uniform_int(6));
    const std::size_t d = 1 + rng.uniform_int(2);
    const std::size_t text = rng.uniform_int(5);
    const int channels = 2 * (1 + static_cast<int>(rng.uniform_int(4)));
    const bool trailing = rng.uniform_int(4) != 0;
    std::vector<GridShape> grids;
    std::int64_t total = 0;
    for (int i = 0; i < n; ++i) {
      grids.push_back({1 + static_cast<std::int64_t>(rng.uniform_int(2)),
                       1 + static_cast<std::int64_t>(rng.uniform_int(4)),
                       1 + static_cast<std::int64_t>(rng.uniform_int(4))});
      total += grids.back().token_count();
    }
    const auto imgs = images_of(grids, channels, rng, /*binade=*/true);
    Matrix txt(text, static_cast<std::size_t>(channels));
    for (double& v : txt.flat()) v = rng.normal();
    AssemblyOptions opt;
    opt.trailing_separator = trailing;
    const IndexEmbedConfig icfg{10000.0, channels};
    const auto seq = assemble(imgs, SeparatorToken::random(d, channels, rng), icfg, txt, opt);

    const std::size_t seps = trailing ? n : n - 1;
    ASSERT_EQ(seq.length(), static_cast<std::size_t>(total) + seps * d + text);
    ASSERT_EQ(seq.layout, expected_layout(grids, d, text, true, trailing));
    ASSERT_FALSE(validate_sequence(seq).has_value()) << validate_sequence(seq)->message;
    const auto back = recover_images(seq, icfg);
    ASSERT_EQ(back.size(), imgs.size());
    for (int i = 0; i < n; ++i) EXPECT_EQ(back[i], imgs[i].data) << "trial " << trial;
  }
}

TEST(Assemble, GaussianRoundTripWithinOneUlp) {
  Rng rng(15);
  const std::vector<GridShape> grids{{1, 3, 3}, {1, 2, 4}, {1, 1, 5}};
  const auto imgs = images_of(grids, 8, rng);
  const IndexEmbedConfig icfg{10000.0, 8};
  const auto seq = assemble(imgs, SeparatorToken::random(1, 8, rng), icfg, Matrix(0, 8));
  const auto back = recover_images(seq, icfg);
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    for (std::size_t k = 0; k < back[i].size(); ++k) {
      const double x = imgs[i].data.flat()[k];
      EXPECT_LE(std::abs(back[i].flat()[k] - x), testing::ulp(std::abs(x) + 1.0));
    }
  }
}

TEST(Assemble, TextRowsBitwiseUntouched) {
  Rng rng(5);
  Matrix txt(3, 4);
  for (double& v : txt.flat()) v = rng.normal();
  const auto seq = assemble(images_of({{1, 2, 2}, {1, 1, 1}}, 4, rng),
                            SeparatorToken::random(1, 4, rng), IndexEmbedConfig{10000.0, 4}, txt);
  const std::size_t start = seq.length() - 3;
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(seq.tokens(start + r, c), txt(r, c));
    EXPECT_EQ(seq.metas[start + r].kind, TokenKind::text);
    EXPECT_FALSE(seq.metas[start + r].image_index.has_value());
  }
}

TEST(Assemble, SeparatorSharedAcrossInsertions) {
  Rng rng(6);
  auto seq = assemble(images_of({{1, 1, 2}, {1, 2, 1}, {1, 1, 1}}, 4, rng),
                      SeparatorToken::random(2, 4, rng), IndexEmbedConfig{10000.0, 4}, Matrix(0, 4));
  SeparatorToken changed = SeparatorToken::random(2, 4, rng);
  changed.values(1, 3) += 5.0;
  bind_separator(seq, changed);
  for (std::size_t r = 0; r < seq.length(); ++r) {
    if (seq.metas[r].kind != TokenKind::separator) continue;
    const auto slot = static_cast<std::size_t>(seq.metas[r].slot);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(seq.tokens(r, c), changed.values(slot, c));
  }
}

TEST(Assemble, IndexEmbeddingSharedWithinImage) {
  Rng rng(7);
  const auto imgs = images_of({{1, 2, 2}, {1, 2, 2}}, 4, rng);
  AssemblyOptions off;
  off.use_index_embed = false;
  const IndexEmbedConfig icfg{10000.0, 4};
  const auto sep = SeparatorToken::random(1, 4, rng);
  const auto on_seq = assemble(imgs, sep, icfg, Matrix(0, 4));
  const auto off_seq = assemble(imgs, sep, icfg, Matrix(0, 4), off);
  const auto e2 = index_embedding(2, 2, icfg).values;
  for (std::size_t r = 5; r < 9; ++r) {
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_EQ(off_seq.tokens(r, c), imgs[1].data(r - 5, c));
      EXPECT_EQ(on_seq.tokens(r, c), imgs[1].data(r - 5, c) + e2[c]);
    }
  }
}

TEST(Assemble, FlagsOffIsPlainConcatenation) {
  Rng rng(8);
  const auto imgs = images_of({{1, 2, 2}, {1, 1, 2}}, 4, rng);
  AssemblyOptions opt;
  opt.use_separator = false;
  opt.use_index_embed = false;
  const auto seq = assemble(imgs, SeparatorToken::random(1, 4, rng),
                            IndexEmbedConfig{10000.0, 4}, Matrix(0, 4), opt);
  EXPECT_EQ(seq.length(), 6u);
  EXPECT_EQ(seq.layout.size(), 2u);
  EXPECT_FALSE(validate_sequence(seq).has_value());
  const auto report = sequence_report(seq);
  EXPECT_NE(report.text.find("separator=off"), std::string::npos);
  EXPECT_NE(report.text.find("index_embed=off"), std::string::npos);
}

TEST(Assemble, Errors) {
  Rng rng(9);
  const IndexEmbedConfig icfg{10000.0, 4};
  const auto sep = SeparatorToken::random(1, 4, rng);
  EXPECT_THROW(assemble(std::vector<LatentImage>{}, sep, icfg, Matrix(0, 4)), ValidationError);
  auto imgs = images_of({{1, 1, 1}, {1, 1, 1}}, 4, rng);
  imgs[1].image_index = 3;
  EXPECT_THROW(assemble(imgs, sep, icfg, Matrix(0, 4)), ValidationError);
  imgs = images_of({{1, 1, 1}}, 6, rng);
  EXPECT_THROW(assemble(imgs, sep, icfg, Matrix(0, 4)), ValidationError);
  imgs = images_of({{1, 1, 1}}, 4, rng);
  EXPECT_THROW(assemble(imgs, sep, icfg, Matrix(1, 3)), ValidationError);
}

TEST(AssignPositions, ImagesSeparatorsText) {
  Rng rng(10);
  const auto seq = assemble(images_of({{1, 2, 2}, {1, 2, 2}, {1, 1, 1}}, 4, rng),
                            SeparatorToken::random(1, 4, rng), IndexEmbedConfig{10000.0, 4},
                            Matrix(2, 4));
  const auto pos = assign_positions(seq);
  ASSERT_EQ(pos.size(), seq.length());
  EXPECT_EQ(pos[3].pos, (Position3{0, 1, 1}));  // image 1 cell (0,1,1)
  EXPECT_TRUE(pos[3].rotate);
  EXPECT_EQ(pos[10].pos, (Position3{2, 0, 0}));  // image 3 cell (0,0,0)
  EXPECT_EQ(pos[9].pos, (Position3{1, 0, 0}));   // separator after image 2
  EXPECT_FALSE(pos[9].rotate);
  EXPECT_EQ(pos[12].pos, (Position3{4, 0, 0}));  // text at frame N + 1
  EXPECT_EQ(pos[13].pos, (Position3{4, 0, 1}));
}

TEST(AssignPositions, MultiFrameOffset) {
  Rng rng(11);
  const auto seq = assemble(images_of({{2, 1, 1}, {1, 1, 1}}, 4, rng),
                            SeparatorToken::random(1, 4, rng), IndexEmbedConfig{10000.0, 4},
                            Matrix(0, 4));
  const auto pos = assign_positions(seq);
  EXPECT_EQ(pos[1].pos, (Position3{1, 0, 0}));  // image 1 frame 1
  EXPECT_EQ(pos[3].pos, (Position3{1, 0, 0}));  // image 2 frame 0 -> j - 1 + f
}

TEST(AssignPositions, InheritFramePolicy) {
  Rng rng(12);
  AssemblyOptions opt;
  opt.separator_positions = SeparatorPositions::inherit_frame;
  const auto seq = assemble(images_of({{1, 1, 2}, {1, 1, 2}}, 4, rng),
                            SeparatorToken::random(1, 4, rng), IndexEmbedConfig{10000.0, 4},
                            Matrix(0, 4), opt);
  const auto pos = assign_positions(seq);
  EXPECT_EQ(pos[5].pos, (Position3{1, 0, 0}));
  EXPECT_TRUE(pos[5].rotate);
}

TEST(SequenceReport, CountsSpans) {
  Rng rng(13);
  std::vector<GridShape> grids(5, GridShape{1, 1, 2});
  const auto seq = assemble(images_of(grids, 4, rng), SeparatorToken::random(1, 4, rng),
                            IndexEmbedConfig{10000.0, 4}, Matrix(0, 4));
  const auto report = sequence_report(seq);
  EXPECT_NE(report.text.find("N=5"), std::string::npos);
  EXPECT_NE(report.text.find("separator spans: 5"), std::string::npos);
  EXPECT_EQ(report.json["image_count"].get<int>(), 5);
  int seps = 0;
  for (const auto& s : seq.layout) seps += s.kind == TokenKind::separator;
  EXPECT_EQ(seps, 5);
}

TEST(SeparatorToken, InitStatistics) {
  Rng rng(14);
  const auto sep = SeparatorToken::random(100, 100, rng);
  double s = 0.0, s2 = 0.0;
  for (double v : sep.values.flat()) {
    s += v;
    s2 += v * v;
  }
  const double n = static_cast<double>(sep.values.size());
  const double sd = std::sqrt(s2 / n - (s / n) * (s / n));
  EXPECT_GE(sd, 0.015);
  EXPECT_LE(sd, 0.025);
}

}  // namespace
}  // namespace refseq
