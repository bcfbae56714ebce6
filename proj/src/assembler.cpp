// Copyright 2026 The refseq Authors
// SPDX-License-Identifier: Apache-2.0

#include "refseq/assembler.hpp"

#include <cmath>
#include <sstream>

namespace refseq {

void SeparatorToken::validate() const {
  if (values.rows() < 1) throw ValidationError("separator width must be >= 1");
  if (values.cols() < 1) throw ValidationError("separator needs channels");
  for (double v : values.flat()) {
    if (!std::isfinite(v)) throw ValidationError("separator value not finite");
  }
}

SeparatorToken SeparatorToken::random(std::size_t width, std::size_t channels,
                                      Rng& rng, double stddev) {
  SeparatorToken sep{Matrix(width, channels), true};
  for (double& v : sep.values.flat()) v = rng.normal(0.0, stddev);
  return sep;
}

namespace {

void append_rows(Matrix& dst, std::size_t& cursor, const Matrix& src) {
  for (std::size_t r = 0; r < src.rows(); ++r) {
    std::copy(src.row(r).begin(), src.row(r).end(), dst.row(cursor++).begin());
  }
}

}  // namespace

AssembledSequence assemble(std::span<const LatentImage> images,
                           const SeparatorToken& sep,
                           const IndexEmbedConfig& icfg, const Matrix& text,
                           const AssemblyOptions& options) {
  if (images.empty()) throw ValidationError("assemble: empty image list");
  const std::size_t channels = images.front().channels();
  const int n = static_cast<int>(images.size());
  for (int i = 0; i < n; ++i) {
    const LatentImage& img = images[static_cast<std::size_t>(i)];
    img.validate();
    if (img.image_index != i + 1) {
      throw ValidationError("image indices must run 1..N in order; slot " +
                            std::to_string(i + 1) + " holds image " +
                            std::to_string(img.image_index));
    }
    if (img.channels() != channels) {
      throw ValidationError("image " + std::to_string(i + 1) + " has " +
                            std::to_string(img.channels()) +
                            " channels, expected " + std::to_string(channels));
    }
  }
  if (options.use_separator) {
    sep.validate();
    if (sep.channels() != channels) {
      throw ValidationError("separator has " + std::to_string(sep.channels()) +
                            " channels, images have " + std::to_string(channels));
    }
  }
  if (options.use_index_embed && static_cast<std::size_t>(icfg.channels) != channels) {
    throw ValidationError("index embedding channels differ from image channels");
  }
  if (!text.empty() && text.cols() != channels) {
    throw ValidationError("text tokens have " + std::to_string(text.cols()) +
                          " channels, expected " + std::to_string(channels));
  }

  const std::size_t d = options.use_separator ? sep.width() : 0;
  const std::size_t sep_count =
      options.use_separator
          ? (options.trailing_separator ? static_cast<std::size_t>(n)
                                        : static_cast<std::size_t>(n - 1))
          : 0;
  std::size_t length = sep_count * d + text.rows();
  for (const auto& img : images) length += img.data.rows();

  AssembledSequence seq;
  seq.tokens = Matrix(length, channels);
  seq.metas.reserve(length);
  seq.image_count = n;
  seq.separator_width = d;
  seq.text_length = text.rows();
  seq.options = options;

  std::size_t cursor = 0;
  for (int i = 0; i < n; ++i) {
    const LatentImage& img = images[static_cast<std::size_t>(i)];
    FlatImage flat = flatten_image(img);
    if (options.use_index_embed) {
      flat.tokens = add_index_embedding(flat.tokens, index_embedding(i + 1, n, icfg));
    }
    seq.layout.push_back(Span{TokenKind::image, i + 1, cursor, flat.tokens.rows()});
    append_rows(seq.tokens, cursor, flat.tokens);
    seq.metas.insert(seq.metas.end(), flat.metas.begin(), flat.metas.end());

    const bool last = i + 1 == n;
    if (options.use_separator && (!last || options.trailing_separator)) {
      seq.layout.push_back(Span{TokenKind::separator, i + 1, cursor, d});
      append_rows(seq.tokens, cursor, sep.values);
      for (std::size_t s = 0; s < d; ++s) {
        seq.metas.push_back(TokenMeta{TokenKind::separator, i + 1, Position3{},
                                      static_cast<std::int64_t>(s)});
      }
    }
  }
  if (text.rows() > 0) {
    seq.layout.push_back(Span{TokenKind::text, 0, cursor, text.rows()});
    append_rows(seq.tokens, cursor, text);
    for (std::size_t t = 0; t < text.rows(); ++t) {
      seq.metas.push_back(TokenMeta{TokenKind::text, std::nullopt, Position3{},
                                    static_cast<std::int64_t>(t)});
    }
  }
  return seq;
}

void bind_separator(AssembledSequence& seq, const SeparatorToken& sep) {
  if (seq.separator_width == 0) return;
  if (sep.width() != seq.separator_width || sep.channels() != seq.channels()) {
    throw ValidationError("bind_separator: separator shape does not match sequence");
  }
  for (const Span& s : seq.layout) {
    if (s.kind != TokenKind::separator) continue;
    for (std::size_t k = 0; k < s.length; ++k) {
      std::copy(sep.values.row(k).begin(), sep.values.row(k).end(),
                seq.tokens.row(s.start + k).begin());
    }
  }
}

std::vector<RopePosition> assign_positions(const AssembledSequence& seq) {
  std::vector<RopePosition> out;
  out.reserve(seq.metas.size());
  const std::int64_t n = seq.image_count;
  for (const TokenMeta& m : seq.metas) {
    switch (m.kind) {
      case TokenKind::image: {
        const std::int64_t j = *m.image_index;
        out.push_back({Position3{j - 1 + m.cell.f, m.cell.h, m.cell.w}, true});
        break;
      }
      case TokenKind::separator: {
        const std::int64_t j = *m.image_index;
        const bool rotate =
            seq.options.separator_positions == SeparatorPositions::inherit_frame;
        out.push_back({Position3{j - 1, 0, 0}, rotate});
        break;
      }
      case TokenKind::text:
        out.push_back({Position3{n + 1, 0, m.slot}, true});
        break;
    }
  }
  return out;
}

std::vector<Matrix> recover_images(const AssembledSequence& seq,
                                   const IndexEmbedConfig& icfg) {
  std::vector<Matrix> out;
  for (const Span& s : seq.layout) {
    if (s.kind != TokenKind::image) continue;
    Matrix block(s.length, seq.channels());
    for (std::size_t r = 0; r < s.length; ++r) {
      std::copy(seq.tokens.row(s.start + r).begin(),
                seq.tokens.row(s.start + r).end(), block.row(r).begin());
    }
    if (seq.options.use_index_embed) {
      block = subtract_index_embedding(
          block, index_embedding(s.image_index, seq.image_count, icfg));
    }
    out.push_back(std::move(block));
  }
  return out;
}

SequenceReport sequence_report(const AssembledSequence& seq) {
  const auto positions = assign_positions(seq);
  std::size_t separator_spans = 0;
  Json spans = Json::array();
  std::ostringstream text;
  text << "sequence: L=" << seq.length() << " C=" << seq.channels()
       << " N=" << seq.image_count << "\n";
  text << "mechanisms: separator=" << (seq.options.use_separator ? "on" : "off")
       << " index_embed=" << (seq.options.use_index_embed ? "on" : "off")
       << " trailing_separator=" << (seq.options.trailing_separator ? "on" : "off")
       << "\n";
  for (const Span& s : seq.layout) {
    Json js;
    js["kind"] = to_string(s.kind);
    js["start"] = s.start;
    js["length"] = s.length;
    js["end"] = s.end();
    if (s.kind != TokenKind::text) js["image_index"] = s.image_index;
    const RopePosition& first = positions[s.start];
    js["first_position"] = {first.pos.f, first.pos.h, first.pos.w};
    js["rotated"] = first.rotate;
    spans.push_back(std::move(js));
    if (s.kind == TokenKind::separator) ++separator_spans;
    text << "  " << to_string(s.kind);
    if (s.kind != TokenKind::text) text << " " << s.image_index;
    text << " [" << s.start << ", " << s.end() << ")";
    text << " pos(" << first.pos.f << "," << first.pos.h << "," << first.pos.w
         << ")" << (first.rotate ? "" : " unrotated") << "\n";
  }
  text << "separator spans: " << separator_spans << "\n";

  Json j;
  j["length"] = seq.length();
  j["channels"] = seq.channels();
  j["image_count"] = seq.image_count;
  j["separator_width"] = seq.separator_width;
  j["separator_spans"] = separator_spans;
  j["text_length"] = seq.text_length;
  j["mechanisms"] = {
      {"separator", seq.options.use_separator ? "on" : "off"},
      {"index_embed", seq.options.use_index_embed ? "on" : "off"},
      {"trailing_separator", seq.options.trailing_separator ? "on" : "off"},
      {"separator_positions",
       seq.options.separator_positions == SeparatorPositions::identity
           ? "identity"
           : "inherit_frame"}};
  j["spans"] = std::move(spans);
  return SequenceReport{text.str(), std::move(j)};
}

}  // namespace refseq
