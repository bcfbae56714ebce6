// Copyright 2026 The refseq Authors
// SPDX-License-Identifier: Apache-2.0

#include "refseq/config_io.hpp"

#include <fstream>
#include <sstream>

namespace refseq {

void reject_unknown_keys(const Json& j, std::initializer_list<const char*> allowed,
                         const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed) known = known || it.key() == k;
    if (!known) throw ConfigError(where + ": unknown key \"" + it.key() + "\"");
  }
}

Json to_json(const RopeConfig& cfg) {
  return Json{{"axes_dim", cfg.axes_dim}, {"theta", cfg.theta}};
}

RopeConfig rope_config_from_json(const Json& j, RopeConfig base) {
  reject_unknown_keys(j, {"axes_dim", "theta"}, "rope");
  read_key(j, "axes_dim", base.axes_dim, "rope");
  read_key(j, "theta", base.theta, "rope");
  base.validate();
  return base;
}

Json to_json(const IndexEmbedConfig& cfg) {
  return Json{{"tau", cfg.tau}, {"channels", cfg.channels}};
}

IndexEmbedConfig index_embed_config_from_json(const Json& j, IndexEmbedConfig base) {
  reject_unknown_keys(j, {"tau", "channels"}, "index_embed");
  read_key(j, "tau", base.tau, "index_embed");
  read_key(j, "channels", base.channels, "index_embed");
  base.validate();
  return base;
}

Json to_json(const ModelConfig& cfg) {
  return Json{{"vocab", cfg.vocab},
              {"channels", cfg.channels},
              {"heads", cfg.heads},
              {"head_dim", cfg.head_dim},
              {"layers", cfg.layers},
              {"ffn_hidden", cfg.ffn_hidden},
              {"rope", to_json(cfg.rope)},
              {"index_embed", to_json(cfg.index_embed)},
              {"use_separator", cfg.flags.use_separator},
              {"use_index_embed", cfg.flags.use_index_embed},
              {"use_rope", cfg.flags.use_rope},
              {"separator_width", cfg.separator_width},
              {"weight_std", cfg.weight_std},
              {"separator_std", cfg.separator_std},
              {"ln_eps", cfg.ln_eps}};
}

ModelConfig model_config_from_json(const Json& j, ModelConfig base) {
  const std::string w = "model";
  reject_unknown_keys(j,
                      {"vocab", "channels", "heads", "head_dim", "layers",
                       "ffn_hidden", "rope", "index_embed", "use_separator",
                       "use_index_embed", "use_rope", "separator_width",
                       "weight_std", "separator_std", "ln_eps"},
                      w);
  read_key(j, "vocab", base.vocab, w);
  read_key(j, "channels", base.channels, w);
  read_key(j, "heads", base.heads, w);
  read_key(j, "head_dim", base.head_dim, w);
  read_key(j, "layers", base.layers, w);
  read_key(j, "ffn_hidden", base.ffn_hidden, w);
  if (j.contains("rope")) base.rope = rope_config_from_json(j["rope"], base.rope);
  if (j.contains("index_embed")) {
    base.index_embed = index_embed_config_from_json(j["index_embed"], base.index_embed);
  } else if (j.contains("channels")) {
    base.index_embed.channels = base.channels;
  }
  read_key(j, "use_separator", base.flags.use_separator, w);
  read_key(j, "use_index_embed", base.flags.use_index_embed, w);
  read_key(j, "use_rope", base.flags.use_rope, w);
  read_key(j, "separator_width", base.separator_width, w);
  read_key(j, "weight_std", base.weight_std, w);
  read_key(j, "separator_std", base.separator_std, w);
  read_key(j, "ln_eps", base.ln_eps, w);
  base.validate();
  return base;
}

Json to_json(const AssemblyOptions& opt) {
  return Json{{"use_separator", opt.use_separator},
              {"use_index_embed", opt.use_index_embed},
              {"trailing_separator", opt.trailing_separator},
              {"separator_positions",
               opt.separator_positions == SeparatorPositions::identity
                   ? "identity"
                   : "inherit_frame"}};
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("write failed for " + path);
}

Json read_json_file(const std::string& path) {
  const std::string text = read_text_file(path);
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path + ": malformed JSON: " + e.what());
  }
}

}  // namespace refseq
