// Copyright 2026 The refseq Authors
// SPDX-License-Identifier: Apache-2.0

// JSON <-> config structs. Readers start from defaults, accept a subset of
// keys, and reject unknown keys with ConfigError.

#pragma once

#include <string>

#include "refseq/canonical_json.hpp"
#include "refseq/index_embed.hpp"
#include "refseq/mrope.hpp"
#include "refseq/sequence.hpp"
#include "refseq/tinymodel.hpp"

namespace refseq {

Json to_json(const RopeConfig& cfg);
RopeConfig rope_config_from_json(const Json& j, RopeConfig base = {});

Json to_json(const IndexEmbedConfig& cfg);
IndexEmbedConfig index_embed_config_from_json(const Json& j,
                                              IndexEmbedConfig base = {});

Json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const Json& j, ModelConfig base = {});

Json to_json(const AssemblyOptions& opt);

// Parses a file; malformed JSON becomes ConfigError, unreadable file IoError.
Json read_json_file(const std::string& path);
std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

// Reads j[key] into out when present; type errors become ConfigError.
template <typename V>
void read_key(const Json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const Json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

// Throws ConfigError naming the first key of j not in `allowed`.
void reject_unknown_keys(const Json& j, std::initializer_list<const char*> allowed,
                         const std::string& where);

}  // namespace refseq
