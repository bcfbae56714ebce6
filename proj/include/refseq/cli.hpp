// Copyright 2026 The refseq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "refseq/canonical_json.hpp"

namespace refseq {

inline constexpr const char* kToolVersion = "0.1.0";

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;   // a check ran and failed
inline constexpr int kExitBadInput = 2;  // invalid config, spec or arguments
inline constexpr int kExitIo = 3;        // unreadable input or unwritable output

// Entry point shared by the refseq binary and in-process tests.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Hex SHA-256 of a file's bytes. Throws IoError.
std::string sha256_file(const std::string& path);
std::string sha256_hex(const std::string& bytes);

// Writes manifest.json into dir, listing every regular file under dir
// (except the manifest itself) with its digest.
struct ManifestInfo {
  std::string command;
  Json config;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> inputs;  // files whose digests are recorded
  double wall_seconds = 0.0;
};
void write_manifest(const std::string& dir, const ManifestInfo& info);

// Empty when the directory verifies; otherwise one line per problem.
std::vector<std::string> verify_run_dir(const std::string& dir);

}  // namespace refseq
