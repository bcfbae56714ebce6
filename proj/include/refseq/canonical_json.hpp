// Copyright 2026 The refseq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>

#include "json.hpp"

namespace refseq {

using Json = nlohmann::json;

// Floats are written with 17 significant digits ("%.17g"), which round-trips
// every double and is stable across conforming printf implementations.
std::string format_double(double v);

// Keys sorted (nlohmann objects are ordered maps), two-space indent, floats
// via format_double, trailing newline.
std::string dump_canonical(const Json& j);

}  // namespace refseq
