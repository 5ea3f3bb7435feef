// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "billnet/model.hpp"

namespace billnet {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Section tags, four ASCII characters read as a little-endian u32.
constexpr std::uint32_t section_tag(const char (&s)[5]) {
  return std::uint32_t(std::uint8_t(s[0])) | std::uint32_t(std::uint8_t(s[1])) << 8 |
         std::uint32_t(std::uint8_t(s[2])) << 16 | std::uint32_t(std::uint8_t(s[3])) << 24;
}

/// Weight payload encodings.
enum class WeightEncoding : std::uint8_t { kFloat64 = 0, kSignBits = 1, kTernaryPlanes = 2 };

/// Serializes to the "BLNT" container: magic, u32 version, then sections
/// of (u32 tag, u64 length, payload, u32 CRC-32 of tag+length+payload).
/// Stage-5 models store sign bits / ternary planes and shift norms only.
std::vector<std::uint8_t> serialize(const ModelGraph& model);
ModelGraph deserialize(const std::vector<std::uint8_t>& bytes);

void save(const ModelGraph& model, const std::filesystem::path& path);
ModelGraph load(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace billnet
