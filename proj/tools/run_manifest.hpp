// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace billnet::cli {

std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_hex(const std::string& s);
std::string sha256_file(const std::filesystem::path& path);
/// Hash of manifest.csv followed by every frame file in manifest order.
std::string sha256_dataset(const std::filesystem::path& root);

std::string iso_time_now();

/// One record per command run. content_hash covers everything except the
/// timestamps, so identical runs give identical content hashes.
struct RunManifest {
  std::string command;
  std::vector<std::string> args;
  std::string config_hash;
  std::uint64_t seed = 0;
  int stage = 0;
  std::vector<std::pair<std::string, std::string>> inputs;   // role -> sha256
  std::vector<std::pair<std::string, std::string>> outputs;  // role -> sha256
  std::vector<std::pair<std::string, std::string>> results;  // reported numbers, as text
  std::string started_at;
  std::string finished_at;

  std::string content_hash() const;
  std::string to_json() const;
  void write(const std::filesystem::path& path) const;
};

}  // namespace billnet::cli
