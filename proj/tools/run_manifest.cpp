// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "run_manifest.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <memory>
#include <sstream>

#include "billnet/error.hpp"
#include "json.hpp"

namespace billnet::cli {

namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) fail(ErrorKind::kIo, "SHA-256 init failed");
  }
  void update(const void* data, std::size_t size) {
    if (EVP_DigestUpdate(ctx_.get(), data, size) != 1) fail(ErrorKind::kIo, "SHA-256 update failed");
  }
  void update_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::kIo, "cannot open '" + path.string() + "'");
    char buf[1 << 16];
    while (in) {
      in.read(buf, sizeof buf);
      if (in.gcount() > 0) update(buf, static_cast<std::size_t>(in.gcount()));
    }
  }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), md, &len) != 1) fail(ErrorKind::kIo, "SHA-256 final failed");
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
      out.push_back(kDigits[md[i] >> 4]);
      out.push_back(kDigits[md[i] & 15]);
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, void (*)(EVP_MD_CTX*)> ctx_;
};

}  // namespace

std::string sha256_hex(const void* data, std::size_t size) {
  Sha256 h;
  h.update(data, size);
  return h.hex();
}

std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

std::string sha256_file(const std::filesystem::path& path) {
  Sha256 h;
  h.update_file(path);
  return h.hex();
}

std::string sha256_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  Sha256 h;
  const fs::path manifest = root / "manifest.csv";
  h.update_file(manifest);
  std::ifstream in(manifest);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string id, label;
    std::getline(row, id, ',');
    std::getline(row, label, ',');
    const fs::path dir = root / label / id;
    if (!fs::is_directory(dir)) fail(ErrorKind::kMissingFrames, "'" + dir.string() + "' is missing");
    std::vector<fs::path> frames;
    for (const auto& e : fs::directory_iterator(dir)) frames.push_back(e.path());
    std::sort(frames.begin(), frames.end());
    for (const auto& f : frames) {
      const std::string name = f.filename().string();
      h.update(name.data(), name.size());
      h.update_file(f);
    }
  }
  return h.hex();
}

std::string iso_time_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

namespace {

nlohmann::ordered_json pairs(const std::vector<std::pair<std::string, std::string>>& v) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [k, val] : v) j[k] = val;
  return j;
}

nlohmann::ordered_json body(const RunManifest& m) {
  nlohmann::ordered_json j;
  j["command"] = m.command;
  j["args"] = m.args;
  j["config_hash"] = m.config_hash;
  j["seed"] = m.seed;
  j["stage"] = m.stage;
  j["inputs"] = pairs(m.inputs);
  j["outputs"] = pairs(m.outputs);
  j["results"] = pairs(m.results);
  return j;
}

}  // namespace

std::string RunManifest::content_hash() const { return sha256_hex(body(*this).dump()); }

std::string RunManifest::to_json() const {
  nlohmann::ordered_json j = body(*this);
  j["content_hash"] = content_hash();
  j["started_at"] = started_at;
  j["finished_at"] = finished_at;
  return j.dump(2) + "\n";
}

void RunManifest::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write '" + path.string() + "'");
  out << to_json();
}

}  // namespace billnet::cli
