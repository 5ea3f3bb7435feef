// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <random>

#include "billnet/bit_engine.hpp"
#include "billnet/checkpoint.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace billnet;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error raised");
  return ErrorKind::kIo;
}

bool same_weights(const ModelGraph& a, const ModelGraph& b) {
  const auto wa = weights(a);
  const auto wb = weights(b);
  if (wa.size() != wb.size()) return false;
  for (std::size_t i = 0; i < wa.size(); ++i) {
    if (wa[i].name != wb[i].name || !(*wa[i].value == *wb[i].value)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("full-scale layout") {
  const BillnetConfig cfg = BillnetConfig::full_scale();
  CHECK(cfg.n == 64);
  CHECK(cfg.g == 4);
  CHECK(cfg.m == 32);
  const ModelGraph m = build(cfg);
  CHECK(m.dense.weight.shape().w == 4 * cfg.m);
  CHECK(m.dense.weight.shape().c == 27);
  const Shape f = final_feature_shape(m);
  CHECK(f.h == 6);
  CHECK(f.w == 8);
  CHECK(f.t == 8);
  CHECK(m.lstm.n_in == f.c);
  CHECK(m.lstm.n_hidden == 4 * cfg.m);
  CHECK(m.lstm.input_divisor == 48);
  // Roughly 1e6 parameters (32.23 Mb at 32 bits), within 20%.
  const double params = static_cast<double>(count_params(m, 1).total_params);
  CHECK(params > 0.8e6);
  CHECK(params < 1.2e6);
}

TEST_CASE("config validation names the invariant") {
  BillnetConfig c = BillnetConfig::toy();
  c.g = 3;
  CHECK(kind_of([&] { validate(c); }) == ErrorKind::kBadConfig);
  c = BillnetConfig::toy();
  c.layout = {"MP", "MOR3"};
  CHECK(kind_of([&] { build(c); }) == ErrorKind::kBadConfig);
  c = BillnetConfig::toy();
  c.stem_kernel = {3, 2, 3};
  CHECK(kind_of([&] { validate(c); }) == ErrorKind::kBadConfig);
  c = BillnetConfig::toy();
  c.classes = 0;
  CHECK(kind_of([&] { validate(c); }) == ErrorKind::kBadConfig);
  try {
    BillnetConfig d = BillnetConfig::toy();
    d.n = 12;
    validate(d);
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("2g") != std::string::npos);
  }
}

TEST_CASE("config json round trip") {
  BillnetConfig c = BillnetConfig::toy();
  c.tgap_mode = TgapMode::kCalibrated;
  c.seed = 99;
  CHECK(BillnetConfig::from_json(c.to_json()) == c);
  CHECK(BillnetConfig::from_json(BillnetConfig::full_scale().to_json()) == BillnetConfig::full_scale());
  CHECK(kind_of([] { BillnetConfig::from_json("{\"n\": "); }) == ErrorKind::kBadConfig);
}

TEST_CASE("build is deterministic per seed") {
  BillnetConfig c = BillnetConfig::toy();
  CHECK(serialize(build(c)) == serialize(build(c)));
  c.seed = 2;
  CHECK(!same_weights(build(c), build(BillnetConfig::toy())));
}

TEST_CASE("toy model runs both paths") {
  const ModelGraph m = testing::random_model(BillnetConfig::toy(), 3, 5);
  std::mt19937_64 rng(3);
  const Tensor5 codes = testing::random_codes(m.input_shape(2), rng);
  const ref::RefOutput r = ref::run(m, codes);
  const logic::Execution e = logic::execute(logic::compile(m), logic::to_codes(codes));
  CHECK(r.predictions == e.predictions);
  CHECK(r.steps.shape() == Shape{2, 4, 1, 1, 4});
}

TEST_CASE("weight memory shrinks about 32x from stage 1 to stage 2") {
  for (const BillnetConfig& cfg : {BillnetConfig::toy(), BillnetConfig::full_scale()}) {
    const ModelGraph m = build(cfg);
    const double s1 = static_cast<double>(count_params(m, 1).total_bits);
    const double s2 = static_cast<double>(count_params(m, 2).total_bits);
    CHECK(s1 / s2 >= 30.0);
    CHECK(s1 / s2 <= 32.0);
  }
}

TEST_CASE("parameter report sums its rows") {
  const ModelGraph m = build(BillnetConfig::toy());
  for (int stage = 1; stage <= 5; ++stage) {
    const ParamReport r = count_params(m, stage);
    std::int64_t p = 0, b = 0;
    for (const ParamRow& row : r.rows) {
      p += row.count;
      b += row.bits;
      CHECK(row.bits == row.count * row.bits_per_param);
    }
    CHECK(p == r.total_params);
    CHECK(b == r.total_bits + r.bias_bits);
    CHECK((r.bias_bits > 0) == (stage == 1));
    CHECK((r.norm_bits > 0) == (stage < 4));
  }
}

TEST_CASE("checkpoint round trip is byte exact at every stage") {
  ModelGraph m = build(BillnetConfig::toy());
  std::mt19937_64 rng(4);
  testing::randomize_norms(m, rng);
  m.rng_state = "12345 678";
  for (int stage = 1; stage <= 5; ++stage) {
    if (stage > 1) {
      m.completed_stage = stage - 1;
      enter_stage(m, stage);
    }
    const auto bytes = serialize(m);
    const ModelGraph back = deserialize(bytes);
    CHECK(serialize(back) == bytes);
    CHECK(back.stage == stage);
    CHECK(back.config == m.config);
    CHECK(back.rng_state == m.rng_state);
    if (stage < 5) CHECK(same_weights(back, m));
    // Inference is unchanged by the round trip.
    const Tensor5 codes = testing::random_codes(m.input_shape(2), rng);
    CHECK(ref::run(back, codes).scores == ref::run(m, codes).scores);
  }
}

TEST_CASE("corrupt checkpoints are rejected") {
  const ModelGraph m = testing::random_model(BillnetConfig::toy(), 5, 5);
  const auto bytes = serialize(m);
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    const std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    CHECK(kind_of([&] { deserialize(part); }) == ErrorKind::kCorruptFile);
  }
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK(kind_of([&] { deserialize(bad_magic); }) == ErrorKind::kCorruptFile);
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  CHECK(kind_of([&] { deserialize(flipped); }) == ErrorKind::kCorruptFile);
  auto version = bytes;
  version[4] = 2;
  CHECK(kind_of([&] { deserialize(version); }) == ErrorKind::kVersionMismatch);
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK(kind_of([&] { deserialize(trailing); }) == ErrorKind::kCorruptFile);
}

TEST_CASE("stage-5 checkpoint size matches the bit count") {
  const ModelGraph m = testing::random_model(BillnetConfig::toy(), 6, 5);
  const auto bytes = serialize(m);
  std::int64_t payload = 0;
  std::int64_t bits = 0;
  for (const auto& w : weights(m)) {
    const int b = weight_bits(w.kind, 5);
    if (b == 0) continue;
    const std::int64_t n = w.value->size();
    bits += n * b;
    payload += b * ((n + 7) / 8);  // one byte-aligned plane per bit
  }
  CHECK(bits == count_params(m, 5).total_bits);
  // Headers, names, config echo, shifts and the resumable RNG state.
  const auto overhead = static_cast<std::int64_t>(bytes.size()) - payload;
  const auto rng = static_cast<std::int64_t>(m.rng_state.size());
  MESSAGE("payload " << payload << " overhead " << overhead << " rng " << rng);
  CHECK(overhead > rng);
  CHECK(overhead - rng < 2048);
  // Stage 4 still stores 64-bit latent weights.
  const auto s4 = serialize(testing::random_model(BillnetConfig::toy(), 6, 4));
  CHECK(static_cast<std::int64_t>(s4.size()) - rng > 60 * payload);
}

TEST_CASE("save and load through files") {
  const auto dir = std::filesystem::temp_directory_path() / "billnet_test_model";
  std::filesystem::create_directories(dir);
  const ModelGraph m = testing::random_model(BillnetConfig::toy(), 7, 3);
  save(m, dir / "m.blnt");
  CHECK(serialize(load(dir / "m.blnt")) == serialize(m));
  CHECK(kind_of([&] { load(dir / "missing.blnt"); }) == ErrorKind::kIo);
  std::filesystem::remove_all(dir);
}
