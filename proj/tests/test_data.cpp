// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "billnet/data.hpp"
#include "doctest.h"

using namespace billnet;
namespace fs = std::filesystem;

namespace {

std::vector<int> range(int from, int to, int step) {
  std::vector<int> v;
  for (int i = from; i < to; i += step) v.push_back(i);
  return v;
}

std::vector<int> cat(std::vector<int> a, const std::vector<int>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error raised");
  return ErrorKind::kIo;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

data::Image constant(int w, int h, std::uint8_t v) {
  return data::Image{w, h, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h, v)};
}

void write_frames(const fs::path& dir, const std::vector<int>& numbers, int w, int h) {
  fs::create_directories(dir);
  for (int i : numbers) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%05d.pgm", i);
    data::write_pgm(dir / name, constant(w, h, 128));
  }
}

}  // namespace

TEST_CASE("temporal fit index lists") {
  std::mt19937_64 rng(1);
  // 30 -> 15 even frames, one repeat in front.
  CHECK(data::temporal_fit(30, rng) == cat({0}, range(0, 30, 2)));
  // 12 -> no downsampling, two repeats on each side.
  CHECK(data::temporal_fit(12, rng) == cat(cat({0, 0}, range(0, 12, 1)), {11, 11}));
  // 25 -> 13 even frames, repeats alternate front, back, front.
  CHECK(data::temporal_fit(25, rng) == cat(cat({0, 0}, range(0, 25, 2)), {24}));
  // 24 -> no downsampling, a window of 16 consecutive frames.
  for (int trial = 0; trial < 50; ++trial) {
    const auto v = data::temporal_fit(24, rng);
    CHECK(v.front() <= 8);
    CHECK(v == range(v.front(), v.front() + 16, 1));
  }
  // 40 -> 20 even frames, start s in {0..4}; 70 -> 35, s in {0..19}.
  for (auto [t_raw, max_start] : {std::pair{40, 4}, std::pair{70, 19}}) {
    std::vector<int> seen(static_cast<std::size_t>(max_start) + 1, 0);
    for (int trial = 0; trial < 400; ++trial) {
      const auto v = data::temporal_fit(t_raw, rng);
      const int s = v.front() / 2;
      REQUIRE(v.front() % 2 == 0);
      REQUIRE(s <= max_start);
      CHECK(v == range(2 * s, 2 * s + 32, 2));
      ++seen[static_cast<std::size_t>(s)];
    }
    for (int c : seen) CHECK(c > 0);
  }
}

TEST_CASE("temporal fit properties") {
  for (int t_raw = 1; t_raw <= 120; ++t_raw) {
    std::mt19937_64 a(static_cast<std::uint64_t>(t_raw));
    std::mt19937_64 b(static_cast<std::uint64_t>(t_raw));
    const auto v = data::temporal_fit(t_raw, a);
    CHECK(v == data::temporal_fit(t_raw, b));
    REQUIRE(v.size() == 16);
    const int step = t_raw > 24 ? 2 : 1;
    for (std::size_t i = 0; i < v.size(); ++i) {
      CHECK(v[i] >= 0);
      CHECK(v[i] < t_raw);
      CHECK(v[i] % step == 0);
      if (i > 0) CHECK(v[i] >= v[i - 1]);
    }
  }
  std::mt19937_64 rng(2);
  CHECK(data::temporal_fit(8, rng, 8) == range(0, 8, 1));
  CHECK(kind_of([&] { data::temporal_fit(0, rng); }) == ErrorKind::kBadConfig);
}

TEST_CASE("pgm round trip") {
  TempDir tmp("billnet_test_pgm");
  data::Image img{5, 3, {}};
  for (int i = 0; i < 15; ++i) img.pixels.push_back(static_cast<std::uint8_t>(i * 17));
  data::write_pgm(tmp.path / "a.pgm", img);
  const data::Image back = data::read_pgm(tmp.path / "a.pgm");
  CHECK(back.width == 5);
  CHECK(back.height == 3);
  CHECK(back.pixels == img.pixels);

  {
    std::ofstream out(tmp.path / "b.pgm");
    out << "P2\n# comment\n3 2\n255\n0 1 2\n253 254 255\n";
  }
  const data::Image ascii = data::read_pgm(tmp.path / "b.pgm");
  CHECK(ascii.pixels == std::vector<std::uint8_t>{0, 1, 2, 253, 254, 255});

  {
    std::ofstream out(tmp.path / "c.pgm");
    out << "P6\n3 2\n255\n";
  }
  CHECK(kind_of([&] { data::read_pgm(tmp.path / "c.pgm"); }) == ErrorKind::kBadResolution);
  {
    std::ofstream out(tmp.path / "d.pgm", std::ios::binary);
    out << "P5\n4 4\n255\n" << std::string(7, 'x');
  }
  CHECK(kind_of([&] { data::read_pgm(tmp.path / "d.pgm"); }) == ErrorKind::kBadResolution);
  CHECK(kind_of([&] { data::read_pgm(tmp.path / "none.pgm"); }) == ErrorKind::kIo);
}

TEST_CASE("resize and center crop") {
  const data::Image c = data::resize_crop(constant(176, 100, 77), 96, 128);
  CHECK(c.width == 128);
  CHECK(c.height == 96);
  for (auto p : c.pixels) CHECK(p == 77);
  // 2x nearest-free upscaling of a left/right split keeps the halves.
  data::Image split{4, 2, {0, 0, 200, 200, 0, 0, 200, 200}};
  const data::Image up = data::resize_crop(split, 4, 8);
  CHECK(up.at(0, 0) == 0);
  CHECK(up.at(7, 3) == 200);
  // Wide input: height governs the scale, the sides are cropped.
  data::Image wide{6, 2, {10, 20, 30, 40, 50, 60, 10, 20, 30, 40, 50, 60}};
  const data::Image crop = data::resize_crop(wide, 2, 2);
  CHECK(crop.pixels == std::vector<std::uint8_t>{30, 40, 30, 40});
  CHECK(data::resize_crop(wide, 2, 6).pixels == wide.pixels);
}

TEST_CASE("frame ingest") {
  TempDir tmp("billnet_test_ingest");
  std::mt19937_64 rng(3);
  write_frames(tmp.path / "ok", range(1, 17, 1), 128, 96);
  const data::Clip clip = data::ingest_frames(tmp.path / "ok", 16, 96, 128, rng);
  CHECK(clip.meta.frame_count == 16);
  CHECK(clip.codes.size() == std::size_t{16} * 96 * 128);
  data::Dataset ds;
  ds.frames = 16;
  ds.height = 96;
  ds.width = 128;
  ds.classes = 1;
  ds.clips.push_back(clip);
  const Tensor5 x = data::binarize_stem_input(ds.batch({0}));
  CHECK(x.shape() == Shape{1, 16, 96, 128, 1});
  for (double v : x.vec()) CHECK(v == 128.0 / 255.0);

  write_frames(tmp.path / "gap", {1, 2, 4}, 8, 8);
  CHECK(kind_of([&] { data::ingest_frames(tmp.path / "gap", 16, 8, 8, rng); }) == ErrorKind::kMissingFrames);
  fs::create_directories(tmp.path / "empty");
  CHECK(kind_of([&] { data::ingest_frames(tmp.path / "empty", 16, 8, 8, rng); }) == ErrorKind::kMissingFrames);
  write_frames(tmp.path / "mixed", {1, 2}, 8, 8);
  data::write_pgm(tmp.path / "mixed" / "frame_00003.pgm", constant(9, 8, 1));
  CHECK(kind_of([&] { data::ingest_frames(tmp.path / "mixed", 16, 8, 8, rng); }) == ErrorKind::kBadResolution);
}

TEST_CASE("synthetic set is deterministic and balanced") {
  data::SyntheticSpec s;
  s.clips = 103;
  const data::Dataset a = data::generate_synthetic(s);
  const data::Dataset b = data::generate_synthetic(s);
  REQUIRE(a.size() == 103);
  std::vector<int> hist(4, 0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.clips[i].codes == b.clips[i].codes);
    CHECK(a.clips[i].meta.label == b.clips[i].meta.label);
    CHECK(a.clips[i].codes.size() == std::size_t{8} * 24 * 32);
    ++hist[static_cast<std::size_t>(a.clips[i].meta.label)];
  }
  CHECK(*std::max_element(hist.begin(), hist.end()) - *std::min_element(hist.begin(), hist.end()) <= 1);
  s.seed = 2;
  CHECK(data::generate_synthetic(s).clips[0].codes != a.clips[0].codes);
  const data::Split sp = data::split(a);
  CHECK(sp.test.size() == 20);
  CHECK(sp.train.size() == 83);
  CHECK(sp.test.clips[0].meta.clip_id == "clip_000004");
  s.noise = -1;
  CHECK(kind_of([&] { data::generate_synthetic(s); }) == ErrorKind::kBadConfig);
}

TEST_CASE("a single frame does not reveal the class") {
  // Softmax regression on the last frame only, trained to convergence by
  // full-batch gradient descent, must stay near chance on held-out clips.
  data::SyntheticSpec s;
  s.clips = 2000;
  const data::Split sp = data::split(data::generate_synthetic(s));
  const int frame = s.frames - 1;
  const int d = s.height * s.width;
  const int k = s.classes;
  auto features = [&](const data::Clip& c) {
    std::vector<double> f(static_cast<std::size_t>(d) + 1, 1.0);
    for (int i = 0; i < d; ++i) f[static_cast<std::size_t>(i)] = c.codes[static_cast<std::size_t>(frame) * d + i] / 255.0;
    return f;
  };
  std::vector<std::vector<double>> xtr, xte;
  for (const auto& c : sp.train.clips) xtr.push_back(features(c));
  for (const auto& c : sp.test.clips) xte.push_back(features(c));
  std::vector<double> w(static_cast<std::size_t>(k) * (d + 1), 0.0);
  auto logits = [&](const std::vector<double>& x) {
    std::vector<double> z(static_cast<std::size_t>(k), 0.0);
    for (int c = 0; c < k; ++c)
      for (int i = 0; i <= d; ++i) z[static_cast<std::size_t>(c)] += w[static_cast<std::size_t>(c) * (d + 1) + i] * x[static_cast<std::size_t>(i)];
    return z;
  };
  auto accuracy = [&](const std::vector<std::vector<double>>& xs, const data::Dataset& ds) {
    int ok = 0;
    for (std::size_t n = 0; n < xs.size(); ++n) {
      const auto z = logits(xs[n]);
      ok += static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin()) == ds.clips[n].meta.label;
    }
    return static_cast<double>(ok) / static_cast<double>(xs.size());
  };
  std::vector<double> grad(w.size());
  for (int epoch = 0; epoch < 200; ++epoch) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t n = 0; n < xtr.size(); ++n) {
      auto z = logits(xtr[n]);
      const double mx = *std::max_element(z.begin(), z.end());
      double sum = 0;
      for (auto& v : z) sum += (v = std::exp(v - mx));
      for (int c = 0; c < k; ++c) {
        const double g = z[static_cast<std::size_t>(c)] / sum - (c == sp.train.clips[n].meta.label ? 1.0 : 0.0);
        for (int i = 0; i <= d; ++i) grad[static_cast<std::size_t>(c) * (d + 1) + i] += g * xtr[n][static_cast<std::size_t>(i)];
      }
    }
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= 0.5 * grad[i] / static_cast<double>(xtr.size());
  }
  const double train_acc = accuracy(xtr, sp.train);
  const double test_acc = accuracy(xte, sp.test);
  MESSAGE("single-frame train " << train_acc << " test " << test_acc);
  CHECK(test_acc <= 0.35);
}

TEST_CASE("dataset directory round trip") {
  TempDir tmp("billnet_test_dataset");
  data::SyntheticSpec s;
  s.clips = 12;
  const data::Dataset ds = data::generate_synthetic(s);
  data::write_dataset(tmp.path, ds);
  CHECK(fs::exists(tmp.path / "manifest.csv"));
  BillnetConfig cfg = BillnetConfig::toy();
  const data::Dataset back = data::load_dataset(tmp.path, cfg, 1);
  REQUIRE(back.size() == ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(back.clips[i].codes == ds.clips[i].codes);
    CHECK(back.clips[i].meta.label == ds.clips[i].meta.label);
    CHECK(back.clips[i].meta.clip_id == ds.clips[i].meta.clip_id);
  }
  cfg.in_channels = 3;
  CHECK(kind_of([&] { data::load_dataset(tmp.path, cfg, 1); }) == ErrorKind::kBadConfig);
}
