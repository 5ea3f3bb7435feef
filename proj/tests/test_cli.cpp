// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

// Drives the billnet executable end to end on a tiny synthetic set.

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "billnet/checkpoint.hpp"
#include "doctest.h"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

const fs::path& work() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "billnet_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

Result run(const std::string& args) {
  const std::string cmd = "cd '" + work().string() + "' && '" BILLNET_CLI "' " + args + " 2>&1";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(work() / p, std::ios::binary);
  REQUIRE(in);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string field(const std::string& json, const std::string& key) {
  const auto at = json.find("\"" + key + "\"");
  if (at == std::string::npos) return {};
  const auto q1 = json.find('"', json.find(':', at) + 1);
  return json.substr(q1 + 1, json.find('"', q1 + 1) - q1 - 1);
}

void write_config() {
  std::ofstream out(work() / "quick.json");
  out << R"({"model": {"classes": 4, "frames": 8, "g": 4, "height": 24, "width": 32, "in_channels": 1, "n": 16, "m": 8,
  "layout": ["MP", "MOR1", "MP", "MOR2"], "pool_window": [1, 2, 2], "stem_kernel": [3, 3, 3], "stem_stride": [2, 2, 2],
  "tgap_mode": "sample_max", "bn_eps": 0.001, "bn_momentum": 0.9, "seed": 1},
  "train": {"schedule": "desk", "batch_size": 8,
  "stages": [{"epochs": 1}, {"epochs": 1}, {"epochs": 1}, {"epochs": 1}, {"epochs": 1}]}})";
}

#define EXPECT_EXIT(args, want)                  \
  do {                                           \
    const Result r_ = run(args);                 \
    INFO(args << "\n" << r_.out);                \
    CHECK(r_.code == (want));                    \
  } while (0)

}  // namespace

TEST_CASE("argument and precondition errors") {
  write_config();
  EXPECT_EXIT("", 2);
  EXPECT_EXIT("frobnicate", 2);
  EXPECT_EXIT("train --stage 1", 2);
  EXPECT_EXIT("--help", 0);
  EXPECT_EXIT("train --config quick.json --stage 1 --data missing --out x.blnt", 2);
  EXPECT_EXIT("cost --config quick.json --stage 9", 2);
}

TEST_CASE("pipeline reruns are byte identical") {
  write_config();
  EXPECT_EXIT("synth --config quick.json --clips 40 --out data --seed 5", 0);
  EXPECT_EXIT("synth --config quick.json --clips 40 --out data2 --seed 5", 0);
  CHECK(slurp("data/manifest.csv") == slurp("data2/manifest.csv"));
  CHECK(slurp("data/0/clip_000000/frame_00001.pgm") == slurp("data2/0/clip_000000/frame_00001.pgm"));
  CHECK(field(slurp("data/run_manifest.json"), "content_hash").size() == 64);
  CHECK(slurp("data/manifest.csv").rfind("clip_id,class,frame_count\n", 0) == 0);

  EXPECT_EXIT("train --config quick.json --stage 1 --data data --out s1.blnt --seed 3", 0);
  const std::string s1 = slurp("s1.blnt");
  const std::string log1 = slurp("s1.blnt.log.csv");
  const std::string hash1 = field(slurp("s1.blnt.manifest.json"), "content_hash");
  EXPECT_EXIT("train --config quick.json --stage 1 --data data --out s1.blnt --seed 3", 0);
  CHECK(slurp("s1.blnt") == s1);
  CHECK(slurp("s1.blnt.log.csv") == log1);
  CHECK(field(slurp("s1.blnt.manifest.json"), "content_hash") == hash1);
  CHECK(log1.rfind("stage,epoch,lr,loss,accuracy,test_accuracy\n", 0) == 0);
  EXPECT_EXIT("train --config quick.json --stage 1 --data data --out s1b.blnt --seed 4", 0);
  CHECK(slurp("s1b.blnt") != s1);

  // Stages must follow one another.
  EXPECT_EXIT("train --config quick.json --stage 3 --data data --in s1.blnt --out s3.blnt", 2);
  EXPECT_EXIT("train --config quick.json --stage 2 --data data --out s2.blnt", 2);
  EXPECT_EXIT("verify --in s1.blnt", 2);

  for (int k = 2; k <= 5; ++k) {
    const std::string args = "train --config quick.json --stage " + std::to_string(k) + " --data data --in s" +
                             std::to_string(k - 1) + ".blnt --out s" + std::to_string(k) + ".blnt --seed 3";
    EXPECT_EXIT(args, 0);
  }
  const std::string s5 = slurp("s5.blnt");
  EXPECT_EXIT("train --config quick.json --stage 5 --data data --in s4.blnt --out s5.blnt --seed 3", 0);
  CHECK(slurp("s5.blnt") == s5);
  CHECK(billnet::deserialize(std::vector<std::uint8_t>(s5.begin(), s5.end())).completed_stage == 5);

  const Result v1 = run("verify --in s5.blnt --inputs 5 --seed 2");
  CHECK(v1.code == 0);
  CHECK(run("verify --in s5.blnt --inputs 5 --seed 2").out == v1.out);

  const Result er = run("eval --in s5.blnt --data data --path ref --manifest ref.json");
  const Result el = run("eval --in s5.blnt --data data --path logic --manifest logic.json");
  CHECK(er.code == 0);
  CHECK(el.code == 0);
  CHECK(!field(slurp("ref.json"), "accuracy").empty());
  CHECK(field(slurp("ref.json"), "accuracy") == field(slurp("logic.json"), "accuracy"));
  const std::string eval_hash = field(slurp("ref.json"), "content_hash");
  CHECK(run("eval --in s5.blnt --data data --path ref --manifest ref.json").out == er.out);
  CHECK(field(slurp("ref.json"), "content_hash") == eval_hash);

  EXPECT_EXIT("cost --in s5.blnt --csv cost.csv", 0);
  const std::string cost = slurp("cost.csv");
  EXPECT_EXIT("cost --in s5.blnt --csv cost.csv", 0);
  CHECK(slurp("cost.csv") == cost);

  EXPECT_EXIT("heatmap --in s5.blnt --clip data/0/clip_000000 --out hm", 0);
  const std::string hm = slurp("hm.csv");
  const std::string pgm = slurp("hm.pgm");
  EXPECT_EXIT("heatmap --in s5.blnt --clip data/0/clip_000000 --out hm", 0);
  CHECK(slurp("hm.csv") == hm);
  CHECK(slurp("hm.pgm") == pgm);
  CHECK(pgm.rfind("P5", 0) == 0);

  // A damaged checkpoint is a precondition failure, not a crash.
  {
    std::string bad = s5;
    bad[bad.size() / 2] = static_cast<char>(bad[bad.size() / 2] ^ 0x40);
    std::ofstream(work() / "bad.blnt", std::ios::binary) << bad;
  }
  EXPECT_EXIT("verify --in bad.blnt", 2);
  EXPECT_EXIT("eval --in bad.blnt --data data", 2);
}
