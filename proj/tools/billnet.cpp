// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

// billnet command-line tool: synth, train, verify, eval, cost, heatmap.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "billnet/bit_engine.hpp"
#include "billnet/checkpoint.hpp"
#include "billnet/cost.hpp"
#include "billnet/data.hpp"
#include "billnet/train.hpp"
#include "json.hpp"
#include "run_manifest.hpp"

namespace fs = std::filesystem;
using namespace billnet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitPrecondition = 2;
constexpr int kExitVerify = 3;

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// A run config is either a bare model config or {"model": {...}, "train": {...}}.
struct RunConfig {
  BillnetConfig model;
  train::TrainConfig train;
};

RunConfig load_run_config(const fs::path& path) {
  const std::string text = read_text(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kBadConfig, "'" + path.string() + "' is not valid JSON: " + e.what());
  }
  RunConfig rc;
  rc.model = BillnetConfig::from_json(j.contains("model") ? j["model"].dump() : text);
  rc.train = train::TrainConfig::from_json(j.contains("train") ? j["train"].dump() : "{}");
  validate(rc.model);
  return rc;
}

std::string config_hash(const BillnetConfig& model, const std::string& extra = "") {
  return cli::sha256_hex(model.to_json() + "\n" + extra);
}

fs::path default_manifest(const std::string& command) { return fs::path("billnet-" + command + ".manifest.json"); }

struct Common {
  std::uint64_t seed = 1;
  std::string manifest;
};

void finish(cli::RunManifest& m, const Common& common, const fs::path& fallback) {
  m.seed = common.seed;
  m.finished_at = cli::iso_time_now();
  m.write(common.manifest.empty() ? fallback : fs::path(common.manifest));
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

// ---- synth ----------------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::string config;
  int clips = 2000;
  double speed = data::SyntheticSpec{}.speed;
  double noise = data::SyntheticSpec{}.noise;
};

int run_synth(const SynthArgs& a, const Common& common, cli::RunManifest& m) {
  data::SyntheticSpec spec;
  BillnetConfig cfg = BillnetConfig::toy();
  if (!a.config.empty()) cfg = load_run_config(a.config).model;
  spec.classes = cfg.classes;
  spec.frames = cfg.frames;
  spec.height = cfg.height;
  spec.width = cfg.width;
  spec.clips = a.clips;
  spec.speed = a.speed;
  spec.noise = a.noise;
  spec.seed = common.seed;
  const data::Dataset ds = data::generate_synthetic(spec);
  data::write_dataset(a.out, ds);
  m.config_hash = config_hash(cfg, "synth " + std::to_string(a.clips) + " " + fixed(a.speed, 6) + " " + fixed(a.noise, 6));
  m.outputs.emplace_back("data", cli::sha256_dataset(a.out));
  std::cout << "wrote " << ds.size() << " clips (" << spec.classes << " classes, " << spec.frames << "x" << spec.height
            << "x" << spec.width << ") to " << a.out << "\n";
  finish(m, common, fs::path(a.out) / "run_manifest.json");
  return kExitOk;
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
  std::string config;
  int stage = 1;
  std::string data;
  std::string in;
  std::string out;
  std::string log;
};

int run_train(const TrainArgs& a, const Common& common, cli::RunManifest& m) {
  std::optional<RunConfig> rc;
  if (!a.config.empty()) rc = load_run_config(a.config);
  ModelGraph model;
  if (a.stage == 1) {
    if (!a.in.empty()) fail(ErrorKind::kBadConfig, "stage 1 starts from --config; --in is for stages 2-5");
    if (!rc) fail(ErrorKind::kBadConfig, "stage 1 needs --config");
    BillnetConfig cfg = rc->model;
    cfg.seed = common.seed;
    model = build(cfg);
  } else {
    if (a.in.empty()) {
      fail(ErrorKind::kStageOrderViolation, "stage " + std::to_string(a.stage) + " needs --in with a stage " +
                                                std::to_string(a.stage - 1) + " checkpoint");
    }
    model = load(a.in);
    m.inputs.emplace_back("checkpoint", cli::sha256_file(a.in));
    if (model.completed_stage != a.stage - 1) {
      fail(ErrorKind::kStageOrderViolation, "stage " + std::to_string(a.stage) + " needs a checkpoint that completed stage " +
                                                std::to_string(a.stage - 1) + "; '" + a.in + "' completed stage " +
                                                std::to_string(model.completed_stage));
    }
  }
  const train::TrainConfig tc = rc ? rc->train : train::TrainConfig::desk();
  m.stage = a.stage;
  m.config_hash = config_hash(model.config, tc.to_json());

  const data::Dataset all = data::load_dataset(a.data, model.config, common.seed);
  m.inputs.emplace_back("data", cli::sha256_dataset(a.data));
  const data::Split sp = data::split(all);

  const fs::path log_path = a.log.empty() ? fs::path(a.out + ".log.csv") : fs::path(a.log);
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) fail(ErrorKind::kIo, "cannot write '" + log_path.string() + "'");
  log << train::csv_header() << "\n";

  train::RunOptions opt;
  opt.batch_size = tc.batch_size;
  opt.seed = common.seed;
  opt.test = &sp.test;
  opt.on_epoch = [&](const train::LogRow& r) {
    log << train::to_csv(r) << "\n";
    log.flush();
    std::cout << "stage " << r.stage << " epoch " << r.epoch << " lr " << r.lr << " loss " << fixed(r.loss)
              << " acc " << fixed(r.accuracy) << " test " << fixed(r.test_accuracy) << std::endl;
  };
  const train::StageResult res = train::run_stage(model, tc.stage(a.stage), sp.train, opt);
  save(model, a.out);
  log.close();
  std::cout << "stage " << a.stage << " final test accuracy " << fixed(res.final_test_accuracy) << "\n";
  m.outputs.emplace_back("checkpoint", cli::sha256_file(a.out));
  m.outputs.emplace_back("log", cli::sha256_file(log_path));
  m.results.emplace_back("final_test_accuracy", fixed(res.final_test_accuracy, 6));
  finish(m, common, fs::path(a.out + ".manifest.json"));
  return kExitOk;
}

// ---- verify ---------------------------------------------------------------

struct VerifyArgs {
  std::string in;
  int inputs = 10;
};

int run_verify(const VerifyArgs& a, const Common& common, cli::RunManifest& m) {
  const ModelGraph model = load(a.in);
  m.inputs.emplace_back("checkpoint", cli::sha256_file(a.in));
  m.stage = model.stage;
  m.config_hash = config_hash(model.config);
  const logic::GatePlan plan = logic::compile(model);
  std::mt19937_64 rng(data::splitmix64(common.seed));
  std::uniform_int_distribution<int> code(0, 255);
  std::bernoulli_distribution coin(0.5);
  int matches = 0;
  std::optional<logic::Divergence> first;
  int first_input = -1;
  for (int r = 0; r < a.inputs; ++r) {
    // Alternate dense and sparse inputs so both MUX branches get exercised.
    Tensor5 codes(model.input_shape(1));
    const double density = (r % 3 == 0) ? 0.15 : (r % 3 == 1 ? 0.5 : 0.9);
    std::bernoulli_distribution on(density);
    for (auto& v : codes.vec()) v = on(rng) ? code(rng) : 0;
    const ref::RefOutput ref_out = ref::run(model, codes, true);
    const logic::Execution exec = logic::execute(plan, logic::to_codes(codes));
    auto div = logic::first_divergence(ref_out.trace, logic::to_trace(plan, exec));
    if (!div && exec.predictions != ref_out.predictions) {
      div = logic::Divergence{"prediction", 0, 0, 0, static_cast<double>(ref_out.predictions[0]),
                              static_cast<double>(exec.predictions[0])};
    }
    if (!div) {
      ++matches;
    } else if (!first) {
      first = div;
      first_input = r;
    }
  }
  std::cout << matches << "/" << a.inputs << " exact matches\n";
  m.results.emplace_back("exact_matches", std::to_string(matches) + "/" + std::to_string(a.inputs));
  if (first) {
    std::cout << "first divergence on input " << first_input << ": " << first->describe() << "\n";
    m.results.emplace_back("first_divergence", first->describe());
  }
  finish(m, common, default_manifest("verify"));
  return first ? kExitVerify : kExitOk;
}

// ---- eval -----------------------------------------------------------------

struct EvalArgs {
  std::string in;
  std::string data;
  std::string path = "ref";
  std::string split = "test";
  int batch_size = 40;
};

train::Evaluation evaluate_logic(const ModelGraph& model, const data::Dataset& ds, int batch_size) {
  const logic::GatePlan plan = logic::compile(model);
  std::vector<int> preds;
  std::vector<std::size_t> all(ds.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  for (std::size_t b = 0; b < ds.size(); b += static_cast<std::size_t>(batch_size)) {
    const std::vector<std::size_t> idx(all.begin() + static_cast<std::ptrdiff_t>(b),
                                       all.begin() + static_cast<std::ptrdiff_t>(std::min(ds.size(), b + static_cast<std::size_t>(batch_size))));
    const logic::Execution exec = logic::execute(plan, logic::to_codes(ds.batch(idx)));
    preds.insert(preds.end(), exec.predictions.begin(), exec.predictions.end());
  }
  return train::summarize(preds, ds.labels(all), ds.classes);
}

int run_eval(const EvalArgs& a, const Common& common, cli::RunManifest& m) {
  const ModelGraph model = load(a.in);
  m.inputs.emplace_back("checkpoint", cli::sha256_file(a.in));
  m.stage = model.stage;
  m.config_hash = config_hash(model.config, a.path + " " + a.split);
  const data::Dataset all = data::load_dataset(a.data, model.config, common.seed);
  m.inputs.emplace_back("data", cli::sha256_dataset(a.data));
  const data::Split sp = data::split(all);
  const data::Dataset& ds = a.split == "test" ? sp.test : (a.split == "train" ? sp.train : all);
  const train::Evaluation e = a.path == "logic" ? evaluate_logic(model, ds, a.batch_size)
                                                : train::evaluate(model, ds, a.batch_size, train::thread_budget());
  std::cout << "path " << a.path << " split " << a.split << " clips " << ds.size() << " accuracy " << fixed(e.accuracy)
            << "\nconfusion (rows: true class, columns: predicted)\n";
  for (const auto& row : e.confusion) {
    for (std::size_t j = 0; j < row.size(); ++j) std::cout << (j ? " " : "") << std::setw(5) << row[j];
    std::cout << "\n";
  }
  m.results.emplace_back("accuracy", fixed(e.accuracy, 6));
  finish(m, common, default_manifest("eval"));
  return kExitOk;
}

// ---- cost -----------------------------------------------------------------

struct CostArgs {
  std::string in;
  std::string config;
  int stage = 0;
  std::string csv;
};

int run_cost(const CostArgs& a, const Common& common, cli::RunManifest& m) {
  ModelGraph model;
  if (!a.in.empty()) {
    model = load(a.in);
    m.inputs.emplace_back("checkpoint", cli::sha256_file(a.in));
  } else if (!a.config.empty()) {
    model = build(load_run_config(a.config).model);
  } else {
    fail(ErrorKind::kBadConfig, "cost needs --in or --config");
  }
  const int stage = a.stage ? a.stage : model.stage;
  check_stage(stage);
  m.stage = stage;
  m.config_hash = config_hash(model.config);
  const cost::CostReport r = cost::cost(model, stage);
  const ParamReport p = count_params(model, stage);
  std::cout << cost::to_table(r) << "  params      " << p.total_params << " (" << fixed(p.size_bits() / 1e6) << " Mb)\n";
  if (!a.csv.empty()) {
    std::ofstream out(a.csv, std::ios::trunc);
    if (!out) fail(ErrorKind::kIo, "cannot write '" + a.csv + "'");
    out << cost::to_csv(r);
    out.close();
    m.outputs.emplace_back("csv", cli::sha256_file(a.csv));
  }
  m.results.emplace_back("total_gbop", fixed(r.total_bops / 1e9, 6));
  m.results.emplace_back("weight_mb", fixed(p.size_bits() / 1e6, 6));
  finish(m, common, default_manifest("cost"));
  return kExitOk;
}

// ---- heatmap --------------------------------------------------------------

struct HeatmapArgs {
  std::string in;
  std::string clip;
  std::string out;
};

int run_heatmap(const HeatmapArgs& a, const Common& common, cli::RunManifest& m) {
  const ModelGraph model = load(a.in);
  m.inputs.emplace_back("checkpoint", cli::sha256_file(a.in));
  m.stage = model.stage;
  m.config_hash = config_hash(model.config);
  const BillnetConfig& cfg = model.config;
  std::mt19937_64 rng(data::splitmix64(common.seed));
  const data::Clip clip = data::ingest_frames(a.clip, cfg.frames, cfg.height, cfg.width, rng);
  // Grayscale frames are replicated over the input channels.
  Tensor5 codes(model.input_shape(1));
  for (std::size_t i = 0; i < clip.codes.size(); ++i) {
    for (int c = 0; c < cfg.in_channels; ++c) codes[static_cast<std::int64_t>(i) * cfg.in_channels + c] = clip.codes[i];
  }
  Tensor5 steps;
  if (model.stage == 5) {
    const logic::Execution exec = logic::execute(logic::compile(model), logic::to_codes(codes));
    steps = logic::to_real(logic::Slot(exec.logits));
  } else {
    steps = ref::run(model, codes).steps;
  }
  const int tn = steps.shape().t;
  const int k = steps.shape().c;
  std::ofstream csv(a.out + ".csv", std::ios::trunc);
  if (!csv) fail(ErrorKind::kIo, "cannot write '" + a.out + ".csv'");
  csv << "step";
  for (int j = 0; j < k; ++j) csv << ",class_" << j;
  csv << "\n" << std::setprecision(17);
  double lo = steps[0];
  double hi = steps[0];
  for (double v : steps.vec()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  data::Image img;
  img.width = k;
  img.height = tn;
  for (int t = 0; t < tn; ++t) {
    csv << t;
    for (int j = 0; j < k; ++j) {
      const double v = steps.at(0, t, 0, 0, j);
      csv << ',' << v;
      img.pixels.push_back(hi > lo ? static_cast<std::uint8_t>(std::lround(255.0 * (v - lo) / (hi - lo))) : 0);
    }
    csv << "\n";
  }
  csv.close();
  data::write_pgm(a.out + ".pgm", img);
  std::cout << "class-temporal response " << tn << "x" << k << " written to " << a.out << ".csv and " << a.out << ".pgm\n";
  m.inputs.emplace_back("clip", cli::sha256_hex(clip.codes.data(), clip.codes.size()));
  m.outputs.emplace_back("csv", cli::sha256_file(a.out + ".csv"));
  m.outputs.emplace_back("pgm", cli::sha256_file(a.out + ".pgm"));
  m.results.emplace_back("shape", std::to_string(tn) + "x" + std::to_string(k));
  finish(m, common, fs::path(a.out + ".manifest.json"));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"billnet: binarized Conv3D-LSTM tools"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--seed", common.seed, "Seed for every random choice of the command")->capture_default_str();
    sub->add_option("--manifest", common.manifest, "Run manifest path");
  };

  SynthArgs synth;
  auto* s_synth = app.add_subcommand("synth", "Write a synthetic moving-blob dataset");
  s_synth->add_option("--out", synth.out, "Dataset directory")->required();
  s_synth->add_option("--config", synth.config, "Run config (frames, resolution and classes)");
  s_synth->add_option("--clips", synth.clips, "Number of clips")->capture_default_str()->check(CLI::PositiveNumber);
  s_synth->add_option("--speed", synth.speed, "Blob speed in pixels per frame")->capture_default_str();
  s_synth->add_option("--noise", synth.noise, "Gaussian noise level")->capture_default_str();
  add_common(s_synth);

  TrainArgs tr;
  auto* s_train = app.add_subcommand("train", "Train one stage");
  s_train->add_option("--config", tr.config, "Run config JSON");
  s_train->add_option("--stage", tr.stage, "Stage 1-5")->required();
  s_train->add_option("--data", tr.data, "Dataset directory")->required();
  s_train->add_option("--in", tr.in, "Checkpoint of the previous stage");
  s_train->add_option("--out", tr.out, "Output checkpoint")->required();
  s_train->add_option("--log", tr.log, "CSV training log (default <out>.log.csv)");
  add_common(s_train);

  VerifyArgs ve;
  auto* s_verify = app.add_subcommand("verify", "Check logic path against the reference path");
  s_verify->add_option("--in", ve.in, "Stage-5 checkpoint")->required();
  s_verify->add_option("--inputs", ve.inputs, "Random inputs to compare")->capture_default_str()->check(CLI::PositiveNumber);
  add_common(s_verify);

  EvalArgs ev;
  auto* s_eval = app.add_subcommand("eval", "Accuracy and confusion matrix");
  s_eval->add_option("--in", ev.in, "Checkpoint")->required();
  s_eval->add_option("--data", ev.data, "Dataset directory")->required();
  s_eval->add_option("--path", ev.path, "Execution path")->check(CLI::IsMember({"ref", "logic"}))->capture_default_str();
  s_eval->add_option("--split", ev.split, "Clips to evaluate")->check(CLI::IsMember({"test", "train", "all"}))->capture_default_str();
  add_common(s_eval);

  CostArgs co;
  auto* s_cost = app.add_subcommand("cost", "BOPs and weight memory");
  s_cost->add_option("--in", co.in, "Checkpoint");
  s_cost->add_option("--config", co.config, "Run config (alternative to --in)");
  s_cost->add_option("--stage", co.stage, "Stage to cost (default: the model's)");
  s_cost->add_option("--csv", co.csv, "Per-layer CSV output");
  add_common(s_cost);

  HeatmapArgs hm;
  auto* s_heat = app.add_subcommand("heatmap", "Class-temporal response of one clip");
  s_heat->add_option("--in", hm.in, "Checkpoint")->required();
  s_heat->add_option("--clip", hm.clip, "Directory of frame_%05d.pgm files")->required();
  s_heat->add_option("--out", hm.out, "Output prefix for .csv and .pgm")->required();
  add_common(s_heat);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitPrecondition;
  }

  cli::RunManifest m;
  m.started_at = cli::iso_time_now();
  m.args.assign(argv + 1, argv + argc);
  try {
    if (*s_synth) {
      m.command = "synth";
      return run_synth(synth, common, m);
    }
    if (*s_train) {
      m.command = "train";
      return run_train(tr, common, m);
    }
    if (*s_verify) {
      m.command = "verify";
      return run_verify(ve, common, m);
    }
    if (*s_eval) {
      m.command = "eval";
      return run_eval(ev, common, m);
    }
    if (*s_cost) {
      m.command = "cost";
      return run_cost(co, common, m);
    }
    if (*s_heat) {
      m.command = "heatmap";
      return run_heatmap(hm, common, m);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitPrecondition;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitOk;
}
