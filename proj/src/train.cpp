// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "billnet/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace billnet::train {

StageConfig StageConfig::full_scale(int stage) {
  check_stage(stage);
  static constexpr double kLr[] = {5e-4, 3e-4, 3e-4, 2e-4, 1e-6};
  static constexpr int kEpochs[] = {100, 80, 80, 80, 80};
  StageConfig c;
  c.stage = stage;
  c.initial_lr = kLr[stage - 1];
  c.epochs = kEpochs[stage - 1];
  c.decay_epochs = 50;
  return c;
}

StageConfig StageConfig::scaled(int stage, int divisor) {
  require(divisor >= 1, ErrorKind::kBadConfig, "epoch divisor must be >= 1");
  StageConfig c = full_scale(stage);
  c.epochs = std::max(1, c.epochs / divisor);
  c.decay_epochs = std::max(1, c.decay_epochs / divisor);
  return c;
}

TrainConfig TrainConfig::full_scale() {
  TrainConfig t;
  for (int k = 1; k <= 5; ++k) t.stages[static_cast<std::size_t>(k - 1)] = StageConfig::full_scale(k);
  return t;
}

TrainConfig TrainConfig::scaled(int divisor) {
  TrainConfig t;
  for (int k = 1; k <= 5; ++k) t.stages[static_cast<std::size_t>(k - 1)] = StageConfig::scaled(k, divisor);
  return t;
}

TrainConfig TrainConfig::desk() {
  TrainConfig t;
  static constexpr double kLr[] = {2e-3, 2e-3, 2e-3, 5e-4, 5e-4};
  static constexpr int kEpochs[] = {8, 8, 8, 8, 8};
  for (int k = 1; k <= 5; ++k) {
    StageConfig& c = t.stages[static_cast<std::size_t>(k - 1)];
    c.stage = k;
    c.initial_lr = kLr[k - 1];
    c.epochs = kEpochs[k - 1];
    c.decay_epochs = std::max(1, c.epochs / 2);
  }
  return t;
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kBadConfig, std::string("config is not valid JSON: ") + e.what());
  }
  if (j.contains("train")) j = j["train"];
  TrainConfig t = desk();
  try {
    const std::string schedule = j.value("schedule", std::string("desk"));
    if (schedule == "full") {
      t = full_scale();
    } else if (schedule == "scaled") {
      t = scaled(j.value("epoch_divisor", 10));
    } else if (schedule != "desk") {
      fail(ErrorKind::kBadConfig, "unknown schedule '" + schedule + "'");
    }
    t.batch_size = j.value("batch_size", t.batch_size);
    if (j.contains("stages")) {
      const auto& st = j["stages"];
      if (!st.is_array() || st.size() > 5) fail(ErrorKind::kBadConfig, "\"stages\" must be an array of at most 5 objects");
      for (std::size_t i = 0; i < st.size(); ++i) {
        StageConfig& c = t.stages[i];
        c.initial_lr = st[i].value("lr", c.initial_lr);
        c.epochs = st[i].value("epochs", c.epochs);
        // An epoch override without its own decay window keeps the window inside the stage.
        c.decay_epochs = st[i].value("decay_epochs", std::min(c.decay_epochs, c.epochs));
        c.decay_rate = st[i].value("decay_rate", c.decay_rate);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kBadConfig, std::string("train config field has the wrong type: ") + e.what());
  }
  if (t.batch_size < 1) fail(ErrorKind::kBadConfig, "batch_size must be >= 1");
  for (const StageConfig& c : t.stages) {
    if (c.epochs < 1 || c.decay_epochs < 0 || c.decay_epochs > c.epochs || !(c.initial_lr > 0.0) || !(c.decay_rate > 0.0)) {
      fail(ErrorKind::kBadConfig, "stage " + std::to_string(c.stage) + " needs epochs >= 1, 0 <= decay_epochs <= epochs and positive rates");
    }
  }
  return t;
}

std::string TrainConfig::to_json() const {
  nlohmann::json j;
  j["batch_size"] = batch_size;
  j["stages"] = nlohmann::json::array();
  for (const StageConfig& c : stages) {
    j["stages"].push_back({{"lr", c.initial_lr}, {"epochs", c.epochs}, {"decay_epochs", c.decay_epochs}, {"decay_rate", c.decay_rate}});
  }
  return j.dump();
}

const StageConfig& TrainConfig::stage(int k) const {
  check_stage(k);
  return stages[static_cast<std::size_t>(k - 1)];
}

double lr_schedule(const StageConfig& cfg, int epoch) {
  require(epoch >= 0 && epoch < cfg.epochs, ErrorKind::kBadConfig, "epoch outside the stage");
  const int start = cfg.epochs - cfg.decay_epochs;
  if (epoch < start) return cfg.initial_lr;
  return cfg.initial_lr * std::pow(cfg.decay_rate, epoch - start + 1);
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr,
               const AdamConfig& cfg) {
  require(params.size() == grads.size(), ErrorKind::kShapeMismatch, "adam: parameter and gradient sizes differ");
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
    state.step = 0;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
    const double mh = state.m[i] / c1;
    const double vh = state.v[i] / c2;
    params[i] -= lr * mh / (std::sqrt(vh) + cfg.eps);
  }
}

ParamSet::ParamSet(ModelGraph& model) {
  const int stage = model.stage;
  for (auto& w : weights(model)) {
    const int bits = weight_bits(w.kind, stage);
    if (bits == 0) continue;
    Entry e;
    e.name = w.name;
    e.value = w.value->data();
    e.shape = w.value->shape();
    e.latent = bits < 32;
    entries_.push_back(std::move(e));
  }
  if (!model.traits().shift_norm) {
    for (NormLayer* n : norms(model)) {
      const Shape vs{1, 1, 1, 1, n->channels()};
      entries_.push_back(Entry{n->name + ".gamma", n->bn.gamma, vs, false, {}, {}});
      entries_.push_back(Entry{n->name + ".beta", n->bn.beta, vs, false, {}, {}});
    }
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    entries_[i].grad.assign(entries_[i].value.size(), 0.0);
    by_data_.emplace(entries_[i].value.data(), i);
  }
}

ad::Var ParamSet::bind(ad::Tape& tape, std::span<const double> value, const Shape& shape) {
  const auto it = by_data_.find(value.data());
  if (it == by_data_.end()) return ParamBinder::bind(tape, value, shape);
  Entry& e = entries_[it->second];
  return tape.param(Tensor5(shape, std::vector<double>(value.begin(), value.end())), e.grad, e.name);
}

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  for (const Entry& e : entries_) out.push_back(e.name);
  return out;
}

std::int64_t ParamSet::count() const {
  std::int64_t n = 0;
  for (const Entry& e : entries_) n += static_cast<std::int64_t>(e.value.size());
  return n;
}

void ParamSet::zero_grad() {
  for (Entry& e : entries_) std::fill(e.grad.begin(), e.grad.end(), 0.0);
}

void ParamSet::step(double lr, const AdamConfig& cfg) {
  for (Entry& e : entries_) adam_step(e.value, e.grad, e.adam, lr, cfg);
}

void ParamSet::clip_latent() {
  for (Entry& e : entries_) {
    if (!e.latent) continue;
    for (double& v : e.value) v = std::clamp(v, -1.0, 1.0);
  }
}

std::string csv_header() { return "stage,epoch,lr,loss,accuracy,test_accuracy"; }

std::string to_csv(const LogRow& r) {
  std::ostringstream os;
  os << std::setprecision(17) << r.stage << ',' << r.epoch << ',' << r.lr << ',' << r.loss << ',' << r.accuracy << ','
     << r.test_accuracy;
  return os.str();
}

namespace {

std::vector<std::vector<std::size_t>> batches_of(std::size_t n, int batch_size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < n; b += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> idx;
    for (std::size_t i = b; i < std::min(n, b + static_cast<std::size_t>(batch_size)); ++i) idx.push_back(i);
    out.push_back(std::move(idx));
  }
  return out;
}

}  // namespace

StageResult run_stage(ModelGraph& model, const StageConfig& cfg, const data::Dataset& train, const RunOptions& opt) {
  require(opt.batch_size >= 1, ErrorKind::kBadConfig, "batch size must be >= 1");
  require(!train.clips.empty(), ErrorKind::kBadConfig, "empty training set");
  require(train.frames == model.config.frames && train.height == model.config.height &&
              train.width == model.config.width && model.config.in_channels == 1,
          ErrorKind::kBadConfig, "dataset clips do not match the model input");
  enter_stage(model, cfg.stage);
  if (model.config.tgap_mode == TgapMode::kCalibrated && !model.traits().heaviside_conv_act) {
    calibrate_tgap(model, train, opt.batch_size);
  }

  ParamSet params(model);
  std::unordered_map<const NormLayer*, NormLayer*> norm_of;
  for (NormLayer* n : norms(model)) norm_of.emplace(n, n);
  const double momentum = model.config.bn_momentum;

  std::mt19937_64 rng(data::splitmix64(opt.seed ^ (0x5354414745ULL + static_cast<std::uint64_t>(cfg.stage))));
  std::vector<std::size_t> order(train.size());
  StageResult result;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(cfg, epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::int64_t correct = 0;
    int batch_index = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(opt.batch_size)) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b),
                                         order.begin() + static_cast<std::ptrdiff_t>(
                                                             std::min(order.size(), b + static_cast<std::size_t>(opt.batch_size))));
      const Tensor5 x = train.batch(idx);
      const std::vector<int> labels = train.labels(idx);

      ad::Tape tape;
      std::vector<NormStats> stats;
      ForwardOptions fo;
      fo.training = true;
      fo.binder = &params;
      fo.batch_stats = &stats;
      const NetOutput out = forward(tape, model, x, fo);
      const ad::Var loss = ad::softmax_cross_entropy(out.scores, labels);
      params.zero_grad();
      tape.backward(loss);
      params.step(lr, opt.adam);
      if (model.stage >= 2) params.clip_latent();

      for (const NormStats& s : stats) {
        NormLayer* n = norm_of.at(s.layer);
        for (std::size_t c = 0; c < s.stats.mean.size(); ++c) {
          n->bn.mean[c] = momentum * n->bn.mean[c] + (1.0 - momentum) * s.stats.mean[c];
          n->bn.var[c] = momentum * n->bn.var[c] + (1.0 - momentum) * s.stats.var[c];
        }
      }
      const double l = loss.value()[0];
      loss_sum += l * static_cast<double>(idx.size());
      const std::vector<int> pred = argmax(out.scores.value());
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i] ? 1 : 0;
      if (opt.on_batch) opt.on_batch(epoch, batch_index, l);
      ++batch_index;
    }

    LogRow row;
    row.stage = cfg.stage;
    row.epoch = epoch;
    row.lr = lr;
    row.loss = loss_sum / static_cast<double>(train.size());
    row.accuracy = static_cast<double>(correct) / static_cast<double>(train.size());
    if (opt.test) row.test_accuracy = evaluate(model, *opt.test, opt.batch_size, thread_budget()).accuracy;
    result.log.push_back(row);
    if (opt.on_epoch) opt.on_epoch(row);
  }

  recalibrate_bn(model, train, opt.batch_size);
  if (opt.test) result.final_test_accuracy = evaluate(model, *opt.test, opt.batch_size, thread_budget()).accuracy;
  model.completed_stage = cfg.stage;
  std::ostringstream os;
  os << rng;
  model.rng_state = os.str();
  return result;
}

void calibrate_tgap(ModelGraph& model, const data::Dataset& ds, int batch_size) {
  std::vector<MORBlock*> blocks;
  for (auto& b : model.blocks) {
    if (auto* m = std::get_if<MORBlock>(&b)) blocks.push_back(m);
  }
  std::vector<double> peak(blocks.size(), 0.0);
  for (const auto& idx : batches_of(ds.size(), batch_size)) {
    ad::Tape tape(false);
    std::vector<double> peaks;
    ForwardOptions fo;
    fo.tgap_peaks = &peaks;
    forward(tape, model, ds.batch(idx), fo);
    for (std::size_t i = 0; i < peak.size() && i < peaks.size(); ++i) peak[i] = std::max(peak[i], peaks[i]);
  }
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i]->tgap_m = peak[i] > 0.0 ? peak[i] : 1.0;
}

void recalibrate_bn(ModelGraph& model, const data::Dataset& ds, int batch_size) {
  if (model.traits().shift_norm || ds.clips.empty()) return;
  struct Acc {
    std::vector<double> mean;
    std::vector<double> sq;  // E[x^2] per channel
    double weight = 0.0;
  };
  std::unordered_map<const NormLayer*, Acc> acc;
  for (const auto& idx : batches_of(ds.size(), batch_size)) {
    ad::Tape tape(false);
    std::vector<NormStats> stats;
    ForwardOptions fo;
    fo.training = true;
    fo.batch_stats = &stats;
    forward(tape, model, ds.batch(idx), fo);
    const double w = static_cast<double>(idx.size());
    for (const NormStats& s : stats) {
      Acc& a = acc[s.layer];
      a.mean.resize(s.stats.mean.size(), 0.0);
      a.sq.resize(s.stats.mean.size(), 0.0);
      for (std::size_t c = 0; c < s.stats.mean.size(); ++c) {
        a.mean[c] += w * s.stats.mean[c];
        a.sq[c] += w * (s.stats.var[c] + s.stats.mean[c] * s.stats.mean[c]);
      }
      a.weight += w;
    }
  }
  for (NormLayer* n : norms(model)) {
    const auto it = acc.find(n);
    if (it == acc.end()) continue;
    const Acc& a = it->second;
    for (std::size_t c = 0; c < a.mean.size(); ++c) {
      const double mu = a.mean[c] / a.weight;
      n->bn.mean[c] = mu;
      n->bn.var[c] = std::max(0.0, a.sq[c] / a.weight - mu * mu);
    }
  }
}

Evaluation summarize(const std::vector<int>& predictions, const std::vector<int>& labels, int classes) {
  require(predictions.size() == labels.size(), ErrorKind::kShapeMismatch, "prediction and label counts differ");
  Evaluation e;
  e.predictions = predictions;
  e.confusion.assign(static_cast<std::size_t>(classes), std::vector<int>(static_cast<std::size_t>(classes), 0));
  std::int64_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    e.confusion[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(predictions[i])] += 1;
    correct += predictions[i] == labels[i] ? 1 : 0;
  }
  e.accuracy = labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(labels.size());
  return e;
}

Evaluation evaluate(const ModelGraph& model, const data::Dataset& ds, int batch_size, int threads) {
  const auto batches = batches_of(ds.size(), batch_size);
  std::vector<std::vector<int>> preds(batches.size());
  auto work = [&](std::size_t first, std::size_t stride) {
    for (std::size_t b = first; b < batches.size(); b += stride) preds[b] = ref::run(model, ds.batch(batches[b])).predictions;
  };
  const std::size_t workers = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), 1, std::max<std::size_t>(batches.size(), 1));
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
    for (auto& t : pool) t.join();
  }
  std::vector<int> all;
  for (const auto& p : preds) all.insert(all.end(), p.begin(), p.end());
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return summarize(all, ds.labels(idx), ds.classes);
}

int thread_budget() {
  const char* env = std::getenv("BILLNET_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) return 1;
  return static_cast<int>(std::min<long>(v, 256));
}

}  // namespace billnet::train
