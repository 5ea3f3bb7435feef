// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "billnet/data.hpp"
#include "billnet/model.hpp"
#include "billnet/network.hpp"

namespace billnet::train {

struct StageConfig {
  int stage = 1;
  double initial_lr = 5e-4;
  int epochs = 100;
  int decay_epochs = 50;  // exponential decay over the last D epochs
  double decay_rate = 0.85;

  /// (lr, epochs) per stage at full scale, decaying over the last 50 epochs.
  static StageConfig full_scale(int stage);
  /// Full schedule with epochs and D divided by `divisor` (at least 1 each).
  static StageConfig scaled(int stage, int divisor);
};

/// Per-stage schedules plus batch size, read from the "train" object of a
/// run config:
///   {"schedule": "full" | "scaled" | "desk", "epoch_divisor": 10,
///    "batch_size": 40, "stages": [{"lr": .., "epochs": .., "decay_epochs": ..}, ...]}
/// Entries of "stages" override the chosen schedule field by field.
struct TrainConfig {
  int batch_size = 40;
  std::array<StageConfig, 5> stages;

  static TrainConfig full_scale();
  static TrainConfig scaled(int divisor);
  /// Schedule of the toy reference run.
  static TrainConfig desk();
  static TrainConfig from_json(const std::string& text);
  std::string to_json() const;

  const StageConfig& stage(int k) const;
};

/// initial_lr before epoch (epochs - D), then initial_lr * r^(epoch - (epochs - D) + 1).
double lr_schedule(const StageConfig& cfg, int epoch);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update of `params` in place.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr,
               const AdamConfig& cfg = {});

/// Trainable tensors of a model at its current stage, with gradient
/// buffers. Acts as the binder handing out tape parameters.
class ParamSet : public ParamBinder {
 public:
  struct Entry {
    std::string name;
    std::span<double> value;
    Shape shape;
    bool latent = false;  // quantized in the forward pass; clipped to [-1,1]
    std::vector<double> grad;
    AdamState adam;
  };

  explicit ParamSet(ModelGraph& model);

  ad::Var bind(ad::Tape& tape, std::span<const double> value, const Shape& shape) override;

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<std::string> names() const;
  std::int64_t count() const;

  void zero_grad();
  void step(double lr, const AdamConfig& cfg = {});
  /// Clips latent weights to [-1,1].
  void clip_latent();

 private:
  std::vector<Entry> entries_;
  std::unordered_map<const double*, std::size_t> by_data_;
};

struct LogRow {
  int stage = 1;
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;      // mean training loss over the epoch
  double accuracy = 0.0;  // training accuracy over the epoch (batch statistics)
  double test_accuracy = -1.0;  // -1 when no test set is given
};

std::string csv_header();
std::string to_csv(const LogRow& row);

struct RunOptions {
  int batch_size = 40;
  std::uint64_t seed = 1;
  AdamConfig adam;
  const data::Dataset* test = nullptr;
  /// Called after every epoch.
  std::function<void(const LogRow&)> on_epoch;
  /// Called after every batch with (epoch, batch index, loss).
  std::function<void(int, int, double)> on_batch;
};

struct StageResult {
  std::vector<LogRow> log;
  /// Test accuracy after the closing BN recalibration; -1 without a test set.
  double final_test_accuracy = -1.0;
};

/// Enters `cfg.stage` (the model must have completed the previous one),
/// trains with Adam on CCE, recalibrates BN statistics while BN is present
/// and marks the stage completed.
StageResult run_stage(ModelGraph& model, const StageConfig& cfg, const data::Dataset& train,
                      const RunOptions& opt = {});

/// Sets every MOR block's tgap_m to the largest average-pooled skip value
/// seen over the dataset (for TgapMode::kCalibrated).
void calibrate_tgap(ModelGraph& model, const data::Dataset& ds, int batch_size = 40);

/// Replaces BN moving statistics with population statistics of the
/// training-mode forward pass over `ds` (fixed batch order). No-op once BN
/// is folded.
void recalibrate_bn(ModelGraph& model, const data::Dataset& ds, int batch_size = 40);

struct Evaluation {
  double accuracy = 0.0;
  std::vector<int> predictions;
  std::vector<std::vector<int>> confusion;  // [true][predicted]
};

/// Reference-path inference over a dataset in fixed batches. Batches run on
/// up to `threads` workers; results do not depend on the worker count.
Evaluation evaluate(const ModelGraph& model, const data::Dataset& ds, int batch_size = 40, int threads = 1);

Evaluation summarize(const std::vector<int>& predictions, const std::vector<int>& labels, int classes);

/// Worker cap from BILLNET_THREADS (default 1).
int thread_budget();

}  // namespace billnet::train
