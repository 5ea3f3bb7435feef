// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "billnet/autodiff.hpp"
#include "billnet/model.hpp"

namespace billnet {

/// Named intermediates in execution order. Both execution paths use the same
/// labels so they can be compared entry by entry.
using Trace = std::vector<std::pair<std::string, Tensor5>>;

const Tensor5* find(const Trace& trace, std::string_view label);

/// Supplies tape nodes for weights. The default binds everything as
/// constants; the trainer overrides it to hand out parameters.
class ParamBinder {
 public:
  virtual ~ParamBinder() = default;
  virtual ad::Var bind(ad::Tape& tape, std::span<const double> value, const Shape& shape);
};

struct NormStats {
  const NormLayer* layer = nullptr;
  ad::BatchStats stats;
};

struct ForwardOptions {
  /// Use batch statistics in BN and report them through `batch_stats`.
  bool training = false;
  ParamBinder* binder = nullptr;
  Trace* trace = nullptr;
  std::vector<NormStats>* batch_stats = nullptr;
  /// When set, receives the largest average-pooled skip value seen by each
  /// MOR block (used to calibrate TgapMode::kCalibrated).
  std::vector<double>* tgap_peaks = nullptr;
};

struct NetOutput {
  ad::Var steps;      // (N,T',1,1,K) per-step logits without the head scale
  double scale = 1.0; // positive factor of the head (1 in stage 1)
  ad::Var scores;     // (N,1,1,1,K) = scale * mean over time of steps
};

/// Full network at model.stage on 8-bit input codes (N,T,H,W,C_in).
NetOutput forward(ad::Tape& tape, const ModelGraph& model, const Tensor5& codes, const ForwardOptions& opt = {});

/// Index of the largest score per batch item; ties go to the lowest index.
std::vector<int> argmax(const Tensor5& scores);

namespace ref {

struct RefOutput {
  Tensor5 steps;
  double scale = 1.0;
  Tensor5 scores;
  std::vector<int> predictions;
  Trace trace;
};

/// Arithmetic reference forward pass (inference mode).
RefOutput run(const ModelGraph& model, const Tensor5& codes, bool with_trace = false);

/// One MOR block at `stage` on a real input tensor.
Tensor5 mor_forward(const Tensor5& x, const MORBlock& block, int stage, TgapMode mode = TgapMode::kSampleMax,
                    Trace* trace = nullptr);

enum class LstmMode { kFloat, kWeightQuantized, kFullyQuantized };

struct LstmState {
  Tensor5 h;  // (N,1,1,1,H)
  Tensor5 c;
};

/// One LSTM step. x_t holds pooled sums (N,1,1,1,n_in) that are divided by
/// layer.input_divisor. Float mode uses biases; quantized modes use the
/// strict sign of the weights and the 3/sqrt(n_in+H) scale.
LstmState lstm_cell(const Tensor5& x_t, const LstmState& prev, const LstmLayer& layer, LstmMode mode);

/// Per-step logits of the head on (N,T',1,1,4m). Ternary mode returns the
/// unit logits and writes the positive scale to *scale.
Tensor5 dense_head(const Tensor5& h_seq, const DenseLayer& layer, bool ternary, double* scale);

/// Temporal mean of per-step logits: (N,T',1,1,K) -> (N,1,1,1,K).
Tensor5 aggregate_logits(const Tensor5& steps);

}  // namespace ref
}  // namespace billnet
