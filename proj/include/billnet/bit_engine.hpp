// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "billnet/model.hpp"
#include "billnet/network.hpp"
#include "billnet/tensor.hpp"

namespace billnet::logic {

enum class SlotType { kBit, kTern, kInt };
std::string_view to_string(SlotType t);

using Slot = std::variant<BitTensor, TernTensor, IntTensor>;

// Gate ops. Every field is an integer, a bit plane or a slot index.

/// +-1 weights on an integer input (stem codes, inner CF layers).
struct IntConvOp {
  ref::ConvSpec spec;
  BitTensor weight;  // shape spec.weight_shape(); bit set = +1
  int in = -1;
  int out = -1;
};
/// +-1 weights on a bit input: per tap 2*popcount(x & w & group) - popcount(x & group).
struct PackedConvOp {
  ref::ConvSpec spec;
  int wpp = 0;                // words per input pixel
  std::vector<Word> weight;   // (C_out, taps, wpp), aligned to input channels
  std::vector<Word> group;    // (groups, wpp) channel masks
  int in = -1;
  int out = -1;
};
/// bit = value > 0.
struct ThresholdOp {
  int in = -1;
  int out = -1;
};
struct OrOp {
  int a = -1;
  int b = -1;
  int out = -1;
};
/// Max pooling on bits: OR over the window.
struct PoolOp {
  ref::PoolSpec spec;
  int in = -1;
  int out = -1;
};
/// bit(t,c) = popcount over h*w > threshold.
struct TgapOp {
  int threshold = 0;
  int in = -1;
  int out = -1;
};
/// (I1 & S) | (I0 & ~S) with S broadcast over h, w.
struct MuxOp {
  int i0 = -1;
  int i1 = -1;
  int select = -1;
  int out = -1;
};
/// Per (n,t,c) bitcount over h*w.
struct GapCountOp {
  int in = -1;
  int out = -1;
};

/// Sign planes of the recurrent weights. Row j (gate k = j / H) holds the
/// weights feeding pre-activation j; gate order i, f, o, c.
struct QlstmWeights {
  int n_in = 0;
  int n_hidden = 0;
  BitTensor wx;  // (1,1,1,4H,n_in)
  BitTensor wh;  // (1,1,1,4H,H)
};

struct QlstmOp {
  QlstmWeights weights;
  int spatial = 1;  // h*w pooled by the GAP, multiplies the recurrent term
  int in = -1;
  // Outputs, each stacked over time.
  int ax = -1, bh = -1, i = -1, f = -1, o = -1, g = -1, c = -1, h = -1;
};
/// Ternary weights on ternary states; integer logits per step.
struct DenseOp {
  TernTensor weight;  // (1,1,1,K,4m), row k = class k
  int in = -1;
  int out = -1;
};
/// Argmax of the per-step logits summed over time; lowest index on ties.
struct ArgmaxOp {
  int in = -1;
  int out = -1;
};

using Op = std::variant<IntConvOp, PackedConvOp, ThresholdOp, OrOp, PoolOp, TgapOp, MuxOp, GapCountOp, QlstmOp,
                        DenseOp, ArgmaxOp>;

std::string_view op_name(const Op& op);

struct SlotInfo {
  SlotType type = SlotType::kBit;
  std::vector<std::string> labels;  // trace labels shared with the reference path
};

struct GatePlan {
  Shape input;  // per-sample input shape (batch 1); codes 0..255
  std::vector<SlotInfo> slots;
  std::vector<Op> ops;
  int input_slot = 0;
  int logits_slot = -1;
  int prediction_slot = -1;

  std::string describe() const;
};

/// Builds the gate plan of a fully quantized model. Normalization and every
/// positive scale are dropped. Throws NotFullyQuantized below stage 5.
GatePlan compile(const ModelGraph& model);

struct Execution {
  std::vector<Slot> slots;
  std::vector<int> predictions;
  IntTensor logits;  // (N,T',1,1,K)
};

/// Runs the plan on integer codes (N,T,H,W,C).
Execution execute(const GatePlan& plan, const IntTensor& codes);

/// Integer codes from a real tensor holding values 0..255.
IntTensor to_codes(const Tensor5& x);

/// Slots of an execution as real tensors under their labels.
Trace to_trace(const GatePlan& plan, const Execution& exec);
Tensor5 to_real(const Slot& slot);

struct QlstmState {
  TernTensor c;  // (N,1,1,1,H)
  TernTensor h;
};

struct QlstmStepDetail {
  IntTensor ax, bh;
  BitTensor i, f, o;
  TernTensor g;
};

/// One recurrent step: pre = x_counts . Wx + spatial * (h . Wh) as integers,
/// i/f/o = pre > 0, g = strict sign, c = sat(f&c + i&g), h = o&c.
QlstmState qlstm_step(const IntTensor& x_counts, const QlstmState& state, const QlstmWeights& w, int spatial,
                      QlstmStepDetail* detail = nullptr);

QlstmWeights pack_lstm(const LstmLayer& layer);

/// Element-wise saturating add of two ternary tensors.
TernTensor saturating_add(const TernTensor& a, const TernTensor& b);

struct Divergence {
  std::string label;
  int t = 0;             // time index
  std::int64_t index = 0;  // flat element index inside the tensor
  int channel = 0;
  double reference = 0.0;
  double logic = 0.0;

  std::string describe() const;
};

/// First entry of `logic` that differs from the same label in `reference`.
/// A label present on only one side, or a shape difference, diverges with
/// index -1.
std::optional<Divergence> first_divergence(const Trace& reference, const Trace& logic);

}  // namespace billnet::logic
