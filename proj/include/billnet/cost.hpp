// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "billnet/model.hpp"

namespace billnet::cost {

enum class Kind { kConv, kLstm, kDense, kNorm, kGate };
std::string_view to_string(Kind k);

struct LayerCost {
  std::string name;
  Kind kind = Kind::kConv;
  std::int64_t macs = 0;      // multiply-accumulates (0 for norm/gate rows)
  std::int64_t elements = 0;  // elements touched by norm/gate rows
  int b_w = 32;
  int b_a = 32;
  std::int64_t acc_len = 1;   // accumulation length (fan-in)
  double bops = 0.0;          // simple metric: MACs * b_w * b_a
  double bops_acc = 0.0;      // adds ceil(log2 acc_len) bits per MAC
  std::int64_t weight_bits = 0;
};

/// Costs of one forward pass on a single clip at the configured resolution.
/// The headline total is matmul + normalization; gate ops are separate so
/// either reading can be compared.
struct CostReport {
  int stage = 1;
  std::vector<LayerCost> layers;
  double matmul_bops = 0.0;
  double matmul_bops_acc = 0.0;
  double norm_bops = 0.0;
  double gate_bops = 0.0;
  double total_bops = 0.0;  // matmul + norm
  std::int64_t weight_bits = 0;
};

/// Cost of a full-precision multiply in bit operations (32 x 32).
inline constexpr double kFloatMulBops = 32.0 * 32.0;

CostReport cost(const ModelGraph& model, int stage);

std::string to_csv(const CostReport& r);
std::string to_table(const CostReport& r);

}  // namespace billnet::cost
