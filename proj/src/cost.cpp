// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "billnet/cost.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

namespace billnet::cost {

std::string_view to_string(Kind k) {
  switch (k) {
    case Kind::kConv: return "conv";
    case Kind::kLstm: return "lstm";
    case Kind::kDense: return "dense";
    case Kind::kNorm: return "norm";
    case Kind::kGate: return "gate";
  }
  return "?";
}

namespace {

int ceil_log2(std::int64_t v) {
  int b = 0;
  while ((std::int64_t{1} << b) < v) ++b;
  return b;
}

class Accountant {
 public:
  Accountant(CostReport& r, int stage) : r_(r), tr_(StageTraits::of(stage)), stage_(stage) {}

  // Activation bits of a conv input: 32 while activations are real.
  int act_bits() const { return tr_.heaviside_conv_act ? 1 : 32; }

  void matmul(std::string name, Kind kind, std::int64_t macs, int b_w, int b_a, std::int64_t acc_len,
              std::int64_t weight_bits) {
    LayerCost l;
    l.name = std::move(name);
    l.kind = kind;
    l.macs = macs;
    l.b_w = b_w;
    l.b_a = b_a;
    l.acc_len = acc_len;
    l.bops = static_cast<double>(macs) * b_w * b_a;
    l.bops_acc = static_cast<double>(macs) * (b_w * b_a + ceil_log2(acc_len));
    l.weight_bits = weight_bits;
    r_.matmul_bops += l.bops;
    r_.matmul_bops_acc += l.bops_acc;
    r_.weight_bits += weight_bits;
    r_.layers.push_back(std::move(l));
  }

  void elementwise(std::string name, Kind kind, std::int64_t elements, double bops_per_element) {
    LayerCost l;
    l.name = std::move(name);
    l.kind = kind;
    l.elements = elements;
    l.bops = static_cast<double>(elements) * bops_per_element;
    l.bops_acc = l.bops;
    (kind == Kind::kNorm ? r_.norm_bops : r_.gate_bops) += l.bops;
    r_.layers.push_back(std::move(l));
  }

  Shape conv(const Shape& in, const ConvLayer& l, int b_a) {
    const Shape out = ref::conv_output_shape(in, l.spec);
    const std::int64_t fan_in = std::int64_t{l.spec.kernel[0]} * l.spec.kernel[1] * l.spec.kernel[2] * l.spec.in_per_group();
    const int b_w = weight_bits(WeightKind::kConv, stage_);
    matmul(l.name, Kind::kConv, out.size() * fan_in, b_w, b_a, fan_in, l.weight.size() * b_w);
    return out;
  }

  void norm(const NormLayer& n, const Shape& s) {
    elementwise(n.name, Kind::kNorm, s.size(), tr_.shift_norm ? 0.0 : kFloatMulBops);
  }

  Shape cf(const Shape& in, const CFBlock& b) {
    Shape s = conv(in, b.pw1, act_bits());
    s = conv(s, b.gconv, act_bits());
    return conv(s, b.pw2, act_bits());
  }

  Shape block(const Shape& in, const StemBlock& b) {
    const Shape out = conv(in, b.conv, 32);
    norm(b.norm, out);
    return out;
  }

  Shape block(const Shape& in, const PoolBlock& b) {
    const Shape out = ref::pool_output_shape(in, b.spec);
    const int window = b.spec.window[0] * b.spec.window[1] * b.spec.window[2];
    elementwise(b.name, Kind::kGate, out.size() * (window - 1), act_bits());
    return out;
  }

  Shape block(const Shape& in, const CFUnit& u) {
    const Shape out = cf(in, u.cf);
    norm(u.norm, out);
    return out;
  }

  Shape block(const Shape& in, const MORBlock& b) {
    Shape skip = in;
    if (b.proj) {
      skip = conv(in, b.proj->conv, act_bits());
      norm(b.proj->norm, skip);
    }
    Shape a = cf(in, b.cf1);
    norm(b.norm1, a);
    a = cf(a, b.cf2);
    norm(b.norm2, a);
    // OR and MUX touch every element; TGAP counts every element and compares
    // once per (t, channel) with log2(h*w) bit-ops.
    const std::int64_t per_map = std::int64_t{a.n} * a.t * a.c;
    elementwise(b.name + ".or", Kind::kGate, a.size(), act_bits());
    elementwise(b.name + ".mux", Kind::kGate, a.size(), act_bits());
    elementwise(b.name + ".tgap", Kind::kGate, a.size(), 1.0);
    elementwise(b.name + ".tgap.cmp", Kind::kGate, per_map, ceil_log2(std::int64_t{a.h} * a.w));
    return a;
  }

 private:
  CostReport& r_;
  StageTraits tr_;
  int stage_;
};

}  // namespace

CostReport cost(const ModelGraph& model, int stage) {
  CostReport r;
  r.stage = stage;
  Accountant acc(r, stage);
  const StageTraits tr = StageTraits::of(stage);
  Shape s = model.input_shape(1);
  for (const Block& block : model.blocks) {
    s = std::visit([&](const auto& b) { return acc.block(s, b); }, block);
  }
  if (model.lstm.n_hidden == 0) {
    r.total_bops = r.matmul_bops + r.norm_bops;
    return r;
  }
  const int steps = s.t;
  const int hn = model.lstm.n_hidden;
  const int n_in = model.lstm.n_in;
  const int bw_lstm = weight_bits(WeightKind::kLstmInput, stage);
  // GAP input: real averages until stage 5, where the logic path feeds
  // integer bitcounts of ceil(log2(h*w+1)) bits and ternary states (2 bits).
  const int bx = tr.quantized_lstm_act ? ceil_log2(std::int64_t{s.h} * s.w + 1) : 32;
  const int bh = tr.quantized_lstm_act ? 2 : 32;
  acc.elementwise("gap", Kind::kGate, s.size(), 1.0);
  acc.matmul("lstm.wx", Kind::kLstm, std::int64_t{steps} * n_in * 4 * hn, bw_lstm, bx, n_in + hn,
             std::int64_t{n_in} * 4 * hn * bw_lstm);
  acc.matmul("lstm.wh", Kind::kLstm, std::int64_t{steps} * hn * 4 * hn, bw_lstm, bh, n_in + hn,
             std::int64_t{hn} * 4 * hn * bw_lstm + std::int64_t{4} * hn * weight_bits(WeightKind::kLstmBias, stage));
  // Cell update: f*c, i*g, o*c(or tanh c) and one add per hidden unit.
  acc.elementwise("lstm.cell", Kind::kGate, std::int64_t{steps} * hn * 4, tr.quantized_lstm_act ? 2.0 : kFloatMulBops);
  const int k = model.config.classes;
  const int bw_dense = weight_bits(WeightKind::kDense, stage);
  acc.matmul("dense", Kind::kDense, std::int64_t{steps} * 4 * model.config.m * k, bw_dense, bh, 4 * model.config.m,
             std::int64_t{4} * model.config.m * k * bw_dense + std::int64_t{k} * weight_bits(WeightKind::kDenseBias, stage));
  r.total_bops = r.matmul_bops + r.norm_bops;
  return r;
}

std::string to_csv(const CostReport& r) {
  std::ostringstream os;
  os << "stage,layer,kind,macs,elements,b_w,b_a,acc_len,bops,bops_acc,weight_bits\n";
  for (const auto& l : r.layers) {
    os << r.stage << ',' << l.name << ',' << to_string(l.kind) << ',' << l.macs << ',' << l.elements << ',' << l.b_w
       << ',' << l.b_a << ',' << l.acc_len << ',' << std::setprecision(17) << l.bops << ',' << l.bops_acc << ','
       << l.weight_bits << '\n';
  }
  return os.str();
}

std::string to_table(const CostReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "stage " << r.stage << '\n';
  os << "  matmul      " << r.matmul_bops / 1e9 << " GBOP (accumulator-aware " << r.matmul_bops_acc / 1e9 << ")\n";
  os << "  norm        " << r.norm_bops / 1e9 << " GBOP\n";
  os << "  total       " << r.total_bops / 1e9 << " GBOP (simple metric, matmul + norm)\n";
  os << "  gates       " << r.gate_bops / 1e9 << " GBOP (reported separately)\n";
  os << "  weights     " << static_cast<double>(r.weight_bits) / 1e6 << " Mb\n";
  return os.str();
}

}  // namespace billnet::cost
