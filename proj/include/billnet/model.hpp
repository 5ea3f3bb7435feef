// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "billnet/kernels.hpp"
#include "billnet/quantize.hpp"
#include "billnet/tensor.hpp"

namespace billnet {

/// How the TGAP reference level m is chosen while activations are real
/// (stages 1-2). From stage 3 onward m is the constant 1.
enum class TgapMode { kSampleMax, kBatchMax, kCalibrated };

std::string to_string(TgapMode mode);
TgapMode tgap_mode_from_string(const std::string& s);

struct BillnetConfig {
  int n = 64;  // channel base
  int g = 4;   // groups of the 3x3x3 convolution in every CF
  int m = 32;  // LSTM width base; hidden size is 4m
  int frames = 16;
  int height = 96;
  int width = 128;
  int in_channels = 3;
  int classes = 27;
  /// Entries after the stem: "MP", "MOR<k>" or "CF<k>" with k in {1,2,4}
  /// giving C_o = k*n.
  std::vector<std::string> layout{"MP", "MOR1", "MP", "MOR2", "MOR2", "MP", "MOR4", "MOR4"};
  std::array<int, 3> stem_kernel{3, 3, 3};
  std::array<int, 3> stem_stride{2, 2, 2};
  std::array<int, 3> pool_window{1, 2, 2};
  TgapMode tgap_mode = TgapMode::kSampleMax;
  double bn_eps = 1e-3;
  double bn_momentum = 0.9;
  std::uint64_t seed = 1;

  int lstm_hidden() const { return 4 * m; }

  /// n=64, g=4, m=32 at 16x96x128, 27 classes.
  static BillnetConfig full_scale();
  /// Desk-scale model: n=16, T=8, 24x32 grayscale, 4 classes.
  static BillnetConfig toy();

  std::string to_json() const;
  static BillnetConfig from_json(const std::string& text);

  friend bool operator==(const BillnetConfig&, const BillnetConfig&) = default;
};

/// Which components are quantized at a given training stage.
struct StageTraits {
  int stage = 1;
  bool binary_conv_weights = false;  // Sign on Conv3D weights (S2+)
  bool heaviside_conv_act = false;   // ReLU -> Heaviside (S3+)
  bool shift_norm = false;           // BN -> BSN (S4+)
  bool binary_lstm_weights = false;  // SSign (S2+)
  bool ternary_dense_weights = false;  // STern (S2+)
  bool quantized_lstm_act = false;   // Heaviside / strict sign / clip (S5)
  bool biases = true;                // only the float model carries biases

  static StageTraits of(int stage);
  /// Names of the quantized components, for monotonicity audits.
  std::vector<std::string> quantized_components() const;
};

void check_stage(int stage);

struct ConvLayer {
  std::string name;
  ref::ConvSpec spec;
  Tensor5 weight;  // latent weights (C_out, kt, kh, kw, C_in/g)
};

struct NormLayer {
  std::string name;
  quant::BNParams bn;
  quant::ShiftNorm bsn;  // filled when the model enters stage 4

  int channels() const { return bn.channels(); }
};

/// pointwise (C_i -> C_i/2) -> grouped 3x3x3 -> pointwise (C_i/2 -> C_o),
/// no nonlinearity in between.
struct CFBlock {
  ConvLayer pw1;
  ConvLayer gconv;
  ConvLayer pw2;

  int in_channels() const { return pw1.spec.in_channels; }
  int out_channels() const { return pw2.spec.out_channels; }
};

struct StemBlock {
  std::string name = "stem";
  ConvLayer conv;
  NormLayer norm;
  /// Positive factor applied after the convolution of 8-bit input codes.
  double input_scale = 1.0 / 255.0;
};

struct PoolBlock {
  std::string name;
  ref::PoolSpec spec;
};

struct CFUnit {
  std::string name;
  CFBlock cf;
  NormLayer norm;
};

struct Projection {
  ConvLayer conv;
  NormLayer norm;
};

/// MUX-OR residual block:
///   skip = x, or act(norm(pw(x))) when channel counts differ
///   I0   = OR(act(norm1(cf1(x))), skip)
///   I1   = act(norm2(cf2(I0)))
///   out  = MUX(I0, I1; S = TGAP(skip))
struct MORBlock {
  std::string name;
  CFBlock cf1;
  NormLayer norm1;
  CFBlock cf2;
  NormLayer norm2;
  std::optional<Projection> proj;
  double tgap_m = 1.0;  // used by TgapMode::kCalibrated

  int in_channels() const { return cf1.in_channels(); }
  int out_channels() const { return cf2.out_channels(); }
};

using Block = std::variant<StemBlock, PoolBlock, CFUnit, MORBlock>;

struct LstmLayer {
  std::string name = "lstm";
  int n_in = 0;
  int n_hidden = 0;
  /// Spatial size pooled by the preceding GAP; inputs arrive as sums.
  int input_divisor = 1;
  Tensor5 wx;    // (1,1,1,n_in,4*n_hidden), gate order i, f, o, c
  Tensor5 wh;    // (1,1,1,n_hidden,4*n_hidden)
  Tensor5 bias;  // (1,1,1,1,4*n_hidden)
};

struct DenseLayer {
  std::string name = "dense";
  int m = 1;
  Tensor5 weight;  // (1,1,1,4m,classes)
  Tensor5 bias;    // (1,1,1,1,classes)
};

struct ModelGraph {
  BillnetConfig config;
  int stage = 1;            // forward semantics
  int completed_stage = 0;  // last stage whose training finished
  std::vector<Block> blocks;
  LstmLayer lstm;
  DenseLayer dense;
  std::string rng_state;  // serialized std::mt19937_64

  Shape input_shape(int batch) const {
    return Shape{batch, config.frames, config.height, config.width, config.in_channels};
  }
  StageTraits traits() const { return StageTraits::of(stage); }
};

/// Moves the model into `stage` (requires completed_stage == stage - 1) and
/// applies the entry swap: latent weights clipped to [-1,1] at stage 2, BN
/// folded into shift norms at stage 4. The sign of a negative folded scale
/// moves into the producing convolution's output channel.
void enter_stage(ModelGraph& model, int stage);

/// Throws BadConfig naming the violated invariant.
void validate(const BillnetConfig& cfg);
ModelGraph build(const BillnetConfig& cfg);

enum class WeightKind { kConv, kStem, kLstmInput, kLstmHidden, kLstmBias, kDense, kDenseBias };

struct WeightRef {
  std::string name;
  WeightKind kind;
  Tensor5* value;
};
struct ConstWeightRef {
  std::string name;
  WeightKind kind;
  const Tensor5* value;
};

/// Every weight tensor in a stable order.
std::vector<WeightRef> weights(ModelGraph& model);
std::vector<ConstWeightRef> weights(const ModelGraph& model);
std::vector<NormLayer*> norms(ModelGraph& model);
std::vector<const NormLayer*> norms(const ModelGraph& model);

/// Bits used to store one weight of `kind` at `stage`; 0 when the weight
/// is absent at that stage (biases after stage 1).
int weight_bits(WeightKind kind, int stage);

struct ParamRow {
  std::string name;
  std::int64_t count = 0;
  int bits_per_param = 0;
  std::int64_t bits = 0;
};

struct ParamReport {
  int stage = 1;
  std::vector<ParamRow> rows;
  std::int64_t total_params = 0;
  std::int64_t total_bits = 0;  // weight memory: conv, LSTM and dense kernels
  std::int64_t bias_bits = 0;   // LSTM and dense biases (stage 1 only)
  std::int64_t norm_bits = 0;   // BN scale/offset at 32 bits; 0 once BSN

  /// Everything stored for inference at this stage.
  std::int64_t size_bits() const { return total_bits + bias_bits + norm_bits; }
};

ParamReport count_params(const ModelGraph& model, int stage);
inline ParamReport count_params(const ModelGraph& model) { return count_params(model, model.stage); }

/// Shape of the tensor entering the GAP for a batch of one.
Shape final_feature_shape(const ModelGraph& model);

}  // namespace billnet
