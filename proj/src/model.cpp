// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "billnet/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "json.hpp"

namespace billnet {

using nlohmann::json;

std::string to_string(TgapMode mode) {
  switch (mode) {
    case TgapMode::kSampleMax: return "sample_max";
    case TgapMode::kBatchMax: return "batch_max";
    case TgapMode::kCalibrated: return "calibrated";
  }
  return "sample_max";
}

TgapMode tgap_mode_from_string(const std::string& s) {
  if (s == "sample_max") return TgapMode::kSampleMax;
  if (s == "batch_max") return TgapMode::kBatchMax;
  if (s == "calibrated") return TgapMode::kCalibrated;
  fail(ErrorKind::kBadConfig, "unknown tgap_mode '" + s + "'");
}

BillnetConfig BillnetConfig::full_scale() { return BillnetConfig{}; }

BillnetConfig BillnetConfig::toy() {
  BillnetConfig c;
  c.n = 16;
  c.g = 4;
  c.m = 8;
  c.frames = 8;
  c.height = 24;
  c.width = 32;
  c.in_channels = 1;
  c.classes = 4;
  c.layout = {"MP", "MOR1", "MP", "MOR2"};
  return c;
}

std::string BillnetConfig::to_json() const {
  json j;
  j["n"] = n;
  j["g"] = g;
  j["m"] = m;
  j["frames"] = frames;
  j["height"] = height;
  j["width"] = width;
  j["in_channels"] = in_channels;
  j["classes"] = classes;
  j["layout"] = layout;
  j["stem_kernel"] = stem_kernel;
  j["stem_stride"] = stem_stride;
  j["pool_window"] = pool_window;
  j["tgap_mode"] = to_string(tgap_mode);
  j["bn_eps"] = bn_eps;
  j["bn_momentum"] = bn_momentum;
  j["seed"] = seed;
  return j.dump();
}

BillnetConfig BillnetConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::kBadConfig, std::string("config is not valid JSON: ") + e.what());
  }
  BillnetConfig c;
  if (j.contains("preset")) {
    const auto preset = j["preset"].get<std::string>();
    if (preset == "full") {
      c = full_scale();
    } else if (preset == "toy") {
      c = toy();
    } else {
      fail(ErrorKind::kBadConfig, "unknown preset '" + preset + "'");
    }
  }
  try {
    c.n = j.value("n", c.n);
    c.g = j.value("g", c.g);
    c.m = j.value("m", c.m);
    c.frames = j.value("frames", c.frames);
    c.height = j.value("height", c.height);
    c.width = j.value("width", c.width);
    c.in_channels = j.value("in_channels", c.in_channels);
    c.classes = j.value("classes", c.classes);
    c.layout = j.value("layout", c.layout);
    c.stem_kernel = j.value("stem_kernel", c.stem_kernel);
    c.stem_stride = j.value("stem_stride", c.stem_stride);
    c.pool_window = j.value("pool_window", c.pool_window);
    c.tgap_mode = tgap_mode_from_string(j.value("tgap_mode", to_string(c.tgap_mode)));
    c.bn_eps = j.value("bn_eps", c.bn_eps);
    c.bn_momentum = j.value("bn_momentum", c.bn_momentum);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    fail(ErrorKind::kBadConfig, std::string("config field has the wrong type: ") + e.what());
  }
  return c;
}

void check_stage(int stage) {
  require(stage >= 1 && stage <= 5, ErrorKind::kStageOrderViolation, "stage must be in 1..5, got " + std::to_string(stage));
}

StageTraits StageTraits::of(int stage) {
  check_stage(stage);
  StageTraits t;
  t.stage = stage;
  t.binary_conv_weights = stage >= 2;
  t.binary_lstm_weights = stage >= 2;
  t.ternary_dense_weights = stage >= 2;
  t.heaviside_conv_act = stage >= 3;
  t.shift_norm = stage >= 4;
  t.quantized_lstm_act = stage >= 5;
  t.biases = stage == 1;
  return t;
}

std::vector<std::string> StageTraits::quantized_components() const {
  std::vector<std::string> out;
  if (binary_conv_weights) out.emplace_back("conv_weights");
  if (binary_lstm_weights) out.emplace_back("lstm_weights");
  if (ternary_dense_weights) out.emplace_back("dense_weights");
  if (heaviside_conv_act) out.emplace_back("conv_activations");
  if (shift_norm) out.emplace_back("normalization");
  if (quantized_lstm_act) out.emplace_back("lstm_activations");
  return out;
}

namespace {

struct LayoutEntry {
  enum Kind { kPool, kMor, kCf } kind;
  int mult = 1;
};

LayoutEntry parse_entry(const std::string& tok) {
  if (tok == "MP") return {LayoutEntry::kPool, 0};
  auto parse_mult = [&](std::size_t prefix) {
    const std::string rest = tok.substr(prefix);
    if (rest != "1" && rest != "2" && rest != "4") {
      fail(ErrorKind::kBadConfig, "layout entry '" + tok + "': C_o must be n, 2n or 4n");
    }
    return std::stoi(rest);
  };
  if (tok.rfind("MOR", 0) == 0) return {LayoutEntry::kMor, parse_mult(3)};
  if (tok.rfind("CF", 0) == 0) return {LayoutEntry::kCf, parse_mult(2)};
  fail(ErrorKind::kBadConfig, "unknown layout entry '" + tok + "'");
}

class Init {
 public:
  explicit Init(std::uint64_t seed) : rng_(seed) {}

  Tensor5 uniform(Shape shape, double bound) {
    Tensor5 t(shape);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.vec()) v = dist(rng_);
    return t;
  }

  std::string state() const {
    std::ostringstream os;
    os << rng_;
    return os.str();
  }

 private:
  std::mt19937_64 rng_;
};

ConvLayer make_conv(Init& init, std::string name, ref::ConvSpec spec) {
  ref::validate(spec);
  ConvLayer l;
  l.name = std::move(name);
  l.spec = spec;
  const double fan_in = static_cast<double>(spec.kernel[0] * spec.kernel[1] * spec.kernel[2] * spec.in_per_group());
  l.weight = init.uniform(spec.weight_shape(), std::sqrt(3.0 / fan_in));
  return l;
}

NormLayer make_norm(std::string name, int channels, double eps) {
  NormLayer n;
  n.name = std::move(name);
  n.bn = quant::BNParams::identity(channels);
  n.bn.eps = eps;
  return n;
}

ref::ConvSpec pointwise(int ci, int co) {
  ref::ConvSpec s;
  s.in_channels = ci;
  s.out_channels = co;
  return s;
}

CFBlock make_cf(Init& init, const std::string& name, int ci, int co, int groups) {
  require(ci % 2 == 0, ErrorKind::kBadConfig, name + ": C_i must be even for the C_i/2 bottleneck");
  const int low = ci / 2;
  require(low % groups == 0, ErrorKind::kBadConfig,
          name + ": bottleneck width " + std::to_string(low) + " not divisible by g=" + std::to_string(groups));
  CFBlock cf;
  cf.pw1 = make_conv(init, name + ".pw1", pointwise(ci, low));
  ref::ConvSpec gs;
  gs.kernel = {3, 3, 3};
  gs.groups = groups;
  gs.in_channels = low;
  gs.out_channels = low;
  cf.gconv = make_conv(init, name + ".gconv", gs);
  cf.pw2 = make_conv(init, name + ".pw2", pointwise(low, co));
  return cf;
}

}  // namespace

void validate(const BillnetConfig& cfg) {
  require(cfg.n >= 1 && cfg.g >= 1 && cfg.m >= 1, ErrorKind::kBadConfig, "n, g, m must be positive");
  require(cfg.n % (2 * cfg.g) == 0, ErrorKind::kBadConfig, "n must be divisible by 2g");
  require(cfg.frames >= 1 && cfg.height >= 1 && cfg.width >= 1 && cfg.in_channels >= 1, ErrorKind::kBadConfig,
          "input dims must be positive");
  require(cfg.classes >= 1, ErrorKind::kBadConfig, "classes must be positive");
  for (int i = 0; i < 3; ++i) {
    require(cfg.stem_kernel[i] >= 1 && cfg.stem_kernel[i] % 2 == 1, ErrorKind::kBadConfig, "stem kernel dims must be odd");
    require(cfg.stem_stride[i] >= 1 && cfg.pool_window[i] >= 1, ErrorKind::kBadConfig, "strides must be positive");
  }
  require(cfg.bn_eps > 0.0, ErrorKind::kBadConfig, "bn_eps must be positive");
  require(cfg.bn_momentum >= 0.0 && cfg.bn_momentum < 1.0, ErrorKind::kBadConfig, "bn_momentum must be in [0,1)");
  for (const auto& tok : cfg.layout) parse_entry(tok);
}

ModelGraph build(const BillnetConfig& cfg) {
  validate(cfg);
  Init init(cfg.seed);
  ModelGraph model;
  model.config = cfg;

  Shape shape = model.input_shape(1);

  StemBlock stem;
  ref::ConvSpec ss;
  ss.kernel = cfg.stem_kernel;
  ss.stride = cfg.stem_stride;
  ss.in_channels = cfg.in_channels;
  ss.out_channels = cfg.n;
  stem.conv = make_conv(init, "stem.conv", ss);
  stem.norm = make_norm("stem.norm", cfg.n, cfg.bn_eps);
  shape = ref::conv_output_shape(shape, ss);
  model.blocks.emplace_back(std::move(stem));

  int pools = 0;
  int mors = 0;
  int cfs = 0;
  for (const auto& tok : cfg.layout) {
    const LayoutEntry e = parse_entry(tok);
    if (e.kind == LayoutEntry::kPool) {
      PoolBlock p;
      p.name = "pool" + std::to_string(++pools);
      p.spec.window = cfg.pool_window;
      p.spec.stride = cfg.pool_window;
      for (int i = 0; i < 3; ++i) {
        const int dim = i == 0 ? shape.t : (i == 1 ? shape.h : shape.w);
        require(dim >= cfg.pool_window[i], ErrorKind::kBadConfig, p.name + ": feature map too small to pool");
      }
      shape = ref::pool_output_shape(shape, p.spec);
      model.blocks.emplace_back(std::move(p));
      continue;
    }
    const int ci = shape.c;
    const int co = e.mult * cfg.n;
    if (e.kind == LayoutEntry::kCf) {
      CFUnit u;
      u.name = "cf" + std::to_string(++cfs);
      u.cf = make_cf(init, u.name, ci, co, cfg.g);
      u.norm = make_norm(u.name + ".norm", co, cfg.bn_eps);
      model.blocks.emplace_back(std::move(u));
    } else {
      MORBlock b;
      b.name = "mor" + std::to_string(++mors);
      b.cf1 = make_cf(init, b.name + ".cf1", ci, co, cfg.g);
      b.norm1 = make_norm(b.name + ".norm1", co, cfg.bn_eps);
      b.cf2 = make_cf(init, b.name + ".cf2", co, co, cfg.g);
      b.norm2 = make_norm(b.name + ".norm2", co, cfg.bn_eps);
      if (ci != co) {
        Projection p;
        p.conv = make_conv(init, b.name + ".proj", pointwise(ci, co));
        p.norm = make_norm(b.name + ".proj.norm", co, cfg.bn_eps);
        b.proj = std::move(p);
      }
      model.blocks.emplace_back(std::move(b));
    }
    shape.c = co;
  }

  const int hidden = cfg.lstm_hidden();
  model.lstm.n_in = shape.c;
  model.lstm.n_hidden = hidden;
  model.lstm.input_divisor = shape.h * shape.w;
  const double lb = 1.0 / std::sqrt(static_cast<double>(hidden));
  model.lstm.wx = init.uniform(ref::matrix_shape(shape.c, 4 * hidden), lb);
  model.lstm.wh = init.uniform(ref::matrix_shape(hidden, 4 * hidden), lb);
  model.lstm.bias = Tensor5(ref::matrix_shape(1, 4 * hidden));

  model.dense.m = cfg.m;
  model.dense.weight = init.uniform(ref::matrix_shape(hidden, cfg.classes), 1.0 / std::sqrt(static_cast<double>(hidden)));
  model.dense.bias = Tensor5(ref::matrix_shape(1, cfg.classes));

  model.rng_state = init.state();
  return model;
}

namespace {

template <typename Model, typename Ref, typename NormPtr>
void collect(Model& model, std::vector<Ref>& out, std::vector<NormPtr>* norms_out) {
  auto conv = [&](auto& layer, WeightKind kind = WeightKind::kConv) {
    out.push_back(Ref{layer.name, kind, &layer.weight});
  };
  auto cf = [&](auto& block) {
    conv(block.pw1);
    conv(block.gconv);
    conv(block.pw2);
  };
  auto norm = [&](auto& n) {
    if (norms_out) norms_out->push_back(&n);
  };
  for (auto& block : model.blocks) {
    std::visit(
        [&](auto& b) {
          using B = std::decay_t<decltype(b)>;
          if constexpr (std::is_same_v<B, StemBlock>) {
            conv(b.conv, WeightKind::kStem);
            norm(b.norm);
          } else if constexpr (std::is_same_v<B, CFUnit>) {
            cf(b.cf);
            norm(b.norm);
          } else if constexpr (std::is_same_v<B, MORBlock>) {
            cf(b.cf1);
            norm(b.norm1);
            cf(b.cf2);
            norm(b.norm2);
            if (b.proj) {
              conv(b.proj->conv);
              norm(b.proj->norm);
            }
          }
        },
        block);
  }
  if (!model.lstm.wx.empty()) {
    out.push_back(Ref{model.lstm.name + ".wx", WeightKind::kLstmInput, &model.lstm.wx});
    out.push_back(Ref{model.lstm.name + ".wh", WeightKind::kLstmHidden, &model.lstm.wh});
    out.push_back(Ref{model.lstm.name + ".bias", WeightKind::kLstmBias, &model.lstm.bias});
  }
  if (!model.dense.weight.empty()) {
    out.push_back(Ref{model.dense.name + ".weight", WeightKind::kDense, &model.dense.weight});
    out.push_back(Ref{model.dense.name + ".bias", WeightKind::kDenseBias, &model.dense.bias});
  }
}

}  // namespace

std::vector<WeightRef> weights(ModelGraph& model) {
  std::vector<WeightRef> out;
  collect<ModelGraph, WeightRef, NormLayer*>(model, out, nullptr);
  return out;
}

std::vector<ConstWeightRef> weights(const ModelGraph& model) {
  std::vector<ConstWeightRef> out;
  collect<const ModelGraph, ConstWeightRef, const NormLayer*>(model, out, nullptr);
  return out;
}

std::vector<NormLayer*> norms(ModelGraph& model) {
  std::vector<WeightRef> unused;
  std::vector<NormLayer*> out;
  collect<ModelGraph, WeightRef, NormLayer*>(model, unused, &out);
  return out;
}

std::vector<const NormLayer*> norms(const ModelGraph& model) {
  std::vector<ConstWeightRef> unused;
  std::vector<const NormLayer*> out;
  collect<const ModelGraph, ConstWeightRef, const NormLayer*>(model, unused, &out);
  return out;
}

namespace {

// Moves the sign of each negative folded BN scale into the output channel of
// the producing convolution, so the offset-free shift norm keeps polarity.
void fold_sign(ConvLayer& conv, const NormLayer& n) {
  const int co = conv.spec.out_channels;
  const std::int64_t per = conv.weight.size() / co;
  for (int c = 0; c < co; ++c) {
    if (n.bn.folded_scale(c) >= 0.0) continue;
    for (std::int64_t k = c * per; k < (c + 1) * per; ++k) {
      double& w = conv.weight[k];
      // sign_strict(0) = -1 on both sides, so a zero weight becomes positive.
      w = w == 0.0 ? std::numeric_limits<double>::denorm_min() : -w;
    }
  }
}

void fold_signs(ModelGraph& model) {
  for (auto& block : model.blocks) {
    std::visit(
        [](auto& b) {
          using B = std::decay_t<decltype(b)>;
          if constexpr (std::is_same_v<B, StemBlock>) {
            fold_sign(b.conv, b.norm);
          } else if constexpr (std::is_same_v<B, CFUnit>) {
            fold_sign(b.cf.pw2, b.norm);
          } else if constexpr (std::is_same_v<B, MORBlock>) {
            fold_sign(b.cf1.pw2, b.norm1);
            fold_sign(b.cf2.pw2, b.norm2);
            if (b.proj) fold_sign(b.proj->conv, b.proj->norm);
          }
        },
        block);
  }
}

}  // namespace

void enter_stage(ModelGraph& model, int stage) {
  check_stage(stage);
  if (model.completed_stage != stage - 1) {
    fail(ErrorKind::kStageOrderViolation, "stage " + std::to_string(stage) + " needs a model that completed stage " +
                                              std::to_string(stage - 1) + "; this one completed stage " +
                                              std::to_string(model.completed_stage));
  }
  if (stage == 2) {
    for (auto& w : weights(model)) {
      for (auto& v : w.value->vec()) v = std::clamp(v, -1.0, 1.0);
    }
  }
  if (stage == 4) {
    for (NormLayer* n : norms(model)) n->bsn = quant::bsn_fold(n->bn);
    fold_signs(model);
  }
  model.stage = stage;
}

int weight_bits(WeightKind kind, int stage) {
  check_stage(stage);
  const StageTraits t = StageTraits::of(stage);
  switch (kind) {
    case WeightKind::kConv:
    case WeightKind::kStem: return t.binary_conv_weights ? 1 : 32;
    case WeightKind::kLstmInput:
    case WeightKind::kLstmHidden: return t.binary_lstm_weights ? 1 : 32;
    case WeightKind::kDense: return t.ternary_dense_weights ? 2 : 32;
    case WeightKind::kLstmBias:
    case WeightKind::kDenseBias: return t.biases ? 32 : 0;
  }
  return 32;
}

ParamReport count_params(const ModelGraph& model, int stage) {
  ParamReport r;
  r.stage = stage;
  for (const auto& w : weights(model)) {
    const int bits = weight_bits(w.kind, stage);
    if (bits == 0) continue;
    ParamRow row;
    row.name = w.name;
    row.count = w.value->size();
    row.bits_per_param = bits;
    row.bits = row.count * bits;
    r.total_params += row.count;
    if (w.kind == WeightKind::kLstmBias || w.kind == WeightKind::kDenseBias) {
      r.bias_bits += row.bits;
    } else {
      r.total_bits += row.bits;
    }
    r.rows.push_back(std::move(row));
  }
  if (!StageTraits::of(stage).shift_norm) {
    for (const auto* n : norms(model)) r.norm_bits += std::int64_t{2} * 32 * n->channels();
  }
  return r;
}

Shape final_feature_shape(const ModelGraph& model) {
  Shape s = model.input_shape(1);
  for (const auto& block : model.blocks) {
    std::visit(
        [&](const auto& b) {
          using B = std::decay_t<decltype(b)>;
          if constexpr (std::is_same_v<B, StemBlock>) {
            s = ref::conv_output_shape(s, b.conv.spec);
          } else if constexpr (std::is_same_v<B, PoolBlock>) {
            s = ref::pool_output_shape(s, b.spec);
          } else if constexpr (std::is_same_v<B, CFUnit>) {
            s.c = b.cf.out_channels();
          } else {
            s.c = b.out_channels();
          }
        },
        block);
  }
  return s;
}

}  // namespace billnet
