// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "billnet/network.hpp"

#include <algorithm>
#include <cmath>

namespace billnet {

const Tensor5* find(const Trace& trace, std::string_view label) {
  for (const auto& [name, value] : trace) {
    if (name == label) return &value;
  }
  return nullptr;
}

ad::Var ParamBinder::bind(ad::Tape& tape, std::span<const double> value, const Shape& shape) {
  return tape.constant(Tensor5(shape, std::vector<double>(value.begin(), value.end())));
}

std::vector<int> argmax(const Tensor5& scores) {
  const Shape& s = scores.shape();
  const int k = s.c;
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(s.pixels()));
  for (std::int64_t p = 0; p < s.pixels(); ++p) {
    const double* v = scores.data().data() + p * k;
    int best = 0;
    for (int j = 1; j < k; ++j) {
      if (v[j] > v[best]) best = j;
    }
    out.push_back(best);
  }
  return out;
}

namespace {

Tensor5 stack_values(const std::vector<ad::Var>& steps) {
  const Shape s0 = steps.front().shape();
  const int tn = static_cast<int>(steps.size());
  Tensor5 y(Shape{s0.n, tn, s0.h, s0.w, s0.c});
  const std::int64_t frame = std::int64_t{s0.h} * s0.w * s0.c;
  for (int t = 0; t < tn; ++t) {
    const Tensor5& v = steps[static_cast<std::size_t>(t)].value();
    for (int n = 0; n < s0.n; ++n) std::copy(&v.at(n, 0, 0, 0, 0), &v.at(n, 0, 0, 0, 0) + frame, &y.at(n, t, 0, 0, 0));
  }
  return y;
}

class Net {
 public:
  Net(ad::Tape& tape, StageTraits traits, TgapMode mode, const ForwardOptions& opt)
      : tape_(tape), tr_(traits), mode_(mode), opt_(opt), binder_(opt.binder ? *opt.binder : default_binder_) {}

  void record(const std::string& label, ad::Var v) {
    if (opt_.trace) opt_.trace->emplace_back(label, v.value());
  }

  ad::Var weight(const Tensor5& w) { return binder_.bind(tape_, w.data(), w.shape()); }

  ad::Var conv(ad::Var x, const ConvLayer& l) {
    ad::Var w = weight(l.weight);
    if (tr_.binary_conv_weights) w = ad::sign(w);
    ad::Var y = ad::conv3d(x, w, l.spec);
    record(l.name, y);
    return y;
  }

  ad::Var norm(ad::Var x, const NormLayer& n) {
    if (tr_.shift_norm) {
      std::vector<double> s(static_cast<std::size_t>(n.bsn.channels()));
      require(n.bsn.channels() == x.shape().c, ErrorKind::kInvariantViolation, n.name + ": shift norm was never folded");
      for (int c = 0; c < n.bsn.channels(); ++c) s[static_cast<std::size_t>(c)] = n.bsn.scale(c);
      return ad::channel_scale(x, s);
    }
    const Shape vs{1, 1, 1, 1, n.channels()};
    ad::Var gamma = binder_.bind(tape_, n.bn.gamma, vs);
    ad::Var beta = binder_.bind(tape_, n.bn.beta, vs);
    if (opt_.training) {
      NormStats st;
      st.layer = &n;
      ad::Var y = ad::batch_norm_train(x, gamma, beta, n.bn.eps, &st.stats);
      if (opt_.batch_stats) opt_.batch_stats->push_back(std::move(st));
      return y;
    }
    return ad::batch_norm_eval(x, gamma, beta, n.bn.mean, n.bn.var, n.bn.eps);
  }

  ad::Var act(ad::Var x) { return tr_.heaviside_conv_act ? ad::heaviside(x) : ad::relu(x); }

  ad::Var cf(ad::Var x, const CFBlock& b) { return conv(conv(conv(x, b.pw1), b.gconv), b.pw2); }

  ad::Var stem(ad::Var x, const StemBlock& b) {
    ad::Var y = ad::scale(conv(x, b.conv), b.input_scale);
    y = act(norm(y, b.norm));
    record(b.name + ".act", y);
    return y;
  }

  ad::Var pool(ad::Var x, const PoolBlock& b) {
    ad::Var y = ad::maxpool(x, b.spec);
    record(b.name, y);
    return y;
  }

  ad::Var cf_unit(ad::Var x, const CFUnit& u) {
    ad::Var y = act(norm(cf(x, u.cf), u.norm));
    record(u.name + ".act", y);
    return y;
  }

  Tensor5 select(const Tensor5& skip, const MORBlock& b) {
    const Tensor5 ap = ref::gap_spatial(skip);
    const Shape& s = ap.shape();
    if (opt_.tgap_peaks) {
      double peak = 0.0;
      for (double v : ap.data()) peak = std::max(peak, v);
      opt_.tgap_peaks->push_back(peak);
    }
    std::vector<double> m(static_cast<std::size_t>(s.n), 1.0);
    if (!tr_.heaviside_conv_act) {
      if (mode_ == TgapMode::kCalibrated) {
        std::fill(m.begin(), m.end(), b.tgap_m);
      } else {
        const std::int64_t per = std::int64_t{s.t} * s.c;
        for (int n = 0; n < s.n; ++n) {
          const double* v = ap.data().data() + n * per;
          m[static_cast<std::size_t>(n)] = *std::max_element(v, v + per);
        }
        if (mode_ == TgapMode::kBatchMax) {
          const double all = *std::max_element(m.begin(), m.end());
          std::fill(m.begin(), m.end(), all);
        }
      }
    }
    Tensor5 sel(s);
    const std::int64_t per = std::int64_t{s.t} * s.c;
    for (std::int64_t i = 0; i < s.size(); ++i) sel[i] = ap[i] > 0.5 * m[static_cast<std::size_t>(i / per)] ? 1.0 : 0.0;
    return sel;
  }

  ad::Var mor(ad::Var x, const MORBlock& b) {
    ad::Var skip = x;
    if (b.proj) skip = act(norm(conv(x, b.proj->conv), b.proj->norm));
    record(b.name + ".skip", skip);
    const Tensor5 sel = select(skip.value(), b);
    if (opt_.trace) opt_.trace->emplace_back(b.name + ".select", sel);
    ad::Var a1 = act(norm(cf(x, b.cf1), b.norm1));
    record(b.name + ".act1", a1);
    ad::Var i0 = ad::clip(ad::add(a1, skip));
    record(b.name + ".or", i0);
    ad::Var i1 = act(norm(cf(i0, b.cf2), b.norm2));
    record(b.name + ".act2", i1);
    ad::Var out = ad::mux(i0, i1, sel);
    record(b.name + ".out", out);
    return out;
  }

  struct LstmWeights {
    ad::Var wx;
    ad::Var wh;
    ad::Var bias;
    double scale = 1.0;
  };

  LstmWeights lstm_weights(const LstmLayer& l) {
    LstmWeights w;
    w.wx = weight(l.wx);
    w.wh = weight(l.wh);
    if (tr_.binary_lstm_weights) {
      w.wx = ad::sign(w.wx);
      w.wh = ad::sign(w.wh);
      w.scale = quant::ssign_scale(l.n_in, l.n_hidden);
    }
    if (tr_.biases) w.bias = weight(l.bias);
    return w;
  }

  struct Step {
    ad::Var ax, bh, i, f, o, g, c, h;
  };

  Step lstm_step(ad::Var x_t, ad::Var h, ad::Var c, const LstmLayer& l, const LstmWeights& w) {
    Step s;
    s.ax = ad::linear(x_t, w.wx);
    s.bh = ad::linear(h, w.wh);
    ad::Var pre = ad::add(ad::divide(s.ax, static_cast<double>(l.input_divisor)), s.bh);
    if (w.scale != 1.0) pre = ad::scale(pre, w.scale);
    if (tr_.biases) pre = ad::add_bias(pre, w.bias);
    const int hn = l.n_hidden;
    ad::Var pi = ad::slice_channels(pre, 0, hn);
    ad::Var pf = ad::slice_channels(pre, hn, hn);
    ad::Var po = ad::slice_channels(pre, 2 * hn, hn);
    ad::Var pg = ad::slice_channels(pre, 3 * hn, hn);
    if (tr_.quantized_lstm_act) {
      s.i = ad::heaviside(pi);
      s.f = ad::heaviside(pf);
      s.o = ad::heaviside(po);
      s.g = ad::sign(pg);
      s.c = ad::clip(ad::add(ad::mul(s.f, c), ad::mul(s.i, s.g)));
      s.h = ad::mul(s.o, s.c);
    } else {
      s.i = ad::sigmoid(pi);
      s.f = ad::sigmoid(pf);
      s.o = ad::sigmoid(po);
      s.g = ad::tanh(pg);
      s.c = ad::add(ad::mul(s.f, c), ad::mul(s.i, s.g));
      s.h = ad::mul(s.o, ad::tanh(s.c));
    }
    return s;
  }

  ad::Var lstm(ad::Var x, const LstmLayer& l) {
    const Shape& xs = x.shape();
    require(xs.c == l.n_in, ErrorKind::kShapeMismatch, "LSTM expects " + std::to_string(l.n_in) + " inputs");
    const LstmWeights w = lstm_weights(l);
    ad::Var h = tape_.constant(Tensor5(Shape{xs.n, 1, 1, 1, l.n_hidden}));
    ad::Var c = h;
    std::vector<Step> steps;
    for (int t = 0; t < xs.t; ++t) {
      Step s = lstm_step(ad::slice_time(x, t), h, c, l, w);
      h = s.h;
      c = s.c;
      steps.push_back(s);
    }
    std::vector<ad::Var> hs;
    for (const Step& s : steps) hs.push_back(s.h);
    if (opt_.trace) {
      auto put = [&](const char* label, ad::Var Step::*field) {
        std::vector<ad::Var> v;
        for (const Step& s : steps) v.push_back(s.*field);
        opt_.trace->emplace_back(std::string("lstm.") + label, stack_values(v));
      };
      put("ax", &Step::ax);
      put("bh", &Step::bh);
      put("i", &Step::i);
      put("f", &Step::f);
      put("o", &Step::o);
      put("g", &Step::g);
      put("c", &Step::c);
      put("h", &Step::h);
    }
    return ad::stack_time(hs);
  }

  ad::Var dense(ad::Var h_seq, const DenseLayer& d, double* scale) {
    ad::Var w = weight(d.weight);
    *scale = 1.0;
    if (tr_.ternary_dense_weights) {
      w = ad::ternarize(w);
      *scale = quant::stern_scale(d.m);
    }
    ad::Var z = ad::linear(h_seq, w);
    if (tr_.biases) z = ad::add_bias(z, weight(d.bias));
    record("dense.z", z);
    return z;
  }

 private:
  ad::Tape& tape_;
  StageTraits tr_;
  TgapMode mode_;
  const ForwardOptions& opt_;
  ParamBinder default_binder_;
  ParamBinder& binder_;
};

}  // namespace

NetOutput forward(ad::Tape& tape, const ModelGraph& model, const Tensor5& codes, const ForwardOptions& opt) {
  const Shape expect = model.input_shape(codes.shape().n);
  require(codes.shape() == expect, ErrorKind::kShapeMismatch,
          "input " + to_string(codes.shape()) + " does not match model input " + to_string(expect));
  Net net(tape, model.traits(), model.config.tgap_mode, opt);
  ad::Var x = tape.constant(codes);
  for (const Block& block : model.blocks) {
    x = std::visit(
        [&](const auto& b) -> ad::Var {
          using B = std::decay_t<decltype(b)>;
          if constexpr (std::is_same_v<B, StemBlock>) return net.stem(x, b);
          if constexpr (std::is_same_v<B, PoolBlock>) return net.pool(x, b);
          if constexpr (std::is_same_v<B, CFUnit>) return net.cf_unit(x, b);
          if constexpr (std::is_same_v<B, MORBlock>) return net.mor(x, b);
        },
        block);
  }
  require(x.shape().h * x.shape().w == model.lstm.input_divisor, ErrorKind::kShapeMismatch,
          "GAP input " + to_string(x.shape()) + " does not match the LSTM input divisor");
  ad::Var g = ad::gap_sum(x);
  net.record("gap", g);
  ad::Var h_seq = net.lstm(g, model.lstm);
  NetOutput out;
  out.steps = net.dense(h_seq, model.dense, &out.scale);
  out.scores = ad::mean_time(out.steps);
  if (out.scale != 1.0) out.scores = ad::scale(out.scores, out.scale);
  return out;
}

namespace ref {

RefOutput run(const ModelGraph& model, const Tensor5& codes, bool with_trace) {
  ad::Tape tape(false);
  RefOutput r;
  ForwardOptions opt;
  if (with_trace) opt.trace = &r.trace;
  const NetOutput out = forward(tape, model, codes, opt);
  r.steps = out.steps.value();
  r.scale = out.scale;
  r.scores = out.scores.value();
  r.predictions = argmax(r.scores);
  return r;
}

Tensor5 mor_forward(const Tensor5& x, const MORBlock& block, int stage, TgapMode mode, Trace* trace) {
  ad::Tape tape(false);
  ForwardOptions opt;
  opt.trace = trace;
  Net net(tape, StageTraits::of(stage), mode, opt);
  return net.mor(tape.constant(x), block).value();
}

namespace {
int stage_of(LstmMode mode) {
  switch (mode) {
    case LstmMode::kFloat: return 1;
    case LstmMode::kWeightQuantized: return 2;
    case LstmMode::kFullyQuantized: return 5;
  }
  return 1;
}
}  // namespace

LstmState lstm_cell(const Tensor5& x_t, const LstmState& prev, const LstmLayer& layer, LstmMode mode) {
  ad::Tape tape(false);
  ForwardOptions opt;
  Net net(tape, StageTraits::of(stage_of(mode)), TgapMode::kSampleMax, opt);
  const auto w = net.lstm_weights(layer);
  const auto s = net.lstm_step(tape.constant(x_t), tape.constant(prev.h), tape.constant(prev.c), layer, w);
  return LstmState{s.h.value(), s.c.value()};
}

Tensor5 dense_head(const Tensor5& h_seq, const DenseLayer& layer, bool ternary, double* scale) {
  ad::Tape tape(false);
  ForwardOptions opt;
  Net net(tape, StageTraits::of(ternary ? 2 : 1), TgapMode::kSampleMax, opt);
  double s = 1.0;
  Tensor5 z = net.dense(tape.constant(h_seq), layer, &s).value();
  if (scale) *scale = s;
  return z;
}

Tensor5 aggregate_logits(const Tensor5& steps) {
  ad::Tape tape(false);
  return ad::mean_time(tape.constant(steps)).value();
}

}  // namespace ref
}  // namespace billnet
