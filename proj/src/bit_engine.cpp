// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "billnet/bit_engine.hpp"

#include <sstream>

namespace billnet::logic {

std::string_view to_string(SlotType t) {
  switch (t) {
    case SlotType::kBit: return "bit";
    case SlotType::kTern: return "ternary";
    case SlotType::kInt: return "integer";
  }
  return "?";
}

std::string_view op_name(const Op& op) {
  return std::visit(
      [](const auto& o) -> std::string_view {
        using O = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<O, IntConvOp>) return "int-conv";
        if constexpr (std::is_same_v<O, PackedConvOp>) return "packed-conv";
        if constexpr (std::is_same_v<O, ThresholdOp>) return "threshold";
        if constexpr (std::is_same_v<O, OrOp>) return "or";
        if constexpr (std::is_same_v<O, PoolOp>) return "or-pool";
        if constexpr (std::is_same_v<O, TgapOp>) return "tgap";
        if constexpr (std::is_same_v<O, MuxOp>) return "mux";
        if constexpr (std::is_same_v<O, GapCountOp>) return "bitcount-gap";
        if constexpr (std::is_same_v<O, QlstmOp>) return "qlstm";
        if constexpr (std::is_same_v<O, DenseOp>) return "tern-dense";
        if constexpr (std::is_same_v<O, ArgmaxOp>) return "argmax";
      },
      op);
}

std::string GatePlan::describe() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < ops.size(); ++i) {
    os << i << ' ' << op_name(ops[i]);
    if (const auto* t = std::get_if<TgapOp>(&ops[i])) os << " count>" << t->threshold;
    os << '\n';
  }
  return os.str();
}

namespace {

class Compiler {
 public:
  explicit Compiler(GatePlan& plan) : plan_(plan) {}

  int slot(SlotType type, std::string label = {}) {
    SlotInfo info;
    info.type = type;
    if (!label.empty()) info.labels.push_back(std::move(label));
    plan_.slots.push_back(std::move(info));
    return static_cast<int>(plan_.slots.size() - 1);
  }
  void alias(int s, std::string label) { plan_.slots[static_cast<std::size_t>(s)].labels.push_back(std::move(label)); }
  SlotType type(int s) const { return plan_.slots[static_cast<std::size_t>(s)].type; }

  int conv(int in, const ConvLayer& l) {
    const int out = slot(SlotType::kInt, l.name);
    if (type(in) == SlotType::kBit) {
      PackedConvOp op;
      op.spec = l.spec;
      op.wpp = words_for(l.spec.in_channels);
      const int taps = l.spec.kernel[0] * l.spec.kernel[1] * l.spec.kernel[2];
      const int cig = l.spec.in_per_group();
      const int cog = l.spec.out_per_group();
      op.weight.assign(static_cast<std::size_t>(l.spec.out_channels) * taps * op.wpp, 0);
      op.group.assign(static_cast<std::size_t>(l.spec.groups) * op.wpp, 0);
      for (int grp = 0; grp < l.spec.groups; ++grp) {
        for (int ci = 0; ci < cig; ++ci) {
          const int ch = grp * cig + ci;
          op.group[static_cast<std::size_t>(grp * op.wpp + ch / kWordBits)] |= Word{1} << (ch % kWordBits);
        }
      }
      for (int co = 0; co < l.spec.out_channels; ++co) {
        const int grp = co / cog;
        for (int tap = 0; tap < taps; ++tap) {
          for (int ci = 0; ci < cig; ++ci) {
            const double w = l.weight[(std::int64_t{co} * taps + tap) * cig + ci];
            if (quant::sign_strict(w) < 0) continue;
            const int ch = grp * cig + ci;
            op.weight[(static_cast<std::size_t>(co) * taps + tap) * op.wpp + ch / kWordBits] |= Word{1} << (ch % kWordBits);
          }
        }
      }
      op.in = in;
      op.out = out;
      plan_.ops.emplace_back(std::move(op));
    } else {
      IntConvOp op;
      op.spec = l.spec;
      op.weight = BitTensor(l.spec.weight_shape());
      const int cig = l.spec.in_per_group();
      for (std::int64_t p = 0; p < op.weight.pixels(); ++p) {
        for (int ci = 0; ci < cig; ++ci) op.weight.set(p, ci, quant::sign_strict(l.weight[p * cig + ci]) > 0);
      }
      op.in = in;
      op.out = out;
      plan_.ops.emplace_back(std::move(op));
    }
    return out;
  }

  // Normalization (positive 2^k) is transparent to the threshold at 0.
  int threshold(int in, std::string label) {
    const int out = slot(SlotType::kBit, std::move(label));
    plan_.ops.emplace_back(ThresholdOp{in, out});
    return out;
  }

  int cf(int in, const CFBlock& b) { return conv(conv(conv(in, b.pw1), b.gconv), b.pw2); }

  int block(int x, const StemBlock& b) { return threshold(conv(x, b.conv), b.name + ".act"); }

  int block(int x, const PoolBlock& b) {
    const int out = slot(SlotType::kBit, b.name);
    plan_.ops.emplace_back(PoolOp{b.spec, x, out});
    return out;
  }

  int block(int x, const CFUnit& u) { return threshold(cf(x, u.cf), u.name + ".act"); }

  int block(int x, const MORBlock& b, const Shape& shape) {
    int skip = x;
    if (b.proj) {
      skip = threshold(conv(x, b.proj->conv), b.name + ".skip");
    } else {
      alias(skip, b.name + ".skip");
    }
    const int sel = slot(SlotType::kBit, b.name + ".select");
    plan_.ops.emplace_back(TgapOp{quant::tgap_threshold(shape.h * shape.w), skip, sel});
    const int a1 = threshold(cf(x, b.cf1), b.name + ".act1");
    const int i0 = slot(SlotType::kBit, b.name + ".or");
    plan_.ops.emplace_back(OrOp{a1, skip, i0});
    const int i1 = threshold(cf(i0, b.cf2), b.name + ".act2");
    const int out = slot(SlotType::kBit, b.name + ".out");
    plan_.ops.emplace_back(MuxOp{i0, i1, sel, out});
    return out;
  }

 private:
  GatePlan& plan_;
};

}  // namespace

QlstmWeights pack_lstm(const LstmLayer& layer) {
  QlstmWeights w;
  w.n_in = layer.n_in;
  w.n_hidden = layer.n_hidden;
  const int rows = 4 * layer.n_hidden;
  w.wx = BitTensor(Shape{1, 1, 1, rows, layer.n_in});
  w.wh = BitTensor(Shape{1, 1, 1, rows, layer.n_hidden});
  for (int j = 0; j < rows; ++j) {
    for (int i = 0; i < layer.n_in; ++i) w.wx.set(j, i, quant::sign_strict(layer.wx[std::int64_t{i} * rows + j]) > 0);
    for (int k = 0; k < layer.n_hidden; ++k) w.wh.set(j, k, quant::sign_strict(layer.wh[std::int64_t{k} * rows + j]) > 0);
  }
  return w;
}

GatePlan compile(const ModelGraph& model) {
  const StageTraits tr = model.traits();
  if (!(tr.binary_conv_weights && tr.heaviside_conv_act && tr.shift_norm && tr.binary_lstm_weights &&
        tr.ternary_dense_weights && tr.quantized_lstm_act)) {
    fail(ErrorKind::kNotFullyQuantized, "model is at stage " + std::to_string(model.stage) + "; the logic path needs stage 5");
  }
  GatePlan plan;
  plan.input = model.input_shape(1);
  Compiler c(plan);
  int x = c.slot(SlotType::kInt, "input");
  plan.input_slot = x;
  Shape shape = plan.input;
  for (const Block& block : model.blocks) {
    std::visit(
        [&](const auto& b) {
          using B = std::decay_t<decltype(b)>;
          if constexpr (std::is_same_v<B, MORBlock>) {
            x = c.block(x, b, shape);
            shape.c = b.out_channels();
          } else {
            x = c.block(x, b);
            if constexpr (std::is_same_v<B, StemBlock>) shape = ref::conv_output_shape(shape, b.conv.spec);
            if constexpr (std::is_same_v<B, PoolBlock>) shape = ref::pool_output_shape(shape, b.spec);
            if constexpr (std::is_same_v<B, CFUnit>) shape.c = b.cf.out_channels();
          }
        },
        block);
  }
  const int gap = c.slot(SlotType::kInt, "gap");
  plan.ops.emplace_back(GapCountOp{x, gap});

  QlstmOp q;
  q.weights = pack_lstm(model.lstm);
  q.spatial = model.lstm.input_divisor;
  require(q.spatial == shape.h * shape.w, ErrorKind::kShapeMismatch, "LSTM divisor does not match the GAP size");
  q.in = gap;
  q.ax = c.slot(SlotType::kInt, "lstm.ax");
  q.bh = c.slot(SlotType::kInt, "lstm.bh");
  q.i = c.slot(SlotType::kBit, "lstm.i");
  q.f = c.slot(SlotType::kBit, "lstm.f");
  q.o = c.slot(SlotType::kBit, "lstm.o");
  q.g = c.slot(SlotType::kTern, "lstm.g");
  q.c = c.slot(SlotType::kTern, "lstm.c");
  q.h = c.slot(SlotType::kTern, "lstm.h");
  const int h = q.h;
  plan.ops.emplace_back(std::move(q));

  DenseOp d;
  const int k = model.config.classes;
  const int hn = model.lstm.n_hidden;
  const double delta = quant::tern_threshold(model.dense.weight.data());
  d.weight = TernTensor(Shape{1, 1, 1, k, hn});
  for (int j = 0; j < k; ++j) {
    for (int i = 0; i < hn; ++i) d.weight.set(j, i, quant::ternarize(model.dense.weight[std::int64_t{i} * k + j], delta));
  }
  d.in = h;
  d.out = c.slot(SlotType::kInt, "dense.z");
  plan.logits_slot = d.out;
  plan.ops.emplace_back(std::move(d));
  plan.prediction_slot = c.slot(SlotType::kInt);
  plan.ops.emplace_back(ArgmaxOp{plan.logits_slot, plan.prediction_slot});
  return plan;
}

IntTensor to_codes(const Tensor5& x) {
  IntTensor out(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    if (!(v >= 0.0 && v <= 255.0 && v == static_cast<double>(static_cast<int>(v)))) {
      fail(ErrorKind::kInvariantViolation, "input codes must be integers in 0..255");
    }
    out[i] = static_cast<std::int32_t>(v);
  }
  return out;
}

TernTensor saturating_add(const TernTensor& a, const TernTensor& b) {
  require(a.shape() == b.shape(), ErrorKind::kShapeMismatch, "saturating_add shapes differ");
  BitTensor plus(a.shape());
  BitTensor minus(a.shape());
  const auto ap = a.plus().words();
  const auto am = a.minus().words();
  const auto bp = b.plus().words();
  const auto bm = b.minus().words();
  for (std::int64_t p = 0; p < plus.pixels(); ++p) {
    auto op = plus.pixel_mut(p);
    auto om = minus.pixel_mut(p);
    for (int w = 0; w < plus.words_per_pixel(); ++w) {
      const auto i = static_cast<std::size_t>(p * plus.words_per_pixel() + w);
      op[static_cast<std::size_t>(w)] = (ap[i] & ~bm[i]) | (bp[i] & ~am[i]);
      om[static_cast<std::size_t>(w)] = (am[i] & ~bp[i]) | (bm[i] & ~ap[i]);
    }
  }
  return TernTensor(std::move(plus), std::move(minus));
}

namespace {

// Plane-wise AND of a bit mask into a ternary tensor.
TernTensor mask(const BitTensor& m, const TernTensor& v) {
  BitTensor plus(v.shape());
  BitTensor minus(v.shape());
  const auto mw = m.words();
  const auto vp = v.plus().words();
  const auto vm = v.minus().words();
  for (std::int64_t p = 0; p < plus.pixels(); ++p) {
    auto op = plus.pixel_mut(p);
    auto om = minus.pixel_mut(p);
    for (int w = 0; w < plus.words_per_pixel(); ++w) {
      const auto i = static_cast<std::size_t>(p * plus.words_per_pixel() + w);
      op[static_cast<std::size_t>(w)] = mw[i] & vp[i];
      om[static_cast<std::size_t>(w)] = mw[i] & vm[i];
    }
  }
  return TernTensor(std::move(plus), std::move(minus));
}

}  // namespace

QlstmState qlstm_step(const IntTensor& x_counts, const QlstmState& state, const QlstmWeights& w, int spatial,
                      QlstmStepDetail* detail) {
  const int n = x_counts.shape().n;
  const int hn = w.n_hidden;
  const int rows = 4 * hn;
  require(x_counts.shape() == Shape{n, 1, 1, 1, w.n_in}, ErrorKind::kShapeMismatch,
          "qlstm_step expects counts (N,1,1,1," + std::to_string(w.n_in) + "), got " + to_string(x_counts.shape()));
  const Shape hs{n, 1, 1, 1, hn};
  require(state.h.shape() == hs && state.c.shape() == hs, ErrorKind::kShapeMismatch, "qlstm state shape mismatch");

  IntTensor ax(Shape{n, 1, 1, 1, rows});
  IntTensor bh(Shape{n, 1, 1, 1, rows});
  BitTensor gate[3] = {BitTensor(hs), BitTensor(hs), BitTensor(hs)};
  BitTensor g_plus(hs);
  for (int b = 0; b < n; ++b) {
    const auto hp = state.h.plus().pixel(b);
    const auto hm = state.h.minus().pixel(b);
    const std::int64_t pc_hp = popcount(hp);
    const std::int64_t pc_hm = popcount(hm);
    for (int j = 0; j < rows; ++j) {
      std::int64_t a = 0;
      for (int i = 0; i < w.n_in; ++i) {
        const std::int32_t v = x_counts.at(b, 0, 0, 0, i);
        a += w.wx.get(j, i) ? v : -v;
      }
      const auto wr = w.wh.pixel(j);
      const std::int64_t bsum = (2 * popcount_and(hp, wr) - pc_hp) - (2 * popcount_and(hm, wr) - pc_hm);
      ax.at(b, 0, 0, 0, j) = static_cast<std::int32_t>(a);
      bh.at(b, 0, 0, 0, j) = static_cast<std::int32_t>(bsum);
      const bool on = a + std::int64_t{spatial} * bsum > 0;
      const int k = j / hn;
      if (k < 3) {
        gate[k].set(b, j % hn, on);
      } else {
        g_plus.set(b, j % hn, on);
      }
    }
  }
  BitTensor g_minus(hs);
  {
    const auto src = g_plus.words();
    for (std::int64_t p = 0; p < g_minus.pixels(); ++p) {
      auto dst = g_minus.pixel_mut(p);
      for (int k = 0; k < g_minus.words_per_pixel(); ++k) dst[static_cast<std::size_t>(k)] = ~src[static_cast<std::size_t>(p * g_minus.words_per_pixel() + k)];
    }
    g_minus.clear_padding();
  }
  TernTensor g(g_plus, g_minus);
  QlstmState next;
  next.c = saturating_add(mask(gate[1], state.c), mask(gate[0], g));
  next.h = mask(gate[2], next.c);
  if (detail) {
    detail->ax = std::move(ax);
    detail->bh = std::move(bh);
    detail->i = gate[0];
    detail->f = gate[1];
    detail->o = gate[2];
    detail->g = std::move(g);
  }
  return next;
}

namespace {

template <typename T>
const T& in_slot(const std::vector<Slot>& slots, int id, const char* op) {
  const T* p = std::get_if<T>(&slots[static_cast<std::size_t>(id)]);
  if (!p) fail(ErrorKind::kSlotTypeMismatch, std::string(op) + ": slot " + std::to_string(id) + " has the wrong type");
  return *p;
}

struct Geom {
  Shape in, out;
  int kt, kh, kw, st, sh, sw, pt, ph, pw;
};

Geom geometry(const Shape& in, const ref::ConvSpec& spec) {
  Geom g;
  g.in = in;
  g.out = ref::conv_output_shape(in, spec);
  g.kt = spec.kernel[0];
  g.kh = spec.kernel[1];
  g.kw = spec.kernel[2];
  g.st = spec.stride[0];
  g.sh = spec.stride[1];
  g.sw = spec.stride[2];
  g.pt = (g.kt - 1) / 2;
  g.ph = (g.kh - 1) / 2;
  g.pw = (g.kw - 1) / 2;
  return g;
}

// f(out_pixel, in_pixel, tap) for every in-bounds tap.
template <typename F>
void for_each_tap(const Geom& g, F&& f) {
  for (int n = 0; n < g.out.n; ++n) {
    for (int ot = 0; ot < g.out.t; ++ot) {
      for (int oh = 0; oh < g.out.h; ++oh) {
        for (int ow = 0; ow < g.out.w; ++ow) {
          const std::int64_t op = ((std::int64_t{n} * g.out.t + ot) * g.out.h + oh) * g.out.w + ow;
          for (int kt = 0; kt < g.kt; ++kt) {
            const int it = ot * g.st - g.pt + kt;
            if (it < 0 || it >= g.in.t) continue;
            for (int kh = 0; kh < g.kh; ++kh) {
              const int ih = oh * g.sh - g.ph + kh;
              if (ih < 0 || ih >= g.in.h) continue;
              for (int kw = 0; kw < g.kw; ++kw) {
                const int iw = ow * g.sw - g.pw + kw;
                if (iw < 0 || iw >= g.in.w) continue;
                const std::int64_t ip = ((std::int64_t{n} * g.in.t + it) * g.in.h + ih) * g.in.w + iw;
                f(op, ip, (kt * g.kh + kh) * g.kw + kw);
              }
            }
          }
        }
      }
    }
  }
}

IntTensor run(const IntConvOp& op, const IntTensor& x) {
  require(x.shape().c == op.spec.in_channels, ErrorKind::kShapeMismatch, "int-conv channel mismatch");
  const Geom g = geometry(x.shape(), op.spec);
  IntTensor y(g.out);
  const int cig = op.spec.in_per_group();
  const int cog = op.spec.out_per_group();
  const int taps = g.kt * g.kh * g.kw;
  const int co_n = op.spec.out_channels;
  for_each_tap(g, [&](std::int64_t opx, std::int64_t ipx, int tap) {
    const std::int32_t* xs = x.data().data() + ipx * x.shape().c;
    std::int32_t* ys = y.data().data() + opx * co_n;
    for (int co = 0; co < co_n; ++co) {
      const std::int32_t* xg = xs + (co / cog) * cig;
      const auto wbits = op.weight.pixel(std::int64_t{co} * taps + tap);
      std::int32_t acc = 0;
      for (int ci = 0; ci < cig; ++ci) {
        const bool plus = (wbits[static_cast<std::size_t>(ci / kWordBits)] >> (ci % kWordBits)) & 1U;
        acc += plus ? xg[ci] : -xg[ci];
      }
      ys[co] += acc;
    }
  });
  return y;
}

IntTensor run(const PackedConvOp& op, const BitTensor& x) {
  require(x.shape().c == op.spec.in_channels, ErrorKind::kShapeMismatch, "packed-conv channel mismatch");
  const Geom g = geometry(x.shape(), op.spec);
  IntTensor y(g.out);
  const int cog = op.spec.out_per_group();
  const int taps = g.kt * g.kh * g.kw;
  const int co_n = op.spec.out_channels;
  const auto wpp = static_cast<std::size_t>(op.wpp);
  for_each_tap(g, [&](std::int64_t opx, std::int64_t ipx, int tap) {
    const auto xs = x.pixel(ipx);
    std::int32_t* ys = y.data().data() + opx * co_n;
    for (int co = 0; co < co_n; ++co) {
      const std::span<const Word> w(op.weight.data() + (static_cast<std::size_t>(co) * taps + tap) * wpp, wpp);
      const std::span<const Word> m(op.group.data() + static_cast<std::size_t>(co / cog) * wpp, wpp);
      ys[co] += static_cast<std::int32_t>(2 * popcount_and(xs, w) - popcount_and(xs, m));
    }
  });
  return y;
}

BitTensor run(const ThresholdOp&, const IntTensor& x) {
  BitTensor y(x.shape());
  const int c = x.shape().c;
  for (std::int64_t p = 0; p < x.shape().pixels(); ++p) {
    const std::int32_t* v = x.data().data() + p * c;
    auto out = y.pixel_mut(p);
    for (int k = 0; k < c; ++k) {
      if (v[k] > 0) out[static_cast<std::size_t>(k / kWordBits)] |= Word{1} << (k % kWordBits);
    }
  }
  return y;
}

BitTensor run(const OrOp&, const BitTensor& a, const BitTensor& b) {
  require(a.shape() == b.shape(), ErrorKind::kShapeMismatch, "or: shapes differ");
  BitTensor y(a.shape());
  for (std::int64_t p = 0; p < a.pixels(); ++p) {
    const auto x0 = a.pixel(p);
    const auto x1 = b.pixel(p);
    auto out = y.pixel_mut(p);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = x0[k] | x1[k];
  }
  return y;
}

BitTensor run(const PoolOp& op, const BitTensor& x) {
  const Shape& in = x.shape();
  const Shape out = ref::pool_output_shape(in, op.spec);
  BitTensor y(out);
  for (int n = 0; n < out.n; ++n) {
    for (int ot = 0; ot < out.t; ++ot) {
      for (int oh = 0; oh < out.h; ++oh) {
        for (int ow = 0; ow < out.w; ++ow) {
          auto dst = y.pixel_mut(((std::int64_t{n} * out.t + ot) * out.h + oh) * out.w + ow);
          for (int kt = 0; kt < op.spec.window[0]; ++kt) {
            for (int kh = 0; kh < op.spec.window[1]; ++kh) {
              for (int kw = 0; kw < op.spec.window[2]; ++kw) {
                const int it = ot * op.spec.stride[0] + kt;
                const int ih = oh * op.spec.stride[1] + kh;
                const int iw = ow * op.spec.stride[2] + kw;
                const auto src = x.pixel(((std::int64_t{n} * in.t + it) * in.h + ih) * in.w + iw);
                for (std::size_t k = 0; k < dst.size(); ++k) dst[k] |= src[k];
              }
            }
          }
        }
      }
    }
  }
  return y;
}

BitTensor run(const TgapOp& op, const BitTensor& x) {
  const Shape& s = x.shape();
  const int hw = s.h * s.w;
  BitTensor y(Shape{s.n, s.t, 1, 1, s.c});
  std::vector<int> counts(static_cast<std::size_t>(s.c));
  for (std::int64_t nt = 0; nt < std::int64_t{s.n} * s.t; ++nt) {
    std::fill(counts.begin(), counts.end(), 0);
    for (int p = 0; p < hw; ++p) {
      const auto words = x.pixel(nt * hw + p);
      for (std::size_t wi = 0; wi < words.size(); ++wi) {
        Word v = words[wi];
        while (v != 0) {
          ++counts[wi * kWordBits + static_cast<std::size_t>(std::countr_zero(v))];
          v &= v - 1;
        }
      }
    }
    for (int c = 0; c < s.c; ++c) {
      if (counts[static_cast<std::size_t>(c)] > op.threshold) y.set(nt, c, true);
    }
  }
  return y;
}

BitTensor run(const MuxOp&, const BitTensor& i0, const BitTensor& i1, const BitTensor& sel) {
  const Shape& s = i0.shape();
  require(i1.shape() == s, ErrorKind::kShapeMismatch, "mux: inputs differ");
  require(sel.shape() == Shape{s.n, s.t, 1, 1, s.c}, ErrorKind::kShapeMismatch, "mux: select shape");
  BitTensor y(s);
  const std::int64_t hw = std::int64_t{s.h} * s.w;
  for (std::int64_t p = 0; p < i0.pixels(); ++p) {
    const auto sw = sel.pixel(p / hw);
    const auto a = i0.pixel(p);
    const auto b = i1.pixel(p);
    auto out = y.pixel_mut(p);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = (b[k] & sw[k]) | (a[k] & ~sw[k]);
  }
  return y;
}

IntTensor run(const GapCountOp&, const BitTensor& x) {
  const Shape& s = x.shape();
  const int hw = s.h * s.w;
  IntTensor y(Shape{s.n, s.t, 1, 1, s.c});
  for (std::int64_t nt = 0; nt < std::int64_t{s.n} * s.t; ++nt) {
    std::int32_t* out = y.data().data() + nt * s.c;
    for (int p = 0; p < hw; ++p) {
      const auto words = x.pixel(nt * hw + p);
      for (std::size_t wi = 0; wi < words.size(); ++wi) {
        Word v = words[wi];
        while (v != 0) {
          ++out[wi * kWordBits + static_cast<std::size_t>(std::countr_zero(v))];
          v &= v - 1;
        }
      }
    }
  }
  return y;
}

// Writes a single-step tensor into time index t of a stacked one.
template <typename Stacked, typename Step>
void put_step(Stacked& dst, const Step& src, int t);

template <>
void put_step(IntTensor& dst, const IntTensor& src, int t) {
  const int c = src.shape().c;
  for (int n = 0; n < src.shape().n; ++n) std::copy(&src.at(n, 0, 0, 0, 0), &src.at(n, 0, 0, 0, 0) + c, &dst.at(n, t, 0, 0, 0));
}
template <>
void put_step(BitTensor& dst, const BitTensor& src, int t) {
  const int steps = dst.shape().t;
  for (int n = 0; n < src.shape().n; ++n) {
    const auto s = src.pixel(n);
    auto d = dst.pixel_mut(std::int64_t{n} * steps + t);
    std::copy(s.begin(), s.end(), d.begin());
  }
}

struct TernStack {
  BitTensor plus, minus;
  explicit TernStack(Shape s) : plus(s), minus(s) {}
  void put(const TernTensor& v, int t) {
    put_step(plus, v.plus(), t);
    put_step(minus, v.minus(), t);
  }
  TernTensor finish() { return TernTensor(std::move(plus), std::move(minus)); }
};

void run_qlstm(const QlstmOp& op, std::vector<Slot>& slots) {
  const IntTensor& x = in_slot<IntTensor>(slots, op.in, "qlstm");
  const Shape& s = x.shape();
  const int hn = op.weights.n_hidden;
  const Shape hs{s.n, 1, 1, 1, hn};
  const Shape seq{s.n, s.t, 1, 1, hn};
  const Shape seq4{s.n, s.t, 1, 1, 4 * hn};
  IntTensor ax(seq4), bh(seq4);
  BitTensor gi(seq), gf(seq), go(seq);
  TernStack gg(seq), cc(seq), hh(seq);
  QlstmState state{TernTensor(hs), TernTensor(hs)};
  for (int t = 0; t < s.t; ++t) {
    IntTensor xt(Shape{s.n, 1, 1, 1, s.c});
    for (int n = 0; n < s.n; ++n) std::copy(&x.at(n, t, 0, 0, 0), &x.at(n, t, 0, 0, 0) + s.c, &xt.at(n, 0, 0, 0, 0));
    QlstmStepDetail d;
    state = qlstm_step(xt, state, op.weights, op.spatial, &d);
    put_step(ax, d.ax, t);
    put_step(bh, d.bh, t);
    put_step(gi, d.i, t);
    put_step(gf, d.f, t);
    put_step(go, d.o, t);
    gg.put(d.g, t);
    cc.put(state.c, t);
    hh.put(state.h, t);
  }
  slots[static_cast<std::size_t>(op.ax)] = std::move(ax);
  slots[static_cast<std::size_t>(op.bh)] = std::move(bh);
  slots[static_cast<std::size_t>(op.i)] = std::move(gi);
  slots[static_cast<std::size_t>(op.f)] = std::move(gf);
  slots[static_cast<std::size_t>(op.o)] = std::move(go);
  slots[static_cast<std::size_t>(op.g)] = gg.finish();
  slots[static_cast<std::size_t>(op.c)] = cc.finish();
  slots[static_cast<std::size_t>(op.h)] = hh.finish();
}

IntTensor run(const DenseOp& op, const TernTensor& h) {
  const Shape& s = h.shape();
  const int k = op.weight.shape().w;
  require(op.weight.shape().c == s.c, ErrorKind::kShapeMismatch, "dense: width mismatch");
  IntTensor z(Shape{s.n, s.t, s.h, s.w, k});
  for (std::int64_t p = 0; p < s.pixels(); ++p) {
    const auto hp = h.plus().pixel(p);
    const auto hm = h.minus().pixel(p);
    for (int j = 0; j < k; ++j) {
      const auto wp = op.weight.plus().pixel(j);
      const auto wm = op.weight.minus().pixel(j);
      const std::int64_t v =
          popcount_and(hp, wp) + popcount_and(hm, wm) - popcount_and(hp, wm) - popcount_and(hm, wp);
      z[p * k + j] = static_cast<std::int32_t>(v);
    }
  }
  return z;
}

IntTensor run(const ArgmaxOp&, const IntTensor& z) {
  const Shape& s = z.shape();
  IntTensor out(Shape{s.n, 1, 1, 1, 1});
  std::vector<std::int64_t> sum(static_cast<std::size_t>(s.c));
  for (int n = 0; n < s.n; ++n) {
    std::fill(sum.begin(), sum.end(), 0);
    for (int t = 0; t < s.t; ++t) {
      for (int c = 0; c < s.c; ++c) sum[static_cast<std::size_t>(c)] += z.at(n, t, 0, 0, c);
    }
    int best = 0;
    for (int c = 1; c < s.c; ++c) {
      if (sum[static_cast<std::size_t>(c)] > sum[static_cast<std::size_t>(best)]) best = c;
    }
    out[n] = best;
  }
  return out;
}

}  // namespace

Execution execute(const GatePlan& plan, const IntTensor& codes) {
  Shape expect = plan.input;
  expect.n = codes.shape().n;
  require(codes.shape() == expect, ErrorKind::kShapeMismatch,
          "input " + to_string(codes.shape()) + " does not match plan input " + to_string(expect));
  Execution ex;
  ex.slots.resize(plan.slots.size());
  ex.slots[static_cast<std::size_t>(plan.input_slot)] = codes;
  auto& s = ex.slots;
  auto put = [&](int id, auto&& v) { s[static_cast<std::size_t>(id)] = std::forward<decltype(v)>(v); };
  for (const Op& op : plan.ops) {
    std::visit(
        [&](const auto& o) {
          using O = std::decay_t<decltype(o)>;
          if constexpr (std::is_same_v<O, IntConvOp>) {
            put(o.out, run(o, in_slot<IntTensor>(s, o.in, "int-conv")));
          } else if constexpr (std::is_same_v<O, PackedConvOp>) {
            put(o.out, run(o, in_slot<BitTensor>(s, o.in, "packed-conv")));
          } else if constexpr (std::is_same_v<O, ThresholdOp>) {
            put(o.out, run(o, in_slot<IntTensor>(s, o.in, "threshold")));
          } else if constexpr (std::is_same_v<O, OrOp>) {
            put(o.out, run(o, in_slot<BitTensor>(s, o.a, "or"), in_slot<BitTensor>(s, o.b, "or")));
          } else if constexpr (std::is_same_v<O, PoolOp>) {
            put(o.out, run(o, in_slot<BitTensor>(s, o.in, "or-pool")));
          } else if constexpr (std::is_same_v<O, TgapOp>) {
            put(o.out, run(o, in_slot<BitTensor>(s, o.in, "tgap")));
          } else if constexpr (std::is_same_v<O, MuxOp>) {
            put(o.out, run(o, in_slot<BitTensor>(s, o.i0, "mux"), in_slot<BitTensor>(s, o.i1, "mux"),
                           in_slot<BitTensor>(s, o.select, "mux")));
          } else if constexpr (std::is_same_v<O, GapCountOp>) {
            put(o.out, run(o, in_slot<BitTensor>(s, o.in, "bitcount-gap")));
          } else if constexpr (std::is_same_v<O, QlstmOp>) {
            run_qlstm(o, s);
          } else if constexpr (std::is_same_v<O, DenseOp>) {
            put(o.out, run(o, in_slot<TernTensor>(s, o.in, "tern-dense")));
          } else if constexpr (std::is_same_v<O, ArgmaxOp>) {
            put(o.out, run(o, in_slot<IntTensor>(s, o.in, "argmax")));
          }
        },
        op);
  }
  ex.logits = in_slot<IntTensor>(s, plan.logits_slot, "result");
  const IntTensor& pred = in_slot<IntTensor>(s, plan.prediction_slot, "result");
  ex.predictions.assign(pred.vec().begin(), pred.vec().end());
  return ex;
}

Tensor5 to_real(const Slot& slot) {
  return std::visit(
      [](const auto& v) -> Tensor5 {
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, IntTensor>) {
          Tensor5 out(v.shape());
          for (std::int64_t i = 0; i < v.size(); ++i) out[i] = v[i];
          return out;
        } else {
          return unpack(v);
        }
      },
      slot);
}

Trace to_trace(const GatePlan& plan, const Execution& exec) {
  Trace out;
  for (std::size_t i = 0; i < plan.slots.size(); ++i) {
    if (static_cast<int>(i) == plan.input_slot) continue;
    const auto& labels = plan.slots[i].labels;
    if (labels.empty()) continue;
    const Tensor5 v = to_real(exec.slots[i]);
    for (const auto& l : labels) out.emplace_back(l, v);
  }
  return out;
}

std::string Divergence::describe() const {
  std::ostringstream os;
  os << "first divergence at '" << label << "'";
  if (index < 0) {
    os << " (missing or shape mismatch)";
  } else {
    os << " t=" << t << " element=" << index << " channel=" << channel << " reference=" << reference
       << " logic=" << logic;
  }
  return os.str();
}

std::optional<Divergence> first_divergence(const Trace& reference, const Trace& logic) {
  for (const auto& [label, lv] : logic) {
    const Tensor5* rv = find(reference, label);
    if (!rv || !(rv->shape() == lv.shape())) return Divergence{label, 0, -1, 0, 0.0, 0.0};
    for (std::int64_t i = 0; i < lv.size(); ++i) {
      if ((*rv)[i] != lv[i]) {
        const Shape& s = lv.shape();
        const int t = static_cast<int>((i / (std::int64_t{s.h} * s.w * s.c)) % s.t);
        return Divergence{label, t, i, static_cast<int>(i % s.c), (*rv)[i], lv[i]};
      }
    }
  }
  for (const auto& [label, rv] : reference) {
    if (!find(logic, label)) return Divergence{label, 0, -1, 0, 0.0, 0.0};
  }
  return std::nullopt;
}

}  // namespace billnet::logic
