// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "billnet/autodiff.hpp"

#include <cmath>

#include "billnet/quantize.hpp"

namespace billnet::ad {

const Tensor5& Var::value() const { return tape->value(*this); }

Var Tape::constant(Tensor5 value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::param(Tensor5 value, std::span<double> grad_sink, std::string name) {
  require(static_cast<std::int64_t>(grad_sink.size()) == value.size(), ErrorKind::kShapeMismatch,
          "gradient sink for '" + name + "' has the wrong length");
  Node n;
  n.value = std::move(value);
  n.requires_grad = record_;
  n.sink = grad_sink;
  n.name = std::move(name);
  n.is_param = record_;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::push(Tensor5 value, std::span<const Var> parents, Backward fn) {
  Node n;
  n.value = std::move(value);
  if (record_) {
    for (const Var& p : parents) {
      if (nodes_[static_cast<std::size_t>(p.id)].requires_grad) n.requires_grad = true;
    }
    if (n.requires_grad) n.fn = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

void Tape::accumulate(Var v, const Tensor5& g) {
  Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (!n.requires_grad) return;
  require(g.shape() == n.value.shape(), ErrorKind::kShapeMismatch, "gradient shape differs from value shape");
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
    return;
  }
  auto dst = n.grad.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::accumulate(Var v, Tensor5&& g) {
  Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (!n.requires_grad) return;
  if (!n.has_grad) {
    require(g.shape() == n.value.shape(), ErrorKind::kShapeMismatch, "gradient shape differs from value shape");
    n.grad = std::move(g);
    n.has_grad = true;
    return;
  }
  accumulate(v, static_cast<const Tensor5&>(g));
}

void Tape::backward(Var loss) {
  require(record_, ErrorKind::kInvariantViolation, "backward on a non-recording tape");
  Node& root = nodes_[static_cast<std::size_t>(loss.id)];
  require(root.value.size() == 1, ErrorKind::kShapeMismatch, "loss must be a scalar");
  accumulate(loss, Tensor5(root.value.shape(), 1.0));
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad) continue;
    if (n.fn) {
      n.fn(*this, n.grad);
      n.grad = Tensor5();
    } else if (n.is_param) {
      auto src = n.grad.data();
      for (std::size_t k = 0; k < src.size(); ++k) n.sink[k] += src[k];
    }
  }
  for (const Node& n : nodes_) {
    if (n.is_param && !n.has_grad) fail(ErrorKind::kDisconnectedGraph, "parameter '" + n.name + "' is unreachable from the loss");
  }
}

namespace {

template <typename F>
Tensor5 map(const Tensor5& x, F f) {
  Tensor5 y(x.shape());
  auto xs = x.data();
  auto ys = y.data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = f(xs[i]);
  return y;
}

// Backward for y = f(x) with dy/dx given element-wise by d(x, y).
template <typename D>
Tape::Backward unary_grad(Var x, D d) {
  return [x, d](Tape& tape, const Tensor5& gy) {
    const Tensor5& xv = tape.value(x);
    Tensor5 gx(xv.shape());
    auto xs = xv.data();
    auto gs = gy.data();
    auto out = gx.data();
    for (std::size_t i = 0; i < xs.size(); ++i) out[i] = gs[i] * d(xs[i]);
    tape.accumulate(x, std::move(gx));
  };
}

void check_same(const Var& a, const Var& b, const char* op) {
  if (!(a.shape() == b.shape())) {
    fail(ErrorKind::kShapeMismatch, std::string(op) + ": " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

void check_channel_vector(const Var& x, const Var& v, const char* op) {
  if (!(v.shape() == Shape{1, 1, 1, 1, x.shape().c})) {
    fail(ErrorKind::kShapeMismatch, std::string(op) + ": per-channel vector has shape " + to_string(v.shape()));
  }
}

// Sum of gy over all pixels, per channel.
Tensor5 channel_sum(const Tensor5& gy) {
  const int c = gy.shape().c;
  Tensor5 out(Shape{1, 1, 1, 1, c});
  for (std::int64_t p = 0; p < gy.shape().pixels(); ++p) {
    const double* g = gy.data().data() + p * c;
    for (int k = 0; k < c; ++k) out[k] += g[k];
  }
  return out;
}

}  // namespace

Var conv3d(Var x, Var w, const ref::ConvSpec& spec) {
  Tape& tape = *x.tape;
  Tensor5 y = ref::conv3d(x.value(), w.value(), spec);
  return tape.push(std::move(y), {x, w}, [x, w, spec](Tape& t, const Tensor5& gy) {
    if (t.requires_grad(x)) t.accumulate(x, ref::conv3d_backward_input(gy, t.value(w), spec, t.value(x).shape()));
    if (t.requires_grad(w)) t.accumulate(w, ref::conv3d_backward_weight(t.value(x), gy, spec));
  });
}

Var linear(Var x, Var w) {
  Tape& tape = *x.tape;
  Tensor5 y = ref::linear(x.value(), w.value());
  return tape.push(std::move(y), {x, w}, [x, w](Tape& t, const Tensor5& gy) {
    if (t.requires_grad(x)) t.accumulate(x, ref::linear_backward_input(gy, t.value(w)));
    if (t.requires_grad(w)) t.accumulate(w, ref::linear_backward_weight(t.value(x), gy));
  });
}

Var add(Var a, Var b) {
  check_same(a, b, "add");
  Tensor5 y = a.value();
  auto ys = y.data();
  auto bs = b.value().data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] += bs[i];
  return a.tape->push(std::move(y), {a, b}, [a, b](Tape& t, const Tensor5& gy) {
    t.accumulate(a, gy);
    t.accumulate(b, gy);
  });
}

Var add_bias(Var x, Var b) {
  check_channel_vector(x, b, "add_bias");
  Tensor5 y = x.value();
  const int c = y.shape().c;
  const double* bp = b.value().data().data();
  for (std::int64_t p = 0; p < y.shape().pixels(); ++p) {
    double* yp = y.data().data() + p * c;
    for (int k = 0; k < c; ++k) yp[k] += bp[k];
  }
  return x.tape->push(std::move(y), {x, b}, [x, b](Tape& t, const Tensor5& gy) {
    t.accumulate(x, gy);
    if (t.requires_grad(b)) t.accumulate(b, channel_sum(gy));
  });
}

Var mul(Var a, Var b) {
  check_same(a, b, "mul");
  Tensor5 y = a.value();
  auto ys = y.data();
  auto bs = b.value().data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] *= bs[i];
  return a.tape->push(std::move(y), {a, b}, [a, b](Tape& t, const Tensor5& gy) {
    if (t.requires_grad(a)) {
      Tensor5 ga = gy;
      auto s = t.value(b).data();
      auto g = ga.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= s[i];
      t.accumulate(a, std::move(ga));
    }
    if (t.requires_grad(b)) {
      Tensor5 gb = gy;
      auto s = t.value(a).data();
      auto g = gb.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= s[i];
      t.accumulate(b, std::move(gb));
    }
  });
}

Var scale(Var x, double s) {
  Tensor5 y = map(x.value(), [s](double v) { return s * v; });
  return x.tape->push(std::move(y), {x}, unary_grad(x, [s](double) { return s; }));
}

Var divide(Var x, double d) {
  require(d != 0.0, ErrorKind::kInvariantViolation, "division by zero");
  Tensor5 y = map(x.value(), [d](double v) { return v / d; });
  return x.tape->push(std::move(y), {x}, unary_grad(x, [d](double) { return 1.0 / d; }));
}

Var channel_scale(Var x, const std::vector<double>& s) {
  const int c = x.shape().c;
  require(static_cast<int>(s.size()) == c, ErrorKind::kShapeMismatch, "channel_scale: wrong vector length");
  auto apply = [c, s](const Tensor5& in) {
    Tensor5 out = in;
    for (std::int64_t p = 0; p < out.shape().pixels(); ++p) {
      double* v = out.data().data() + p * c;
      for (int k = 0; k < c; ++k) v[k] *= s[static_cast<std::size_t>(k)];
    }
    return out;
  };
  return x.tape->push(apply(x.value()), {x}, [x, apply](Tape& t, const Tensor5& gy) { t.accumulate(x, apply(gy)); });
}

Var relu(Var x) {
  Tensor5 y = map(x.value(), [](double v) { return v > 0.0 ? v : 0.0; });
  return x.tape->push(std::move(y), {x}, unary_grad(x, [](double v) { return v > 0.0 ? 1.0 : 0.0; }));
}

Var sigmoid(Var x) {
  Tensor5 y = map(x.value(), [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  return x.tape->push(std::move(y), {x}, unary_grad(x, [](double v) {
                        const double s = 1.0 / (1.0 + std::exp(-v));
                        return s * (1.0 - s);
                      }));
}

Var tanh(Var x) {
  Tensor5 y = map(x.value(), [](double v) { return std::tanh(v); });
  return x.tape->push(std::move(y), {x}, unary_grad(x, [](double v) {
                        const double th = std::tanh(v);
                        return 1.0 - th * th;
                      }));
}

Var heaviside(Var x) {
  Tensor5 y = map(x.value(), [](double v) { return static_cast<double>(quant::heaviside(v)); });
  return x.tape->push(std::move(y), {x}, unary_grad(x, quant::heaviside_ste_grad));
}

Var sign(Var x) {
  Tensor5 y = map(x.value(), [](double v) { return static_cast<double>(quant::sign_strict(v)); });
  return x.tape->push(std::move(y), {x}, unary_grad(x, quant::sign_ste_grad));
}

Var ternarize(Var w) {
  const double delta = quant::tern_threshold(w.value().data());
  Tensor5 y = map(w.value(), [delta](double v) { return static_cast<double>(quant::ternarize(v, delta)); });
  return w.tape->push(std::move(y), {w}, unary_grad(w, [](double v) { return std::abs(v) <= 1.0 ? 1.0 : 0.0; }));
}

Var clip(Var x) {
  Tensor5 y = map(x.value(), quant::clip);
  return x.tape->push(std::move(y), {x}, [x](Tape& t, const Tensor5& gy) { t.accumulate(x, gy); });
}

Var batch_norm_train(Var x, Var gamma, Var beta, double eps, BatchStats* stats) {
  check_channel_vector(x, gamma, "batch_norm");
  check_channel_vector(x, beta, "batch_norm");
  const Tensor5& xv = x.value();
  const int c = xv.shape().c;
  const std::int64_t m = xv.shape().pixels();
  std::vector<double> mean(static_cast<std::size_t>(c), 0.0);
  std::vector<double> var(static_cast<std::size_t>(c), 0.0);
  for (std::int64_t p = 0; p < m; ++p) {
    const double* v = xv.data().data() + p * c;
    for (int k = 0; k < c; ++k) mean[static_cast<std::size_t>(k)] += v[k];
  }
  for (auto& v : mean) v /= static_cast<double>(m);
  for (std::int64_t p = 0; p < m; ++p) {
    const double* v = xv.data().data() + p * c;
    for (int k = 0; k < c; ++k) {
      const double d = v[k] - mean[static_cast<std::size_t>(k)];
      var[static_cast<std::size_t>(k)] += d * d;
    }
  }
  for (auto& v : var) v /= static_cast<double>(m);
  std::vector<double> inv(static_cast<std::size_t>(c));
  for (int k = 0; k < c; ++k) inv[static_cast<std::size_t>(k)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(k)] + eps);

  Tensor5 xhat(xv.shape());
  Tensor5 y(xv.shape());
  const double* g = gamma.value().data().data();
  const double* b = beta.value().data().data();
  for (std::int64_t p = 0; p < m; ++p) {
    const double* v = xv.data().data() + p * c;
    double* h = xhat.data().data() + p * c;
    double* o = y.data().data() + p * c;
    for (int k = 0; k < c; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      h[k] = (v[k] - mean[ku]) * inv[ku];
      o[k] = g[k] * h[k] + b[k];
    }
  }
  if (stats) *stats = BatchStats{mean, var};
  return x.tape->push(std::move(y), {x, gamma, beta},
                      [x, gamma, beta, xhat = std::move(xhat), inv, c, m](Tape& t, const Tensor5& gy) {
                        std::vector<double> sum_g(static_cast<std::size_t>(c), 0.0);
                        std::vector<double> sum_gx(static_cast<std::size_t>(c), 0.0);
                        for (std::int64_t p = 0; p < m; ++p) {
                          const double* gp = gy.data().data() + p * c;
                          const double* h = xhat.data().data() + p * c;
                          for (int k = 0; k < c; ++k) {
                            sum_g[static_cast<std::size_t>(k)] += gp[k];
                            sum_gx[static_cast<std::size_t>(k)] += gp[k] * h[k];
                          }
                        }
                        if (t.requires_grad(gamma)) t.accumulate(gamma, Tensor5(Shape{1, 1, 1, 1, c}, sum_gx));
                        if (t.requires_grad(beta)) t.accumulate(beta, Tensor5(Shape{1, 1, 1, 1, c}, sum_g));
                        if (!t.requires_grad(x)) return;
                        const double* g = t.value(gamma).data().data();
                        Tensor5 gx(gy.shape());
                        const double md = static_cast<double>(m);
                        for (std::int64_t p = 0; p < m; ++p) {
                          const double* gp = gy.data().data() + p * c;
                          const double* h = xhat.data().data() + p * c;
                          double* o = gx.data().data() + p * c;
                          for (int k = 0; k < c; ++k) {
                            const auto ku = static_cast<std::size_t>(k);
                            o[k] = g[k] * inv[ku] / md * (md * gp[k] - sum_g[ku] - h[k] * sum_gx[ku]);
                          }
                        }
                        t.accumulate(x, std::move(gx));
                      });
}

Var batch_norm_eval(Var x, Var gamma, Var beta, const std::vector<double>& mean, const std::vector<double>& var,
                    double eps) {
  check_channel_vector(x, gamma, "batch_norm");
  check_channel_vector(x, beta, "batch_norm");
  const Tensor5& xv = x.value();
  const int c = xv.shape().c;
  std::vector<double> inv(static_cast<std::size_t>(c));
  for (int k = 0; k < c; ++k) inv[static_cast<std::size_t>(k)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(k)] + eps);
  Tensor5 y(xv.shape());
  const double* g = gamma.value().data().data();
  const double* b = beta.value().data().data();
  for (std::int64_t p = 0; p < xv.shape().pixels(); ++p) {
    const double* v = xv.data().data() + p * c;
    double* o = y.data().data() + p * c;
    for (int k = 0; k < c; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      o[k] = g[k] * (v[k] - mean[ku]) * inv[ku] + b[k];
    }
  }
  return x.tape->push(std::move(y), {x, gamma, beta}, [x, gamma, beta, mean, inv, c](Tape& t, const Tensor5& gy) {
    const Tensor5& xv = t.value(x);
    const double* g = t.value(gamma).data().data();
    Tensor5 gx(gy.shape());
    Tensor5 gg(Shape{1, 1, 1, 1, c});
    Tensor5 gb(Shape{1, 1, 1, 1, c});
    for (std::int64_t p = 0; p < gy.shape().pixels(); ++p) {
      const double* gp = gy.data().data() + p * c;
      const double* v = xv.data().data() + p * c;
      double* o = gx.data().data() + p * c;
      for (int k = 0; k < c; ++k) {
        const auto ku = static_cast<std::size_t>(k);
        o[k] = gp[k] * g[k] * inv[ku];
        gg[k] += gp[k] * (v[k] - mean[ku]) * inv[ku];
        gb[k] += gp[k];
      }
    }
    t.accumulate(x, std::move(gx));
    t.accumulate(gamma, std::move(gg));
    t.accumulate(beta, std::move(gb));
  });
}

Var maxpool(Var x, const ref::PoolSpec& spec) {
  std::vector<std::int64_t> argmax;
  Tensor5 y = ref::maxpool3d(x.value(), spec, &argmax);
  return x.tape->push(std::move(y), {x}, [x, argmax = std::move(argmax)](Tape& t, const Tensor5& gy) {
    Tensor5 gx(t.value(x).shape());
    for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += gy[static_cast<std::int64_t>(o)];
    t.accumulate(x, std::move(gx));
  });
}

Var gap_sum(Var x) {
  Tensor5 y = ref::gap_sum(x.value());
  return x.tape->push(std::move(y), {x}, [x](Tape& t, const Tensor5& gy) {
    const Shape& s = t.value(x).shape();
    Tensor5 gx(s);
    for (int n = 0; n < s.n; ++n) {
      for (int ti = 0; ti < s.t; ++ti) {
        const double* g = &gy.at(n, ti, 0, 0, 0);
        for (int h = 0; h < s.h; ++h) {
          for (int w = 0; w < s.w; ++w) {
            double* o = &gx.at(n, ti, h, w, 0);
            for (int c = 0; c < s.c; ++c) o[c] = g[c];
          }
        }
      }
    }
    t.accumulate(x, std::move(gx));
  });
}

Var mux(Var i0, Var i1, const Tensor5& s) {
  Tensor5 y = ref::mux(i0.value(), i1.value(), s);
  return i0.tape->push(std::move(y), {i0, i1}, [i0, i1, s](Tape& t, const Tensor5& gy) {
    const Shape& sh = gy.shape();
    Tensor5 g0(sh);
    Tensor5 g1(sh);
    for (int n = 0; n < sh.n; ++n) {
      for (int ti = 0; ti < sh.t; ++ti) {
        const double* sp = &s.at(n, ti, 0, 0, 0);
        for (int h = 0; h < sh.h; ++h) {
          for (int w = 0; w < sh.w; ++w) {
            const std::int64_t off = sh.index(n, ti, h, w, 0);
            for (int c = 0; c < sh.c; ++c) {
              g1[off + c] = gy[off + c] * sp[c];
              g0[off + c] = gy[off + c] * (1.0 - sp[c]);
            }
          }
        }
      }
    }
    t.accumulate(i0, std::move(g0));
    t.accumulate(i1, std::move(g1));
  });
}

Var slice_time(Var x, int t_index) {
  const Shape& s = x.shape();
  require(t_index >= 0 && t_index < s.t, ErrorKind::kShapeMismatch, "slice_time index out of range");
  const Shape os{s.n, 1, s.h, s.w, s.c};
  const std::int64_t frame = std::int64_t{s.h} * s.w * s.c;
  Tensor5 y(os);
  for (int n = 0; n < s.n; ++n) {
    const double* src = &x.value().at(n, t_index, 0, 0, 0);
    std::copy(src, src + frame, &y.at(n, 0, 0, 0, 0));
  }
  return x.tape->push(std::move(y), {x}, [x, t_index, frame](Tape& t, const Tensor5& gy) {
    const Shape& s = t.value(x).shape();
    Tensor5 gx(s);
    for (int n = 0; n < s.n; ++n) {
      const double* src = &gy.at(n, 0, 0, 0, 0);
      std::copy(src, src + frame, &gx.at(n, t_index, 0, 0, 0));
    }
    t.accumulate(x, std::move(gx));
  });
}

Var slice_channels(Var x, int begin, int count) {
  const Shape& s = x.shape();
  require(begin >= 0 && count >= 1 && begin + count <= s.c, ErrorKind::kShapeMismatch, "slice_channels out of range");
  Shape os = s;
  os.c = count;
  Tensor5 y(os);
  for (std::int64_t p = 0; p < s.pixels(); ++p) {
    const double* src = x.value().data().data() + p * s.c + begin;
    std::copy(src, src + count, y.data().data() + p * count);
  }
  return x.tape->push(std::move(y), {x}, [x, begin, count](Tape& t, const Tensor5& gy) {
    const Shape& s = t.value(x).shape();
    Tensor5 gx(s);
    for (std::int64_t p = 0; p < s.pixels(); ++p) {
      const double* src = gy.data().data() + p * count;
      std::copy(src, src + count, gx.data().data() + p * s.c + begin);
    }
    t.accumulate(x, std::move(gx));
  });
}

Var stack_time(const std::vector<Var>& steps) {
  require(!steps.empty(), ErrorKind::kShapeMismatch, "stack_time of nothing");
  const Shape s0 = steps.front().shape();
  require(s0.t == 1, ErrorKind::kShapeMismatch, "stack_time expects single-step tensors");
  for (const Var& v : steps) check_same(v, steps.front(), "stack_time");
  const int tn = static_cast<int>(steps.size());
  const Shape os{s0.n, tn, s0.h, s0.w, s0.c};
  const std::int64_t frame = std::int64_t{s0.h} * s0.w * s0.c;
  Tensor5 y(os);
  for (int t = 0; t < tn; ++t) {
    const Tensor5& v = steps[static_cast<std::size_t>(t)].value();
    for (int n = 0; n < s0.n; ++n) std::copy(&v.at(n, 0, 0, 0, 0), &v.at(n, 0, 0, 0, 0) + frame, &y.at(n, t, 0, 0, 0));
  }
  Tape& tape = *steps.front().tape;
  return tape.push(std::move(y), steps, [steps, frame](Tape& t, const Tensor5& gy) {
    const Shape& s = gy.shape();
    for (int ti = 0; ti < s.t; ++ti) {
      Tensor5 g(Shape{s.n, 1, s.h, s.w, s.c});
      for (int n = 0; n < s.n; ++n) std::copy(&gy.at(n, ti, 0, 0, 0), &gy.at(n, ti, 0, 0, 0) + frame, &g.at(n, 0, 0, 0, 0));
      t.accumulate(steps[static_cast<std::size_t>(ti)], std::move(g));
    }
  });
}

Var mean_time(Var x) {
  const Shape& s = x.shape();
  const Shape os{s.n, 1, s.h, s.w, s.c};
  const std::int64_t frame = std::int64_t{s.h} * s.w * s.c;
  Tensor5 y(os);
  for (int n = 0; n < s.n; ++n) {
    double* o = &y.at(n, 0, 0, 0, 0);
    for (int t = 0; t < s.t; ++t) {
      const double* v = &x.value().at(n, t, 0, 0, 0);
      for (std::int64_t i = 0; i < frame; ++i) o[i] += v[i];
    }
    for (std::int64_t i = 0; i < frame; ++i) o[i] /= static_cast<double>(s.t);
  }
  return x.tape->push(std::move(y), {x}, [x, frame](Tape& t, const Tensor5& gy) {
    const Shape& s = t.value(x).shape();
    Tensor5 gx(s);
    for (int n = 0; n < s.n; ++n) {
      const double* g = &gy.at(n, 0, 0, 0, 0);
      for (int ti = 0; ti < s.t; ++ti) {
        double* o = &gx.at(n, ti, 0, 0, 0);
        for (std::int64_t i = 0; i < frame; ++i) o[i] = g[i] / static_cast<double>(s.t);
      }
    }
    t.accumulate(x, std::move(gx));
  });
}

Var softmax_cross_entropy(Var logits, const std::vector<int>& labels) {
  const Shape& s = logits.shape();
  require(s.t == 1 && s.h == 1 && s.w == 1, ErrorKind::kShapeMismatch, "logits must be (N,1,1,1,K)");
  require(static_cast<int>(labels.size()) == s.n, ErrorKind::kShapeMismatch, "one label per batch item");
  const int k = s.c;
  Tensor5 prob(s);
  double loss = 0.0;
  for (int n = 0; n < s.n; ++n) {
    const int label = labels[static_cast<std::size_t>(n)];
    require(label >= 0 && label < k, ErrorKind::kShapeMismatch, "label out of range");
    const double* z = &logits.value().at(n, 0, 0, 0, 0);
    double* p = &prob.at(n, 0, 0, 0, 0);
    double mx = z[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, z[j]);
    double sum = 0.0;
    for (int j = 0; j < k; ++j) {
      p[j] = std::exp(z[j] - mx);
      sum += p[j];
    }
    for (int j = 0; j < k; ++j) p[j] /= sum;
    loss -= (z[label] - mx) - std::log(sum);
  }
  loss /= static_cast<double>(s.n);
  return logits.tape->push(Tensor5(Shape{}, loss), {logits}, [logits, prob = std::move(prob), labels](Tape& t, const Tensor5& gy) {
    Tensor5 g = prob;
    const Shape& s = g.shape();
    const double scale = gy[0] / static_cast<double>(s.n);
    for (int n = 0; n < s.n; ++n) {
      double* p = &g.at(n, 0, 0, 0, 0);
      p[labels[static_cast<std::size_t>(n)]] -= 1.0;
      for (int j = 0; j < s.c; ++j) p[j] *= scale;
    }
    t.accumulate(logits, std::move(g));
  });
}

}  // namespace billnet::ad
