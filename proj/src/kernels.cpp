// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "billnet/kernels.hpp"

#include <algorithm>
#include <limits>

namespace billnet::ref {

namespace {

int out_extent(int in, int k, int s) { return (in + 2 * ((k - 1) / 2) - k) / s + 1; }

struct ConvGeom {
  Shape in;
  Shape out;
  int kt, kh, kw, st, sh, sw, pt, ph, pw;
  int cig, cog;
};

ConvGeom geometry(const Shape& in, const ConvSpec& spec) {
  validate(spec);
  require(in.c == spec.in_channels, ErrorKind::kShapeMismatch,
          "conv expects " + std::to_string(spec.in_channels) + " input channels, got " + to_string(in));
  ConvGeom g;
  g.in = in;
  g.out = conv_output_shape(in, spec);
  g.kt = spec.kernel[0];
  g.kh = spec.kernel[1];
  g.kw = spec.kernel[2];
  g.st = spec.stride[0];
  g.sh = spec.stride[1];
  g.sw = spec.stride[2];
  g.pt = (g.kt - 1) / 2;
  g.ph = (g.kh - 1) / 2;
  g.pw = (g.kw - 1) / 2;
  g.cig = spec.in_per_group();
  g.cog = spec.out_per_group();
  return g;
}

// Calls f(out_offset, in_offset, weight_tap_offset) for every valid
// (output pixel, kernel tap) pair. Offsets are in elements.
template <typename F>
void for_each_tap(const ConvGeom& g, F&& f) {
  const Shape& in = g.in;
  const Shape& out = g.out;
  for (int n = 0; n < out.n; ++n) {
    for (int ot = 0; ot < out.t; ++ot) {
      for (int oh = 0; oh < out.h; ++oh) {
        for (int ow = 0; ow < out.w; ++ow) {
          const std::int64_t o_off = out.index(n, ot, oh, ow, 0);
          for (int kt = 0; kt < g.kt; ++kt) {
            const int it = ot * g.st - g.pt + kt;
            if (it < 0 || it >= in.t) continue;
            for (int kh = 0; kh < g.kh; ++kh) {
              const int ih = oh * g.sh - g.ph + kh;
              if (ih < 0 || ih >= in.h) continue;
              for (int kw = 0; kw < g.kw; ++kw) {
                const int iw = ow * g.sw - g.pw + kw;
                if (iw < 0 || iw >= in.w) continue;
                const std::int64_t tap = (std::int64_t{kt} * g.kh + kh) * g.kw + kw;
                f(o_off, in.index(n, it, ih, iw, 0), tap);
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

void validate(const ConvSpec& spec) {
  require(spec.groups >= 1, ErrorKind::kBadGrouping, "groups must be >= 1");
  require(spec.in_channels >= 1 && spec.out_channels >= 1, ErrorKind::kShapeMismatch, "channel counts must be >= 1");
  require(spec.in_channels % spec.groups == 0 && spec.out_channels % spec.groups == 0, ErrorKind::kBadGrouping,
          "channels " + std::to_string(spec.in_channels) + "->" + std::to_string(spec.out_channels) +
              " not divisible by " + std::to_string(spec.groups) + " groups");
  for (int i = 0; i < 3; ++i) {
    require(spec.kernel[i] >= 1 && spec.kernel[i] % 2 == 1, ErrorKind::kShapeMismatch, "kernel dims must be odd");
    require(spec.stride[i] >= 1, ErrorKind::kShapeMismatch, "strides must be >= 1");
  }
}

Shape conv_output_shape(const Shape& in, const ConvSpec& spec) {
  return Shape{in.n, out_extent(in.t, spec.kernel[0], spec.stride[0]), out_extent(in.h, spec.kernel[1], spec.stride[1]),
               out_extent(in.w, spec.kernel[2], spec.stride[2]), spec.out_channels};
}

Tensor5 conv3d(const Tensor5& x, const Tensor5& w, const ConvSpec& spec) {
  const ConvGeom g = geometry(x.shape(), spec);
  require(w.shape() == spec.weight_shape(), ErrorKind::kShapeMismatch,
          "conv weight " + to_string(w.shape()) + " expected " + to_string(spec.weight_shape()));
  Tensor5 y(g.out);
  const double* xp = x.data().data();
  const double* wp = w.data().data();
  double* yp = y.data().data();
  const std::int64_t taps = std::int64_t{g.kt} * g.kh * g.kw;
  const int co_total = spec.out_channels;
  for_each_tap(g, [&](std::int64_t o_off, std::int64_t i_off, std::int64_t tap) {
    for (int co = 0; co < co_total; ++co) {
      const int grp = co / g.cog;
      const double* xs = xp + i_off + std::int64_t{grp} * g.cig;
      const double* ws = wp + (co * taps + tap) * g.cig;
      double acc = 0.0;
      for (int ci = 0; ci < g.cig; ++ci) acc += xs[ci] * ws[ci];
      yp[o_off + co] += acc;
    }
  });
  return y;
}

Tensor5 conv3d_backward_input(const Tensor5& gy, const Tensor5& w, const ConvSpec& spec, const Shape& in_shape) {
  const ConvGeom g = geometry(in_shape, spec);
  require(gy.shape() == g.out, ErrorKind::kShapeMismatch, "conv grad shape mismatch");
  Tensor5 gx(in_shape);
  const double* gyp = gy.data().data();
  const double* wp = w.data().data();
  double* gxp = gx.data().data();
  const std::int64_t taps = std::int64_t{g.kt} * g.kh * g.kw;
  for_each_tap(g, [&](std::int64_t o_off, std::int64_t i_off, std::int64_t tap) {
    for (int co = 0; co < spec.out_channels; ++co) {
      const double gv = gyp[o_off + co];
      if (gv == 0.0) continue;
      const int grp = co / g.cog;
      double* xs = gxp + i_off + std::int64_t{grp} * g.cig;
      const double* ws = wp + (co * taps + tap) * g.cig;
      for (int ci = 0; ci < g.cig; ++ci) xs[ci] += gv * ws[ci];
    }
  });
  return gx;
}

Tensor5 conv3d_backward_weight(const Tensor5& x, const Tensor5& gy, const ConvSpec& spec) {
  const ConvGeom g = geometry(x.shape(), spec);
  require(gy.shape() == g.out, ErrorKind::kShapeMismatch, "conv grad shape mismatch");
  Tensor5 gw(spec.weight_shape());
  const double* xp = x.data().data();
  const double* gyp = gy.data().data();
  double* gwp = gw.data().data();
  const std::int64_t taps = std::int64_t{g.kt} * g.kh * g.kw;
  for_each_tap(g, [&](std::int64_t o_off, std::int64_t i_off, std::int64_t tap) {
    for (int co = 0; co < spec.out_channels; ++co) {
      const double gv = gyp[o_off + co];
      if (gv == 0.0) continue;
      const int grp = co / g.cog;
      const double* xs = xp + i_off + std::int64_t{grp} * g.cig;
      double* ws = gwp + (co * taps + tap) * g.cig;
      for (int ci = 0; ci < g.cig; ++ci) ws[ci] += gv * xs[ci];
    }
  });
  return gw;
}

Shape pool_output_shape(const Shape& in, const PoolSpec& spec) {
  const std::array<int, 3> dims{in.t, in.h, in.w};
  std::array<int, 3> out{};
  for (int i = 0; i < 3; ++i) {
    require(spec.window[i] >= 1 && spec.stride[i] >= 1, ErrorKind::kShapeMismatch, "bad pooling spec");
    require(dims[i] >= spec.window[i], ErrorKind::kShapeMismatch,
            "pooling window larger than input " + to_string(in));
    out[i] = (dims[i] - spec.window[i]) / spec.stride[i] + 1;
  }
  return Shape{in.n, out[0], out[1], out[2], in.c};
}

Tensor5 maxpool3d(const Tensor5& x, const PoolSpec& spec, std::vector<std::int64_t>* argmax) {
  const Shape& in = x.shape();
  const Shape out = pool_output_shape(in, spec);
  Tensor5 y(out);
  if (argmax) argmax->assign(static_cast<std::size_t>(out.size()), 0);
  for (int n = 0; n < out.n; ++n) {
    for (int ot = 0; ot < out.t; ++ot) {
      for (int oh = 0; oh < out.h; ++oh) {
        for (int ow = 0; ow < out.w; ++ow) {
          for (int c = 0; c < out.c; ++c) {
            double best = -std::numeric_limits<double>::infinity();
            std::int64_t best_i = -1;
            for (int kt = 0; kt < spec.window[0]; ++kt) {
              for (int kh = 0; kh < spec.window[1]; ++kh) {
                for (int kw = 0; kw < spec.window[2]; ++kw) {
                  const std::int64_t i = in.index(n, ot * spec.stride[0] + kt, oh * spec.stride[1] + kh,
                                                  ow * spec.stride[2] + kw, c);
                  if (x[i] > best) {
                    best = x[i];
                    best_i = i;
                  }
                }
              }
            }
            const std::int64_t o = out.index(n, ot, oh, ow, c);
            y[o] = best;
            if (argmax) (*argmax)[static_cast<std::size_t>(o)] = best_i;
          }
        }
      }
    }
  }
  return y;
}

Tensor5 gap_sum(const Tensor5& x) {
  const Shape& s = x.shape();
  Tensor5 y(Shape{s.n, s.t, 1, 1, s.c});
  for (int n = 0; n < s.n; ++n) {
    for (int t = 0; t < s.t; ++t) {
      double* yp = &y.at(n, t, 0, 0, 0);
      for (int h = 0; h < s.h; ++h) {
        for (int w = 0; w < s.w; ++w) {
          const double* xp = &x.at(n, t, h, w, 0);
          for (int c = 0; c < s.c; ++c) yp[c] += xp[c];
        }
      }
    }
  }
  return y;
}

Tensor5 gap_spatial(const Tensor5& x) {
  Tensor5 y = gap_sum(x);
  const double hw = static_cast<double>(x.shape().h) * x.shape().w;
  for (auto& v : y.vec()) v /= hw;
  return y;
}

Tensor5 mux(const Tensor5& i0, const Tensor5& i1, const Tensor5& s) {
  const Shape& sh = i0.shape();
  require(i1.shape() == sh, ErrorKind::kShapeMismatch, "mux inputs differ: " + to_string(sh) + " vs " + to_string(i1.shape()));
  require(s.shape() == Shape{sh.n, sh.t, 1, 1, sh.c}, ErrorKind::kShapeMismatch,
          "mux select must be (N,T,1,1,C), got " + to_string(s.shape()));
  for (double v : s.data()) require(v == 0.0 || v == 1.0, ErrorKind::kNonBinarySelect, "mux select must be binary");
  Tensor5 y(sh);
  for (int n = 0; n < sh.n; ++n) {
    for (int t = 0; t < sh.t; ++t) {
      const double* sp = &s.at(n, t, 0, 0, 0);
      for (int h = 0; h < sh.h; ++h) {
        for (int w = 0; w < sh.w; ++w) {
          const std::int64_t off = sh.index(n, t, h, w, 0);
          for (int c = 0; c < sh.c; ++c) y[off + c] = i1[off + c] * sp[c] + i0[off + c] * (1.0 - sp[c]);
        }
      }
    }
  }
  return y;
}

Tensor5 linear(const Tensor5& x, const Tensor5& w) {
  const int in = w.shape().w;
  const int out = w.shape().c;
  require(x.shape().c == in, ErrorKind::kShapeMismatch,
          "linear expects " + std::to_string(in) + " inputs, got " + to_string(x.shape()));
  Shape ys = x.shape();
  ys.c = out;
  Tensor5 y(ys);
  const double* wp = w.data().data();
  for (std::int64_t p = 0; p < x.shape().pixels(); ++p) {
    const double* xp = x.data().data() + p * in;
    double* yp = y.data().data() + p * out;
    for (int i = 0; i < in; ++i) {
      const double xv = xp[i];
      if (xv == 0.0) continue;
      const double* wr = wp + std::int64_t{i} * out;
      for (int o = 0; o < out; ++o) yp[o] += xv * wr[o];
    }
  }
  return y;
}

Tensor5 linear_backward_input(const Tensor5& gy, const Tensor5& w) {
  const int in = w.shape().w;
  const int out = w.shape().c;
  Shape xs = gy.shape();
  xs.c = in;
  Tensor5 gx(xs);
  const double* wp = w.data().data();
  for (std::int64_t p = 0; p < gy.shape().pixels(); ++p) {
    const double* gp = gy.data().data() + p * out;
    double* xp = gx.data().data() + p * in;
    for (int i = 0; i < in; ++i) {
      const double* wr = wp + std::int64_t{i} * out;
      double acc = 0.0;
      for (int o = 0; o < out; ++o) acc += gp[o] * wr[o];
      xp[i] = acc;
    }
  }
  return gx;
}

Tensor5 linear_backward_weight(const Tensor5& x, const Tensor5& gy) {
  const int in = x.shape().c;
  const int out = gy.shape().c;
  Tensor5 gw(matrix_shape(in, out));
  double* wp = gw.data().data();
  for (std::int64_t p = 0; p < x.shape().pixels(); ++p) {
    const double* xp = x.data().data() + p * in;
    const double* gp = gy.data().data() + p * out;
    for (int i = 0; i < in; ++i) {
      const double xv = xp[i];
      if (xv == 0.0) continue;
      double* wr = wp + std::int64_t{i} * out;
      for (int o = 0; o < out; ++o) wr[o] += xv * gp[o];
    }
  }
  return gw;
}

}  // namespace billnet::ref
