// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "billnet/quantize.hpp"

#include <cmath>

namespace billnet::quant {

double ssign_scale(int n_in, int n_out) {
  require(n_in + n_out >= 1, ErrorKind::kBadConfig, "ssign needs n_i + n_o >= 1");
  return 3.0 / std::sqrt(static_cast<double>(n_in + n_out));
}

double stern_scale(int m) {
  require(m >= 1, ErrorKind::kBadConfig, "stern needs m >= 1");
  return 1.0 / std::sqrt(4.0 * m);
}

double tern_threshold(std::span<const double> w) {
  if (w.empty()) return 0.0;
  double s = 0.0;
  for (double v : w) s += std::abs(v);
  return 0.7 * s / static_cast<double>(w.size());
}

SternResult stern(std::span<const double> w, int m) {
  require(!w.empty(), ErrorKind::kShapeMismatch, "stern of an empty vector");
  SternResult r;
  r.scale = stern_scale(m);
  r.delta = tern_threshold(w);
  r.values = TernTensor(Shape{1, 1, 1, 1, static_cast<int>(w.size())});
  for (std::size_t i = 0; i < w.size(); ++i) r.values.set(0, static_cast<int>(i), ternarize(w[i], r.delta));
  return r;
}

BitTensor tgap(const BitTensor& x) {
  const Shape& s = x.shape();
  const int hw = s.h * s.w;
  const int threshold = tgap_threshold(hw);
  BitTensor out(Shape{s.n, s.t, 1, 1, s.c});
  std::vector<int> counts(static_cast<std::size_t>(s.c));
  for (int n = 0; n < s.n; ++n) {
    for (int t = 0; t < s.t; ++t) {
      std::fill(counts.begin(), counts.end(), 0);
      const std::int64_t base = (std::int64_t{n} * s.t + t) * hw;
      for (int p = 0; p < hw; ++p) {
        const auto words = x.pixel(base + p);
        for (int wi = 0; wi < x.words_per_pixel(); ++wi) {
          Word v = words[static_cast<std::size_t>(wi)];
          while (v != 0) {
            const int bit = std::countr_zero(v);
            ++counts[static_cast<std::size_t>(wi * kWordBits + bit)];
            v &= v - 1;
          }
        }
      }
      const std::int64_t op = std::int64_t{n} * s.t + t;
      for (int c = 0; c < s.c; ++c) {
        if (counts[static_cast<std::size_t>(c)] > threshold) out.set(op, c, true);
      }
    }
  }
  return out;
}

Tensor5 tgap(const Tensor5& x, double m) {
  const Shape& s = x.shape();
  Tensor5 out(Shape{s.n, s.t, 1, 1, s.c});
  const int hw = s.h * s.w;
  for (int n = 0; n < s.n; ++n) {
    for (int t = 0; t < s.t; ++t) {
      for (int c = 0; c < s.c; ++c) {
        double sum = 0.0;
        for (int h = 0; h < s.h; ++h) {
          for (int w = 0; w < s.w; ++w) sum += x.at(n, t, h, w, c);
        }
        out.at(n, t, 0, 0, c) = (sum / hw > 0.5 * m) ? 1.0 : 0.0;
      }
    }
  }
  return out;
}

BNParams BNParams::identity(int channels) {
  BNParams p;
  p.gamma.assign(static_cast<std::size_t>(channels), 1.0);
  p.beta.assign(static_cast<std::size_t>(channels), 0.0);
  p.mean.assign(static_cast<std::size_t>(channels), 0.0);
  p.var.assign(static_cast<std::size_t>(channels), 1.0);
  return p;
}

double BNParams::folded_scale(int c) const {
  const auto i = static_cast<std::size_t>(c);
  return gamma[i] / std::sqrt(var[i] + eps);
}

double BNParams::folded_offset(int c) const {
  const auto i = static_cast<std::size_t>(c);
  return beta[i] - gamma[i] * mean[i] / std::sqrt(var[i] + eps);
}

double bn_forward(double x, const BNParams& p, int c) {
  const auto i = static_cast<std::size_t>(c);
  return p.gamma[i] * (x - p.mean[i]) / std::sqrt(p.var[i] + p.eps) + p.beta[i];
}

double bn_forward_folded(double x, const BNParams& p, int c) { return p.folded_scale(c) * x + p.folded_offset(c); }

double ShiftNorm::scale(int c) const { return std::ldexp(1.0, shift[static_cast<std::size_t>(c)]); }

ShiftNorm bsn_fold(const BNParams& p) {
  ShiftNorm out;
  out.shift.reserve(static_cast<std::size_t>(p.channels()));
  for (int c = 0; c < p.channels(); ++c) {
    const double g = p.folded_scale(c);
    require(g != 0.0 && std::isfinite(g), ErrorKind::kZeroScale, "folded BN scale is zero at channel " + std::to_string(c));
    // nearbyint honours the default round-to-nearest-even mode.
    out.shift.push_back(static_cast<int>(std::nearbyint(std::log2(std::abs(g)))));
  }
  return out;
}

}  // namespace billnet::quant
