// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "billnet/tensor.hpp"

namespace billnet::quant {

// Element-wise quantizers and their straight-through surrogate gradients.

/// 1 if x > 0 else 0. The boundary maps to 0.
inline int heaviside(double x) { return x > 0.0 ? 1 : 0; }
/// d/dx heaviside under STE: 1 on |x| <= 1 (boundary included).
inline double heaviside_ste_grad(double x) { return (x >= -1.0 && x <= 1.0) ? 1.0 : 0.0; }

inline double clip(double y) { return y < -1.0 ? -1.0 : (y > 1.0 ? 1.0 : y); }
inline double clip_ste_grad(double /*y*/) { return 1.0; }

inline int or_gate(int x1, int x2) { return (x1 | x2) & 1; }

/// +1 if x > 0 else -1, so sign_strict(x) == 2*heaviside(x) - 1.
inline int sign_strict(double x) { return x > 0.0 ? 1 : -1; }
/// BNN sign estimator: pass-through where |x| <= 1.
inline double sign_ste_grad(double x) { return heaviside_ste_grad(x); }

double ssign_scale(int n_in, int n_out);
inline double ssign(double w, int n_in, int n_out) { return ssign_scale(n_in, n_out) * sign_strict(w); }

double stern_scale(int m);
/// Threshold of the ternarizer: 0.7 * mean(|w|).
double tern_threshold(std::span<const double> w);
inline int ternarize(double w, double delta) { return w > delta ? 1 : (w < -delta ? -1 : 0); }

struct SternResult {
  TernTensor values;  // shape (1,1,1,1,len)
  double scale = 0.0;
  double delta = 0.0;
};
SternResult stern(std::span<const double> w, int m);

// Thresholded global average pooling.

/// Integer threshold of the bitcount comparison: count > hw/2.
inline int tgap_threshold(int spatial) { return spatial / 2; }
/// Quantized form. Output shape (N,T,1,1,C): bit set iff popcount over h*w > h*w/2.
BitTensor tgap(const BitTensor& x);
/// Definition form on real maps: 1 iff mean(map) > 0.5*m.
Tensor5 tgap(const Tensor5& x, double m);

// Batch normalization and its power-of-two replacement.

struct BNParams {
  std::vector<double> gamma;
  std::vector<double> beta;
  std::vector<double> mean;
  std::vector<double> var;
  double eps = 1e-3;

  static BNParams identity(int channels);
  int channels() const { return static_cast<int>(gamma.size()); }
  double folded_scale(int c) const;   // gamma / sqrt(var + eps)
  double folded_offset(int c) const;  // beta - gamma * mean / sqrt(var + eps)
};

/// Two-step evaluation gamma*(x-mu)/sqrt(var+eps) + beta.
double bn_forward(double x, const BNParams& p, int c);
/// Folded evaluation scale*x + offset.
double bn_forward_folded(double x, const BNParams& p, int c);

struct ShiftNorm {
  std::vector<int> shift;  // scale = 2^shift, always positive

  int channels() const { return static_cast<int>(shift.size()); }
  double scale(int c) const;
};

/// shift = round-half-even(log2 |folded_scale|); offsets are dropped.
ShiftNorm bsn_fold(const BNParams& p);

}  // namespace billnet::quant
