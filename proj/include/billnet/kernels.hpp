// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "billnet/tensor.hpp"

namespace billnet::ref {

/// 3-D convolution geometry. Padding is always "same"-style zero padding of
/// (k-1)/2 per side, so odd kernels keep T/H/W when the stride is 1.
struct ConvSpec {
  std::array<int, 3> kernel{1, 1, 1};  // (kt, kh, kw)
  std::array<int, 3> stride{1, 1, 1};
  int groups = 1;
  int in_channels = 1;
  int out_channels = 1;

  int in_per_group() const { return in_channels / groups; }
  int out_per_group() const { return out_channels / groups; }
  std::int64_t weight_count() const {
    return std::int64_t{out_channels} * kernel[0] * kernel[1] * kernel[2] * in_per_group();
  }
  /// Weight tensor shape (C_out, kt, kh, kw, C_in/g).
  Shape weight_shape() const {
    return Shape{out_channels, kernel[0], kernel[1], kernel[2], in_per_group()};
  }

  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

/// Throws BadGrouping / ShapeMismatch for an inconsistent spec.
void validate(const ConvSpec& spec);
Shape conv_output_shape(const Shape& in, const ConvSpec& spec);

/// Cross-correlation with zero padding; grouped outputs concatenated.
Tensor5 conv3d(const Tensor5& x, const Tensor5& w, const ConvSpec& spec);
Tensor5 conv3d_backward_input(const Tensor5& gy, const Tensor5& w, const ConvSpec& spec, const Shape& in_shape);
Tensor5 conv3d_backward_weight(const Tensor5& x, const Tensor5& gy, const ConvSpec& spec);

struct PoolSpec {
  std::array<int, 3> window{1, 2, 2};
  std::array<int, 3> stride{1, 2, 2};

  friend bool operator==(const PoolSpec&, const PoolSpec&) = default;
};

Shape pool_output_shape(const Shape& in, const PoolSpec& spec);
/// Floor-mode max pooling. `argmax`, when given, receives the flat input
/// index of the first maximum of each window.
Tensor5 maxpool3d(const Tensor5& x, const PoolSpec& spec, std::vector<std::int64_t>* argmax = nullptr);

/// Spatial sum per (n, t, c): shape (N,T,1,1,C).
Tensor5 gap_sum(const Tensor5& x);
/// Spatial mean per (n, t, c).
Tensor5 gap_spatial(const Tensor5& x);

/// I1*S + I0*(1-S) with S of shape (N,T,1,1,C) broadcast over h and w.
Tensor5 mux(const Tensor5& i0, const Tensor5& i1, const Tensor5& s);

/// Per-pixel matrix product: x (...,in) times w (1,1,1,in,out).
Tensor5 linear(const Tensor5& x, const Tensor5& w);
Tensor5 linear_backward_input(const Tensor5& gy, const Tensor5& w);
Tensor5 linear_backward_weight(const Tensor5& x, const Tensor5& gy);

inline Shape matrix_shape(int rows, int cols) { return Shape{1, 1, 1, rows, cols}; }

}  // namespace billnet::ref
