// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "billnet/error.hpp"

namespace billnet {

/// Five-axis shape (batch, time, height, width, channel). Channel is the
/// fastest-varying axis in every container of this library.
struct Shape {
  int n = 1;
  int t = 1;
  int h = 1;
  int w = 1;
  int c = 1;

  std::int64_t size() const { return std::int64_t{n} * t * h * w * c; }
  std::int64_t pixels() const { return std::int64_t{n} * t * h * w; }
  bool valid() const { return n >= 1 && t >= 1 && h >= 1 && w >= 1 && c >= 1; }

  std::int64_t index(int in, int it, int ih, int iw, int ic) const {
    return (((std::int64_t{in} * t + it) * h + ih) * w + iw) * c + ic;
  }

  friend bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& s);

/// Dense row-major tensor, channel fastest.
template <typename T>
class DenseTensor {
 public:
  using value_type = T;

  DenseTensor() = default;
  explicit DenseTensor(Shape shape, T fill = T{}) : shape_(shape) {
    if (!shape.valid()) fail(ErrorKind::kShapeMismatch, "all dims must be >= 1, got " + to_string(shape));
    data_.assign(static_cast<std::size_t>(shape.size()), fill);
  }
  DenseTensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (!shape.valid()) fail(ErrorKind::kShapeMismatch, "all dims must be >= 1, got " + to_string(shape));
    if (static_cast<std::int64_t>(data_.size()) != shape.size()) {
      fail(ErrorKind::kShapeMismatch, "data length does not match shape " + to_string(shape));
    }
  }

  const Shape& shape() const { return shape_; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  T& at(int n, int t, int h, int w, int c) { return data_[static_cast<std::size_t>(shape_.index(n, t, h, w, c))]; }
  const T& at(int n, int t, int h, int w, int c) const {
    return data_[static_cast<std::size_t>(shape_.index(n, t, h, w, c))];
  }

  friend bool operator==(const DenseTensor&, const DenseTensor&) = default;

 private:
  Shape shape_{};
  std::vector<T> data_;
};

using Tensor5 = DenseTensor<double>;
/// Exact integer accumulators (pre-activations, bitcounts).
using IntTensor = DenseTensor<std::int32_t>;

using Word = std::uint64_t;
inline constexpr int kWordBits = 64;

inline int words_for(int bits) { return (bits + kWordBits - 1) / kWordBits; }

/// Bit-packed binary tensor. Each pixel (n,t,h,w) owns words_for(C) words;
/// channel c lives in word c/64 at bit c%64 (LSB first). Padding bits are 0.
class BitTensor {
 public:
  BitTensor() = default;
  explicit BitTensor(Shape shape);

  const Shape& shape() const { return shape_; }
  int words_per_pixel() const { return wpp_; }
  std::int64_t pixels() const { return shape_.pixels(); }

  std::span<const Word> words() const { return words_; }
  std::span<const Word> pixel(std::int64_t p) const {
    return {words_.data() + p * wpp_, static_cast<std::size_t>(wpp_)};
  }
  std::span<Word> pixel_mut(std::int64_t p) { return {words_.data() + p * wpp_, static_cast<std::size_t>(wpp_)}; }

  bool get(std::int64_t p, int c) const {
    return (words_[static_cast<std::size_t>(p * wpp_ + c / kWordBits)] >> (c % kWordBits)) & 1U;
  }
  void set(std::int64_t p, int c, bool v);

  /// Re-zero padding bits after raw word writes (e.g. NOT).
  void clear_padding();
  Word tail_mask() const;

  friend bool operator==(const BitTensor&, const BitTensor&) = default;

 private:
  Shape shape_{};
  int wpp_ = 0;
  std::vector<Word> words_;
};

/// Two-plane ternary tensor: value = plus - minus. Planes never overlap.
class TernTensor {
 public:
  TernTensor() = default;
  explicit TernTensor(Shape shape) : plus_(shape), minus_(shape) {}
  TernTensor(BitTensor plus, BitTensor minus);

  const Shape& shape() const { return plus_.shape(); }
  const BitTensor& plus() const { return plus_; }
  const BitTensor& minus() const { return minus_; }

  int get(std::int64_t p, int c) const { return int{plus_.get(p, c)} - int{minus_.get(p, c)}; }
  void set(std::int64_t p, int c, int v);

  /// Throws InvariantViolation if any element is both +1 and -1.
  void check_disjoint() const;

  friend bool operator==(const TernTensor&, const TernTensor&) = default;

 private:
  BitTensor plus_;
  BitTensor minus_;
};

BitTensor pack(const Tensor5& x);
Tensor5 unpack(const BitTensor& b);
TernTensor pack_ternary(const Tensor5& x);
Tensor5 unpack(const TernTensor& t);

// Word-span kernels. Spans must have equal length.
inline std::int64_t popcount(std::span<const Word> a) {
  std::int64_t s = 0;
  for (Word x : a) s += std::popcount(x);
  return s;
}
inline std::int64_t popcount_and(std::span<const Word> a, std::span<const Word> b) {
  std::int64_t s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::popcount(a[i] & b[i]);
  return s;
}
inline std::int64_t popcount_and3(std::span<const Word> a, std::span<const Word> b, std::span<const Word> m) {
  std::int64_t s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::popcount(a[i] & b[i] & m[i]);
  return s;
}

std::int64_t popcount(const BitTensor& a);
std::int64_t popcount_and(const BitTensor& a, const BitTensor& b);

/// sum_i a_i * w_i for a in {0,1} and w in {-1,+1} (bit 1 encodes +1):
/// 2*popcount(a & w) - popcount(a).
std::int64_t binary_dot_bipolar_weights(const BitTensor& a, const BitTensor& w_bits);

/// sum_i h_i * w_i for ternary h and bipolar w.
std::int64_t ternary_dot_bipolar_weights(const TernTensor& h, const BitTensor& w_bits);

}  // namespace billnet
