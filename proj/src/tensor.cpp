// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "billnet/tensor.hpp"

namespace billnet {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kNonBinaryInput: return "NonBinaryInput";
    case ErrorKind::kShapeMismatch: return "ShapeMismatch";
    case ErrorKind::kInvariantViolation: return "InvariantViolation";
    case ErrorKind::kBadGrouping: return "BadGrouping";
    case ErrorKind::kNonBinarySelect: return "NonBinarySelect";
    case ErrorKind::kZeroScale: return "ZeroScale";
    case ErrorKind::kNotFullyQuantized: return "NotFullyQuantized";
    case ErrorKind::kSlotTypeMismatch: return "SlotTypeMismatch";
    case ErrorKind::kDisconnectedGraph: return "DisconnectedGraph";
    case ErrorKind::kStageOrderViolation: return "StageOrderViolation";
    case ErrorKind::kBadConfig: return "BadConfig";
    case ErrorKind::kCorruptFile: return "CorruptFile";
    case ErrorKind::kVersionMismatch: return "VersionMismatch";
    case ErrorKind::kMissingFrames: return "MissingFrames";
    case ErrorKind::kBadResolution: return "BadResolution";
    case ErrorKind::kIo: return "IoError";
  }
  return "Unknown";
}

std::string to_string(const Shape& s) {
  return "(" + std::to_string(s.n) + "," + std::to_string(s.t) + "," + std::to_string(s.h) + "," +
         std::to_string(s.w) + "," + std::to_string(s.c) + ")";
}

BitTensor::BitTensor(Shape shape) : shape_(shape), wpp_(words_for(shape.c)) {
  require(shape.valid(), ErrorKind::kShapeMismatch, "all dims must be >= 1, got " + to_string(shape));
  words_.assign(static_cast<std::size_t>(shape.pixels() * wpp_), 0);
}

void BitTensor::set(std::int64_t p, int c, bool v) {
  Word& w = words_[static_cast<std::size_t>(p * wpp_ + c / kWordBits)];
  const Word bit = Word{1} << (c % kWordBits);
  w = v ? (w | bit) : (w & ~bit);
}

Word BitTensor::tail_mask() const {
  const int rem = shape_.c % kWordBits;
  return rem == 0 ? ~Word{0} : ((Word{1} << rem) - 1);
}

void BitTensor::clear_padding() {
  const Word mask = tail_mask();
  if (mask == ~Word{0}) return;
  for (std::int64_t p = 0; p < pixels(); ++p) words_[static_cast<std::size_t>(p * wpp_ + wpp_ - 1)] &= mask;
}

TernTensor::TernTensor(BitTensor plus, BitTensor minus) : plus_(std::move(plus)), minus_(std::move(minus)) {
  require(plus_.shape() == minus_.shape(), ErrorKind::kShapeMismatch, "ternary planes differ in shape");
  check_disjoint();
}

void TernTensor::set(std::int64_t p, int c, int v) {
  require(v >= -1 && v <= 1, ErrorKind::kInvariantViolation, "ternary value out of range");
  plus_.set(p, c, v == 1);
  minus_.set(p, c, v == -1);
}

void TernTensor::check_disjoint() const {
  const auto a = plus_.words();
  const auto b = minus_.words();
  for (std::size_t i = 0; i < a.size(); ++i) {
    require((a[i] & b[i]) == 0, ErrorKind::kInvariantViolation, "ternary planes overlap");
  }
}

BitTensor pack(const Tensor5& x) {
  BitTensor out(x.shape());
  const int c = x.shape().c;
  for (std::int64_t p = 0; p < x.shape().pixels(); ++p) {
    for (int ic = 0; ic < c; ++ic) {
      const double v = x[p * c + ic];
      if (v == 1.0) {
        out.set(p, ic, true);
      } else if (v != 0.0) {
        fail(ErrorKind::kNonBinaryInput, "element " + std::to_string(p * c + ic) + " is not 0 or 1");
      }
    }
  }
  return out;
}

Tensor5 unpack(const BitTensor& b) {
  Tensor5 out(b.shape());
  const int c = b.shape().c;
  for (std::int64_t p = 0; p < b.pixels(); ++p) {
    for (int ic = 0; ic < c; ++ic) out[p * c + ic] = b.get(p, ic) ? 1.0 : 0.0;
  }
  return out;
}

TernTensor pack_ternary(const Tensor5& x) {
  TernTensor out(x.shape());
  const int c = x.shape().c;
  for (std::int64_t p = 0; p < x.shape().pixels(); ++p) {
    for (int ic = 0; ic < c; ++ic) {
      const double v = x[p * c + ic];
      if (v != 0.0 && v != 1.0 && v != -1.0) {
        fail(ErrorKind::kNonBinaryInput, "element is not in {-1,0,1}");
      }
      out.set(p, ic, static_cast<int>(v));
    }
  }
  return out;
}

Tensor5 unpack(const TernTensor& t) {
  Tensor5 out(t.shape());
  const int c = t.shape().c;
  for (std::int64_t p = 0; p < t.shape().pixels(); ++p) {
    for (int ic = 0; ic < c; ++ic) out[p * c + ic] = t.get(p, ic);
  }
  return out;
}

std::int64_t popcount(const BitTensor& a) { return popcount(a.words()); }

std::int64_t popcount_and(const BitTensor& a, const BitTensor& b) {
  require(a.shape() == b.shape(), ErrorKind::kShapeMismatch,
          "popcount_and " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  return popcount_and(a.words(), b.words());
}

std::int64_t binary_dot_bipolar_weights(const BitTensor& a, const BitTensor& w_bits) {
  require(a.shape() == w_bits.shape(), ErrorKind::kShapeMismatch,
          "binary dot " + to_string(a.shape()) + " vs " + to_string(w_bits.shape()));
  return 2 * popcount_and(a.words(), w_bits.words()) - popcount(a.words());
}

std::int64_t ternary_dot_bipolar_weights(const TernTensor& h, const BitTensor& w_bits) {
  require(h.shape() == w_bits.shape(), ErrorKind::kShapeMismatch,
          "ternary dot " + to_string(h.shape()) + " vs " + to_string(w_bits.shape()));
  h.check_disjoint();
  return binary_dot_bipolar_weights(h.plus(), w_bits) - binary_dot_bipolar_weights(h.minus(), w_bits);
}

}  // namespace billnet
