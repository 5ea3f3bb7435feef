// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "billnet/kernels.hpp"
#include "billnet/tensor.hpp"

namespace billnet::ad {

class Tape;

/// Handle to a tape node.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor5& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Reverse-mode tape. Nodes are appended in primal order; backward() walks
/// them in exact reverse. A non-recording tape only keeps values, which is
/// how the reference forward pass runs.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor5& gy)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor5 value);
  /// Trainable leaf. backward() adds the gradient into `grad_sink`, which
  /// must have value.size() elements.
  Var param(Tensor5 value, std::span<double> grad_sink, std::string name);
  Var push(Tensor5 value, std::span<const Var> parents, Backward fn);
  Var push(Tensor5 value, std::initializer_list<Var> parents, Backward fn) {
    return push(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(fn));
  }

  const Tensor5& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }

  /// Adds g into the gradient of v (no-op when v needs no gradient).
  void accumulate(Var v, const Tensor5& g);
  void accumulate(Var v, Tensor5&& g);

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded closure in reverse.
  /// Throws DisconnectedGraph if a parameter received no gradient.
  void backward(Var loss);

 private:
  struct Node {
    Tensor5 value;
    Tensor5 grad;
    bool has_grad = false;
    bool requires_grad = false;
    Backward fn;
    std::span<double> sink;
    std::string name;
    bool is_param = false;
  };

  bool record_;
  std::deque<Node> nodes_;  // stable references across push()
};

// Differentiable primitives. All take and return Vars of the same tape.

Var conv3d(Var x, Var w, const ref::ConvSpec& spec);
Var linear(Var x, Var w);
Var add(Var a, Var b);
/// x + b with b of shape (1,1,1,1,C) broadcast over every pixel.
Var add_bias(Var x, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double s);
/// x / d with a true division, so integer-valued x over an integer d is
/// correctly rounded.
Var divide(Var x, double d);
/// Constant positive per-channel factor (BSN).
Var channel_scale(Var x, const std::vector<double>& s);

Var relu(Var x);
Var sigmoid(Var x);
Var tanh(Var x);
/// Heaviside forward; STE backward 1_{|x|<=1}.
Var heaviside(Var x);
/// Strict sign forward (0 -> -1); STE backward 1_{|x|<=1}.
Var sign(Var x);
/// Ternarize with delta = 0.7*mean|w| over the whole tensor; STE backward
/// 1_{|w|<=1}.
Var ternarize(Var w);
/// Clip to [-1,1]; STE backward 1.
Var clip(Var x);

struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;
};
/// Batch normalization over (N,T,H,W) with batch statistics; gamma and beta
/// are (1,1,1,1,C). The statistics used are written to `stats`.
Var batch_norm_train(Var x, Var gamma, Var beta, double eps, BatchStats* stats);
/// Inference-form batch normalization with fixed moving statistics.
Var batch_norm_eval(Var x, Var gamma, Var beta, const std::vector<double>& mean, const std::vector<double>& var,
                    double eps);

Var maxpool(Var x, const ref::PoolSpec& spec);
Var gap_sum(Var x);
/// I1*S + I0*(1-S); S is a constant binary (N,T,1,1,C) tensor.
Var mux(Var i0, Var i1, const Tensor5& s);

Var slice_time(Var x, int t);
Var slice_channels(Var x, int begin, int count);
Var stack_time(const std::vector<Var>& steps);
Var mean_time(Var x);

/// Mean over the batch of -log softmax(logits)[label]; logits (N,1,1,1,K).
Var softmax_cross_entropy(Var logits, const std::vector<int>& labels);

}  // namespace billnet::ad
