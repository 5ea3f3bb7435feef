// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>

#include "billnet/kernels.hpp"
#include "billnet/network.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace billnet;

namespace {

Tensor5 random_real(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor5 x(s);
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : x.vec()) v = u(rng);
  return x;
}

Tensor5 random_bits(const Shape& s, std::mt19937_64& rng, double p = 0.5) {
  Tensor5 x(s);
  std::bernoulli_distribution b(p);
  for (auto& v : x.vec()) v = b(rng) ? 1.0 : 0.0;
  return x;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("conv3d special cases") {
  std::mt19937_64 rng(1);
  const Tensor5 x = random_real(Shape{1, 3, 4, 5, 2}, rng);

  ref::ConvSpec id;
  id.in_channels = 2;
  id.out_channels = 2;
  Tensor5 w(id.weight_shape());
  w.at(0, 0, 0, 0, 0) = 1.0;
  w.at(1, 0, 0, 0, 1) = 1.0;
  CHECK(ref::conv3d(x, w, id) == x);

  ref::ConvSpec box;
  box.kernel = {3, 3, 3};
  Tensor5 impulse(Shape{1, 5, 5, 5, 1});
  impulse.at(0, 2, 2, 2, 0) = 1.0;
  const Tensor5 y = ref::conv3d(impulse, Tensor5(box.weight_shape(), 1.0), box);
  double total = 0.0;
  for (double v : y.vec()) total += v;
  CHECK(total == 27.0);
  CHECK(y.at(0, 1, 1, 1, 0) == 1.0);
  CHECK(y.at(0, 3, 3, 3, 0) == 1.0);
  CHECK(y.at(0, 0, 2, 2, 0) == 0.0);

  ref::ConvSpec dw;
  dw.in_channels = 2;
  dw.out_channels = 2;
  dw.groups = 2;
  Tensor5 wd(dw.weight_shape());
  wd[0] = 3.0;
  wd[1] = -0.5;
  const Tensor5 yd = ref::conv3d(x, wd, dw);
  for (std::int64_t i = 0; i < x.size(); i += 2) {
    CHECK(yd[i] == 3.0 * x[i]);
    CHECK(yd[i + 1] == -0.5 * x[i + 1]);
  }
}

TEST_CASE("conv3d equals the direct-summation oracle") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 40; ++trial) {
    ref::ConvSpec s;
    const int g = 1 + static_cast<int>(rng() % 3);
    s.groups = g;
    s.in_channels = g * (1 + static_cast<int>(rng() % 3));
    s.out_channels = g * (1 + static_cast<int>(rng() % 3));
    for (int a = 0; a < 3; ++a) {
      s.kernel[static_cast<std::size_t>(a)] = rng() % 2 ? 3 : 1;
      s.stride[static_cast<std::size_t>(a)] = 1 + static_cast<int>(rng() % 2);
    }
    const Shape in{2, 3 + static_cast<int>(rng() % 3), 3 + static_cast<int>(rng() % 4), 4, s.in_channels};
    const Tensor5 x = random_real(in, rng);
    const Tensor5 w = random_real(s.weight_shape(), rng);
    const Tensor5 got = ref::conv3d(x, w, s);
    const Tensor5 want = testing::conv_oracle(x, w, s);
    REQUIRE(got.shape() == want.shape());
    for (std::int64_t i = 0; i < got.size(); ++i) REQUIRE(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
}

TEST_CASE("grouped conv equals independent convolutions on channel slices") {
  std::mt19937_64 rng(3);
  ref::ConvSpec s;
  s.kernel = {3, 3, 3};
  s.groups = 4;
  s.in_channels = 8;
  s.out_channels = 8;
  const Tensor5 x = random_real(Shape{1, 3, 4, 4, 8}, rng);
  const Tensor5 w = random_real(s.weight_shape(), rng);
  const Tensor5 y = ref::conv3d(x, w, s);
  ref::ConvSpec one = s;
  one.groups = 1;
  one.in_channels = 2;
  one.out_channels = 2;
  for (int grp = 0; grp < 4; ++grp) {
    Tensor5 xs(Shape{1, 3, 4, 4, 2});
    for (std::int64_t p = 0; p < xs.shape().pixels(); ++p)
      for (int c = 0; c < 2; ++c) xs[p * 2 + c] = x[p * 8 + grp * 2 + c];
    Tensor5 ws(one.weight_shape());
    for (std::int64_t i = 0; i < ws.size(); ++i) ws[i] = w[grp * ws.size() + i];
    const Tensor5 ys = ref::conv3d(xs, ws, one);
    for (std::int64_t p = 0; p < ys.shape().pixels(); ++p)
      for (int c = 0; c < 2; ++c) REQUIRE(ys[p * 2 + c] == y[p * 8 + grp * 2 + c]);
  }
}

TEST_CASE("conv3d rejects bad grouping") {
  ref::ConvSpec s;
  s.groups = 3;
  s.in_channels = 4;
  s.out_channels = 3;
  try {
    ref::validate(s);
    FAIL("bad grouping accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kBadGrouping);
  }
  ref::ConvSpec ok;
  ok.in_channels = 2;
  CHECK_THROWS_AS(ref::conv3d(Tensor5(Shape{1, 1, 1, 1, 3}), Tensor5(ok.weight_shape()), ok), Error);
}

TEST_CASE("max pooling and GAP") {
  ref::PoolSpec p;
  p.window = {2, 2, 2};
  p.stride = {2, 2, 2};
  const Tensor5 c(Shape{1, 2, 4, 4, 3}, 0.25);
  const Tensor5 pooled = ref::maxpool3d(c, p);
  CHECK(pooled.shape() == Shape{1, 1, 2, 2, 3});
  for (double v : pooled.vec()) CHECK(v == 0.25);

  // Every binary 2x2x2 window: max == OR.
  for (int m = 0; m < 256; ++m) {
    Tensor5 x(Shape{1, 2, 2, 2, 1});
    for (int i = 0; i < 8; ++i) x[i] = (m >> i) & 1;
    REQUIRE(ref::maxpool3d(x, p)[0] == (m != 0 ? 1.0 : 0.0));
  }

  Tensor5 map(Shape{1, 1, 6, 8, 1});
  for (int i = 0; i < 25; ++i) map[i] = 1.0;
  CHECK(ref::gap_spatial(map)[0] == 25.0 / 48.0);
  CHECK(ref::gap_sum(map)[0] == 25.0);
}

TEST_CASE("mux") {
  std::mt19937_64 rng(4);
  const Tensor5 i0 = random_bits(Shape{2, 3, 4, 5, 6}, rng);
  const Tensor5 i1 = random_bits(Shape{2, 3, 4, 5, 6}, rng);
  CHECK(ref::mux(i0, i1, Tensor5(Shape{2, 3, 1, 1, 6}, 1.0)) == i1);
  CHECK(ref::mux(i0, i1, Tensor5(Shape{2, 3, 1, 1, 6}, 0.0)) == i0);
  const Tensor5 s = random_bits(Shape{2, 3, 1, 1, 6}, rng);
  const Tensor5 y = ref::mux(i0, i1, s);
  for (int n = 0; n < 2; ++n)
    for (int t = 0; t < 3; ++t)
      for (int h = 0; h < 4; ++h)
        for (int w = 0; w < 5; ++w)
          for (int c = 0; c < 6; ++c) {
            const double sel = s.at(n, t, 0, 0, c);
            REQUIRE(y.at(n, t, h, w, c) == i1.at(n, t, h, w, c) * sel + i0.at(n, t, h, w, c) * (1 - sel));
          }
  Tensor5 bad = s;
  bad[0] = 0.5;
  try {
    ref::mux(i0, i1, bad);
    FAIL("non-binary select accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kNonBinarySelect);
  }
  CHECK_THROWS_AS(ref::mux(i0, i1, Tensor5(Shape{2, 3, 1, 1, 5})), Error);
}

TEST_CASE("MOR block selects the OR branch or the second activation") {
  const ModelGraph model = testing::random_model(BillnetConfig::toy(), 5, 4);
  const MORBlock* block = nullptr;
  for (const Block& b : model.blocks)
    if (std::holds_alternative<MORBlock>(b) && !block) block = &std::get<MORBlock>(b);
  REQUIRE(block != nullptr);
  REQUIRE(!block->proj);
  const int c = block->in_channels();
  std::mt19937_64 rng(6);

  for (double density : {0.0, 0.1, 0.5, 0.9, 1.0}) {
    const Tensor5 x = random_bits(Shape{2, 4, 6, 8, c}, rng, density);
    Trace tr;
    const Tensor5 out = ref::mor_forward(x, *block, 4, TgapMode::kSampleMax, &tr);
    const Tensor5& sel = *find(tr, block->name + ".select");
    const Tensor5& orb = *find(tr, block->name + ".or");
    const Tensor5& act2 = *find(tr, block->name + ".act2");
    const Tensor5& act1 = *find(tr, block->name + ".act1");
    const Shape& s = x.shape();
    for (int n = 0; n < s.n; ++n)
      for (int t = 0; t < s.t; ++t)
        for (int ch = 0; ch < c; ++ch) {
          int ones = 0;
          for (int h = 0; h < s.h; ++h)
            for (int w = 0; w < s.w; ++w) ones += x.at(n, t, h, w, ch) != 0.0;
          const double want_sel = ones > s.h * s.w / 2 ? 1.0 : 0.0;
          REQUIRE(sel.at(n, t, 0, 0, ch) == want_sel);
          for (int h = 0; h < s.h; ++h)
            for (int w = 0; w < s.w; ++w) {
              const double o = std::max(act1.at(n, t, h, w, ch), x.at(n, t, h, w, ch));
              REQUIRE(orb.at(n, t, h, w, ch) == o);
              REQUIRE(out.at(n, t, h, w, ch) == (want_sel != 0.0 ? act2.at(n, t, h, w, ch) : o));
            }
        }
    for (double v : out.vec()) REQUIRE((v == 0.0 || v == 1.0));
    if (density == 0.0) CHECK(out == orb);
    if (density == 1.0) CHECK(out == act2);
  }
}

TEST_CASE("float LSTM matches a textbook cell") {
  std::mt19937_64 rng(7);
  LstmLayer l;
  l.n_in = 5;
  l.n_hidden = 3;
  l.input_divisor = 4;
  const int hn = 3;
  l.wx = random_real(ref::matrix_shape(5, 4 * hn), rng);
  l.wh = random_real(ref::matrix_shape(hn, 4 * hn), rng);
  l.bias = random_real(Shape{1, 1, 1, 1, 4 * hn}, rng);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor5 x = random_real(Shape{2, 1, 1, 1, 5}, rng, 0.0, 4.0);
    ref::LstmState prev{random_real(Shape{2, 1, 1, 1, hn}, rng), random_real(Shape{2, 1, 1, 1, hn}, rng)};
    const ref::LstmState got = ref::lstm_cell(x, prev, l, ref::LstmMode::kFloat);
    for (int n = 0; n < 2; ++n) {
      double pre[12];
      for (int j = 0; j < 4 * hn; ++j) {
        double a = l.bias[j];
        for (int k = 0; k < 5; ++k) a += x[n * 5 + k] / 4.0 * l.wx.at(0, 0, 0, k, j);
        for (int k = 0; k < hn; ++k) a += prev.h[n * hn + k] * l.wh.at(0, 0, 0, k, j);
        pre[j] = a;
      }
      for (int k = 0; k < hn; ++k) {
        const double i = sigmoid(pre[k]), f = sigmoid(pre[hn + k]), o = sigmoid(pre[2 * hn + k]);
        const double g = std::tanh(pre[3 * hn + k]);
        const double c = f * prev.c[n * hn + k] + i * g;
        REQUIRE(got.c[n * hn + k] == doctest::Approx(c).epsilon(1e-6));
        REQUIRE(got.h[n * hn + k] == doctest::Approx(o * std::tanh(c)).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("fully quantized LSTM cell") {
  LstmLayer l;
  l.n_in = 2;
  l.n_hidden = 2;
  l.input_divisor = 1;
  l.wx = Tensor5(ref::matrix_shape(2, 8), 1.0);
  l.wh = Tensor5(ref::matrix_shape(2, 8), 1.0);
  l.bias = Tensor5(Shape{1, 1, 1, 1, 8}, 100.0);  // ignored once quantized

  // All pre-activations zero: i=f=o=0, candidate -1, c=0, h=0.
  ref::LstmState zero{Tensor5(Shape{1, 1, 1, 1, 2}), Tensor5(Shape{1, 1, 1, 1, 2})};
  ref::LstmState s0 = ref::lstm_cell(Tensor5(Shape{1, 1, 1, 1, 2}), zero, l, ref::LstmMode::kFullyQuantized);
  for (int k = 0; k < 2; ++k) {
    CHECK(s0.c[k] == 0.0);
    CHECK(s0.h[k] == 0.0);
  }

  // f=1, c_prev=+1, i=1, candidate +1: c = clip(2) = +1.
  ref::LstmState one{Tensor5(Shape{1, 1, 1, 1, 2}), Tensor5(Shape{1, 1, 1, 1, 2}, 1.0)};
  ref::LstmState s1 = ref::lstm_cell(Tensor5(Shape{1, 1, 1, 1, 2}, 1.0), one, l, ref::LstmMode::kFullyQuantized);
  CHECK(s1.c[0] == 1.0);
  CHECK(s1.h[0] == 1.0);

  // Random ternary states against the substituted equations.
  std::mt19937_64 rng(8);
  LstmLayer r;
  r.n_in = 6;
  r.n_hidden = 4;
  r.input_divisor = 12;
  r.wx = random_real(ref::matrix_shape(6, 16), rng);
  r.wh = random_real(ref::matrix_shape(4, 16), rng);
  r.bias = random_real(Shape{1, 1, 1, 1, 16}, rng);
  std::uniform_int_distribution<int> count(0, 12);
  std::uniform_int_distribution<int> tri(-1, 1);
  for (int trial = 0; trial < 2000; ++trial) {
    Tensor5 x(Shape{1, 1, 1, 1, 6});
    for (auto& v : x.vec()) v = count(rng);
    ref::LstmState prev{Tensor5(Shape{1, 1, 1, 1, 4}), Tensor5(Shape{1, 1, 1, 1, 4})};
    for (auto& v : prev.h.vec()) v = tri(rng);
    for (auto& v : prev.c.vec()) v = tri(rng);
    const ref::LstmState got = ref::lstm_cell(x, prev, r, ref::LstmMode::kFullyQuantized);
    for (int k = 0; k < 4; ++k) {
      // Integer form: sum(x * sign) + divisor * sum(h * sign) compared with zero.
      std::int64_t pre[4];
      for (int gate = 0; gate < 4; ++gate) {
        const int j = gate * 4 + k;
        std::int64_t a = 0, b = 0;
        for (int q = 0; q < 6; ++q) a += static_cast<std::int64_t>(x[q]) * quant::sign_strict(r.wx.at(0, 0, 0, q, j));
        for (int q = 0; q < 4; ++q) b += static_cast<std::int64_t>(prev.h[q]) * quant::sign_strict(r.wh.at(0, 0, 0, q, j));
        pre[gate] = a + 12 * b;
      }
      const int i = pre[0] > 0, f = pre[1] > 0, o = pre[2] > 0;
      const int g = pre[3] > 0 ? 1 : -1;
      const int c = std::clamp(f * static_cast<int>(prev.c[k]) + i * g, -1, 1);
      REQUIRE(got.c[k] == c);
      REQUIRE(got.h[k] == o * c);
    }
  }
}

TEST_CASE("dense head and aggregation") {
  DenseLayer d;
  d.m = 2;
  std::mt19937_64 rng(9);
  d.weight = random_real(ref::matrix_shape(8, 5), rng);
  d.bias = Tensor5(Shape{1, 1, 1, 1, 5});
  double scale = 0.0;
  const Tensor5 z = ref::dense_head(Tensor5(Shape{1, 3, 1, 1, 8}), d, true, &scale);
  for (double v : z.vec()) CHECK(v == 0.0);
  CHECK(scale == doctest::Approx(1.0 / std::sqrt(8.0)));
  CHECK(argmax(ref::aggregate_logits(z)) == std::vector<int>{0});

  Tensor5 steps(Shape{2, 2, 1, 1, 3});
  steps.vec() = {1, 2, 3, 3, 2, 1, 0, 5, 0, 0, -1, 0};
  const Tensor5 mean = ref::aggregate_logits(steps);
  CHECK(mean.shape() == Shape{2, 1, 1, 1, 3});
  CHECK(mean.vec() == std::vector<double>{2, 2, 2, 0, 2, 0});
  CHECK(argmax(mean) == std::vector<int>{0, 1});
  Tensor5 scaled = mean;
  for (auto& v : scaled.vec()) v *= 0.37;
  CHECK(argmax(scaled) == argmax(mean));
}

TEST_CASE("class-temporal response at full scale is 8 x 27") {
  BillnetConfig cfg = BillnetConfig::full_scale();
  const ModelGraph model = build(cfg);
  const Shape f = final_feature_shape(model);
  CHECK(f.t == 8);
  CHECK(cfg.classes == 27);
}
