// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#include <random>
#include <set>

#include "billnet/bit_engine.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace billnet;

namespace {

std::optional<logic::Divergence> compare(const ModelGraph& model, const logic::GatePlan& plan, const Tensor5& codes) {
  const ref::RefOutput r = ref::run(model, codes, true);
  const logic::Execution e = logic::execute(plan, logic::to_codes(codes));
  auto div = logic::first_divergence(r.trace, logic::to_trace(plan, e));
  if (!div && e.predictions != r.predictions) div = logic::Divergence{"prediction"};
  return div;
}

TernTensor random_tern(const Shape& s, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> tri(-1, 1);
  Tensor5 x(s);
  for (auto& v : x.vec()) v = tri(rng);
  return pack_ternary(x);
}

}  // namespace

TEST_CASE("compile requires a fully quantized model") {
  for (int stage = 1; stage <= 4; ++stage) {
    const ModelGraph m = testing::random_model(BillnetConfig::toy(), 1, stage);
    try {
      logic::compile(m);
      FAIL("compiled a stage-" << stage << " model");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kNotFullyQuantized);
    }
  }
}

TEST_CASE("compiled plan holds only gate ops with integer thresholds") {
  const ModelGraph m = testing::random_model(BillnetConfig::toy(), 2, 5);
  const logic::GatePlan plan = logic::compile(m);
  std::set<std::string> names;
  std::vector<int> thresholds;
  for (const logic::Op& op : plan.ops) {
    names.insert(std::string(logic::op_name(op)));
    if (const auto* t = std::get_if<logic::TgapOp>(&op)) thresholds.push_back(t->threshold);
  }
  for (const auto& n : names) CHECK(n.find("norm") == std::string::npos);
  // MOR1 sees 6x8 maps, MOR2 3x4 maps.
  REQUIRE(thresholds.size() == 2);
  CHECK(thresholds[0] == 24);
  CHECK(thresholds[1] == 6);
  CHECK(!plan.describe().empty());
}

TEST_CASE("logic path equals reference path on zero and random inputs") {
  std::mt19937_64 rng(3);
  for (std::uint64_t seed = 10; seed < 16; ++seed) {
    const ModelGraph m = testing::random_model(BillnetConfig::toy(), seed, 5);
    const logic::GatePlan plan = logic::compile(m);
    for (auto kind : {testing::InputKind::kZero, testing::InputKind::kSparse, testing::InputKind::kUniform,
                      testing::InputKind::kDense}) {
      const Tensor5 codes = testing::random_codes(m.input_shape(2), rng, kind);
      const auto div = compare(m, plan, codes);
      INFO((div ? div->describe() : std::string("none")));
      CHECK(!div);
    }
  }
}

TEST_CASE("traces are compared label by label") {
  const ModelGraph m = testing::random_model(BillnetConfig::toy(), 4, 5);
  const logic::GatePlan plan = logic::compile(m);
  std::mt19937_64 rng(4);
  const Tensor5 codes = testing::random_codes(m.input_shape(1), rng);
  const ref::RefOutput r = ref::run(m, codes, true);
  const logic::Execution e = logic::execute(plan, logic::to_codes(codes));
  Trace lt = logic::to_trace(plan, e);
  CHECK(lt.size() >= 20);
  CHECK(!logic::first_divergence(r.trace, lt));

  Trace tampered = lt;
  auto it = std::find_if(tampered.begin(), tampered.end(), [](const auto& p) { return p.first == "lstm.c"; });
  REQUIRE(it != tampered.end());
  it->second[3] = it->second[3] == 1.0 ? 0.0 : 1.0;
  const auto div = logic::first_divergence(r.trace, tampered);
  REQUIRE(div);
  CHECK(div->label == "lstm.c");
  CHECK(div->index == 3);

  Trace extra = lt;
  extra.emplace_back("nowhere", Tensor5(Shape{1, 1, 1, 1, 1}));
  const auto missing = logic::first_divergence(r.trace, extra);
  REQUIRE(missing);
  CHECK(missing->index == -1);
}

TEST_CASE("every logic slot is bit, ternary or integer") {
  const ModelGraph m = testing::random_model(BillnetConfig::toy(), 6, 5);
  const logic::GatePlan plan = logic::compile(m);
  std::mt19937_64 rng(6);
  const logic::Execution e = logic::execute(plan, logic::to_codes(testing::random_codes(m.input_shape(1), rng)));
  int tern = 0;
  for (std::size_t i = 0; i < plan.slots.size(); ++i) {
    const logic::Slot& s = e.slots[i];
    switch (plan.slots[i].type) {
      case logic::SlotType::kBit: CHECK(std::holds_alternative<BitTensor>(s)); break;
      case logic::SlotType::kTern:
        CHECK(std::holds_alternative<TernTensor>(s));
        std::get<TernTensor>(s).check_disjoint();
        ++tern;
        break;
      case logic::SlotType::kInt: CHECK(std::holds_alternative<IntTensor>(s)); break;
    }
  }
  CHECK(tern >= 3);  // candidate, cell and hidden state
  // Between the input and the GAP every slot is binary.
  for (const logic::Op& op : plan.ops) {
    if (const auto* c = std::get_if<logic::PackedConvOp>(&op)) {
      CHECK(plan.slots[static_cast<std::size_t>(c->in)].type == logic::SlotType::kBit);
    }
  }
}

TEST_CASE("saturating ternary add") {
  const TernTensor a = pack_ternary(Tensor5(Shape{1, 1, 1, 1, 9}, std::vector<double>{-1, -1, -1, 0, 0, 0, 1, 1, 1}));
  const TernTensor b = pack_ternary(Tensor5(Shape{1, 1, 1, 1, 9}, std::vector<double>{-1, 0, 1, -1, 0, 1, -1, 0, 1}));
  const TernTensor s = logic::saturating_add(a, b);
  CHECK(unpack(s).vec() == std::vector<double>{-1, -1, 0, -1, 0, 1, 0, 1, 1});
  s.check_disjoint();
}

TEST_CASE("qlstm_step equals the scaled reference cell") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-1, 1);
  LstmLayer l;
  l.n_in = 16;
  l.n_hidden = 8;
  l.input_divisor = 12;
  l.wx = Tensor5(ref::matrix_shape(16, 32));
  l.wh = Tensor5(ref::matrix_shape(8, 32));
  l.bias = Tensor5(Shape{1, 1, 1, 1, 32});
  std::uniform_int_distribution<int> count(0, 12);
  for (int trial = 0; trial < 10000; ++trial) {
    if (trial % 500 == 0) {
      for (auto& v : l.wx.vec()) v = u(rng);
      for (auto& v : l.wh.vec()) v = u(rng);
    }
    const logic::QlstmWeights w = logic::pack_lstm(l);
    Tensor5 x(Shape{1, 1, 1, 1, 16});
    for (auto& v : x.vec()) v = count(rng);
    logic::QlstmState st{random_tern(Shape{1, 1, 1, 1, 8}, rng), random_tern(Shape{1, 1, 1, 1, 8}, rng)};
    const logic::QlstmState got = logic::qlstm_step(logic::to_codes(x), st, w, 12);
    const ref::LstmState want =
        ref::lstm_cell(x, ref::LstmState{unpack(st.h), unpack(st.c)}, l, ref::LstmMode::kFullyQuantized);
    REQUIRE(unpack(got.c) == want.c);
    REQUIRE(unpack(got.h) == want.h);
  }
}

TEST_CASE("qlstm state stays ternary over long sequences") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-1, 1);
  LstmLayer l;
  l.n_in = 12;
  l.n_hidden = 16;
  l.input_divisor = 4;
  l.wx = Tensor5(ref::matrix_shape(12, 64));
  l.wh = Tensor5(ref::matrix_shape(16, 64));
  for (auto& v : l.wx.vec()) v = u(rng);
  for (auto& v : l.wh.vec()) v = u(rng);
  l.bias = Tensor5(Shape{1, 1, 1, 1, 64});
  const logic::QlstmWeights w = logic::pack_lstm(l);
  std::uniform_int_distribution<int> count(0, 4);
  logic::QlstmState st{TernTensor(Shape{1, 1, 1, 1, 16}), TernTensor(Shape{1, 1, 1, 1, 16})};
  std::set<int> seen;
  for (int step = 0; step < 10000; ++step) {
    IntTensor x(Shape{1, 1, 1, 1, 12});
    for (auto& v : x.vec()) v = count(rng);
    st = logic::qlstm_step(x, st, w, 4);
    st.c.check_disjoint();
    st.h.check_disjoint();
    for (int k = 0; k < 16; ++k) {
      REQUIRE(std::abs(st.c.get(0, k)) <= 1);
      seen.insert(st.c.get(0, k));
    }
  }
  CHECK(seen.size() == 3);
}

TEST_CASE("qlstm step with every pre-activation at zero") {
  logic::QlstmWeights w;
  w.n_in = 2;
  w.n_hidden = 2;
  w.wx = BitTensor(Shape{1, 1, 1, 8, 2});
  w.wh = BitTensor(Shape{1, 1, 1, 8, 2});
  logic::QlstmStepDetail d;
  const logic::QlstmState s = logic::qlstm_step(
      IntTensor(Shape{1, 1, 1, 1, 2}),
      logic::QlstmState{TernTensor(Shape{1, 1, 1, 1, 2}), TernTensor(Shape{1, 1, 1, 1, 2})}, w, 1, &d);
  for (int k = 0; k < 2; ++k) {
    CHECK(s.c.get(0, k) == 0);
    CHECK(s.h.get(0, k) == 0);
    CHECK(d.g.get(0, k) == -1);
  }
}

TEST_CASE("full-scale plan emits an 8 x 27 class-temporal response") {
  const ModelGraph m = testing::random_model(BillnetConfig::full_scale(), 9, 5);
  const logic::GatePlan plan = logic::compile(m);
  std::mt19937_64 rng(9);
  const logic::Execution e =
      logic::execute(plan, logic::to_codes(testing::random_codes(m.input_shape(1), rng, testing::InputKind::kSparse)));
  CHECK(e.logits.shape() == Shape{1, 8, 1, 1, 27});
}
