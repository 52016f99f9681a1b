#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "oommix/gradcheck.hpp"
#include "oommix/gradcheck_suite.hpp"
#include "oommix/ops.hpp"

using namespace oommix;
using Tn = Tensor<double>;

namespace {

Tn random_tensor(const Shape& s, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> nd(0.0, sd);
  Tn t(s);
  for (auto& v : t.data) v = nd(rng);
  return t;
}

std::vector<double> random_simplex(std::size_t c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::vector<double> p(c);
  double s = 0;
  for (auto& v : p) s += (v = u(rng));
  for (auto& v : p) v /= s;
  return p;
}

}  // namespace

TEST(Tensor, ShapeMustMatchBuffer) {
  EXPECT_THROW(Tn({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tn({2, 0}), ShapeError);
  Tn t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.data[5], 1.5);
}

TEST(Ops, SoftmaxOfEqualLogitsIsUniform) {
  Graph<double> g;
  auto y = ops::softmax(g.constant(Tn({3}, 0.0)));
  for (double v : y.value().data) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Ops, SoftmaxRowsAreDistributions) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 1 + trial % 5, cols = 1 + trial % 7;
    Graph<double> g;
    auto y = ops::softmax(g.constant(random_tensor({rows, cols}, rng, 10.0)));
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < cols; ++c) {
        const double v = y.value()[r * cols + c];
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Ops, SoftmaxOverLeadingAxis) {
  Graph<double> g;
  auto y = ops::softmax(g.constant(Tn({2, 2}, {0.0, 1.0, 0.0, 1.0})), 0);
  for (double v : y.value().data) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Ops, IdentityMatmulKeepsInput) {
  std::mt19937_64 rng(1);
  Tn eye({3, 3}, 0.0);
  for (std::size_t i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  const Tn x = random_tensor({3, 5}, rng);
  Graph<double> g;
  auto y = ops::matmul(g.constant(eye), g.constant(x));
  EXPECT_EQ(y.value().shape, x.shape);
  EXPECT_EQ(y.value().data, x.data);
}

TEST(Ops, MatmulMatchesLoopOracle) {
  std::mt19937_64 rng(2);
  const Tn a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 5, 4}, rng);
  Graph<double> g;
  auto y = ops::matmul(g.constant(a), g.constant(b), false, true);
  ASSERT_EQ(y.value().shape, (Shape{2, 3, 5}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < 4; ++k) s += a[(n * 3 + i) * 4 + k] * b[(n * 5 + j) * 4 + k];
        EXPECT_NEAR(y.value()[(n * 3 + i) * 5 + j], s, 1e-12);
      }
}

TEST(Ops, CombineWithUnitAndZeroWeightsReturnsFirstInput) {
  std::mt19937_64 rng(3);
  const Tn x = random_tensor({4, 2}, rng), y = random_tensor({4, 2}, rng);
  Graph<double> g;
  auto z = ops::combine(1.0, g.constant(x), 0.0, g.constant(y));
  EXPECT_EQ(z.value().data, x.data);
}

TEST(Ops, BroadcastAddOfSuffixAndUnitAxis) {
  Graph<double> g;
  auto a = g.constant(Tn({2, 3}, {1, 2, 3, 4, 5, 6}));
  auto row = ops::add(a, g.constant(Tn({3}, {10, 20, 30})));
  EXPECT_EQ(row.value().data, (std::vector<double>{11, 22, 33, 14, 25, 36}));
  auto col = ops::mul(a, g.constant(Tn({2, 1}, {2, -1})));
  EXPECT_EQ(col.value().data, (std::vector<double>{2, 4, 6, -4, -5, -6}));
}

TEST(Ops, ShapeMismatchNamesPrimitiveAndShapes) {
  Graph<double> g;
  auto a = g.constant(Tn({2, 3}, 0.0));
  auto b = g.constant(Tn({4}, 0.0));
  try {
    ops::add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos) << msg;
    EXPECT_NE(msg.find('2'), std::string::npos) << msg;
    EXPECT_NE(msg.find('4'), std::string::npos) << msg;
  }
  EXPECT_THROW(ops::matmul(a, g.constant(Tn({2, 3}, 0.0))), ShapeError);
  EXPECT_THROW(ops::concat<double>({a, g.constant(Tn({3, 3}, 0.0))}), ShapeError);
}

TEST(Ops, GeluIsExactErfForm) {
  Graph<double> g;
  auto y = ops::gelu(g.constant(Tn({3}, {-1.0, 0.0, 1.0})));
  EXPECT_NEAR(y.value()[2], 0.8413447460685429, 1e-15);
  EXPECT_NEAR(y.value()[0], -0.15865525393145707, 1e-15);
  EXPECT_EQ(y.value()[1], 0.0);
}

TEST(Ops, LayerNormNormalizesLastAxis) {
  std::mt19937_64 rng(4);
  Graph<double> g;
  auto y = ops::layer_norm(g.constant(random_tensor({3, 8}, rng, 4.0)),
                           g.constant(Tn({8}, 1.0)), g.constant(Tn({8}, 0.0)));
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 8; ++c) m += y.value()[r * 8 + c] / 8;
    for (std::size_t c = 0; c < 8; ++c) v += std::pow(y.value()[r * 8 + c] - m, 2) / 8;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-5);
  }
}

TEST(Ops, GatherMaskedFillConcatSlice) {
  Graph<double> g;
  auto table = g.constant(Tn({3, 2}, {0, 1, 10, 11, 20, 21}));
  auto rows = ops::gather_rows(table, {2, 0, 2});
  EXPECT_EQ(rows.value().data, (std::vector<double>{20, 21, 0, 1, 20, 21}));
  // The mask marks entries to keep.
  auto filled = ops::masked_fill(table, Tn({3, 2}, {0, 1, 1, 1, 1, 0}), -5.0);
  EXPECT_EQ(filled.value().data, (std::vector<double>{-5, 1, 10, 11, 20, -5}));
  auto cat = ops::concat<double>({table, rows});
  EXPECT_EQ(cat.value().shape, (Shape{3, 4}));
  EXPECT_EQ(cat.value()[2], 20.0);
  auto sl = ops::slice(cat, -1, 2, 4);
  EXPECT_EQ(sl.value().data, rows.value().data);
}

TEST(Ops, DropoutIsIdentityInEvaluation) {
  std::mt19937_64 rng(5);
  const Tn x = random_tensor({6, 7}, rng);
  Graph<double> g;
  Rng drop(9);
  auto y = ops::dropout(g.constant(x), 0.5, drop, false);
  EXPECT_EQ(y.value().data, x.data);
}

TEST(Ops, DropoutUsesInvertedScaling) {
  Graph<double> g;
  Rng drop(11);
  const std::size_t n = 20000;
  auto y = ops::dropout(g.constant(Tn({n}, 1.0)), 0.25, drop, true);
  std::size_t zeros = 0;
  for (double v : y.value().data) {
    if (v == 0.0) ++zeros;
    else EXPECT_DOUBLE_EQ(v, 1.0 / 0.75);
  }
  // Binomial(20000, 0.25) has sd 61; allow 5 sd.
  EXPECT_NEAR(static_cast<double>(zeros), 5000.0, 310.0);
}

TEST(Loss, KlOfIdenticalOneHotIsZero) {
  Graph<double> g;
  auto e = g.constant(Tn({1, 3}, {0, 1, 0}));
  EXPECT_EQ(ops::kl_div(e, e).value()[0], 0.0);
}

TEST(Loss, KlOfHalfAgainstOneHotIsLn2) {
  Graph<double> g;
  auto kl = ops::kl_div(g.constant(Tn({1, 2}, {0.5, 0.5})), g.constant(Tn({1, 2}, {1, 0})));
  EXPECT_NEAR(kl.value()[0], std::numbers::ln2, 1e-15);
}

TEST(Loss, KlMatchesScalarOracle) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t c = 2 + trial % 6;
    const auto p = random_simplex(c, rng), t = random_simplex(c, rng);
    double oracle = 0;
    for (std::size_t i = 0; i < c; ++i) oracle += t[i] * (std::log(t[i]) - std::log(p[i]));
    Graph<double> g;
    auto kl = ops::kl_div(g.constant(Tn({1, c}, p)), g.constant(Tn({1, c}, t)));
    EXPECT_NEAR(kl.value()[0], oracle, 1e-10);
    EXPECT_GE(kl.value()[0], 0.0);
  }
}

TEST(Loss, KlRejectsUnnormalizedRows) {
  Graph<double> g;
  EXPECT_THROW(ops::kl_div(g.constant(Tn({1, 2}, {0.5, 0.6})), g.constant(Tn({1, 2}, {1, 0}))),
               std::invalid_argument);
  EXPECT_THROW(ops::kl_div(g.constant(Tn({1, 2}, {1.5, -0.5})), g.constant(Tn({1, 2}, {1, 0}))),
               std::invalid_argument);
}

TEST(Loss, BceReferencePoints) {
  Graph<double> g;
  auto half = g.constant(Tn({1}, {0.5}));
  EXPECT_NEAR(ops::bce(half, {1.0}).value()[0], 0.693, 1e-3);
  EXPECT_NEAR(ops::bce(half, {0.0}).value()[0], std::numbers::ln2, 1e-15);
  const double sure = ops::bce(g.constant(Tn({1}, {1.0})), {1.0}).value()[0];
  EXPECT_GE(sure, 0.0);
  EXPECT_LT(sure, 1e-11);
  EXPECT_NEAR(ops::bce(g.constant(Tn({1}, {0.9})), {0.0}).value()[0], -std::log(0.1), 1e-12);
}

TEST(Backward, SquareAtThreeHasGradientSix) {
  ParamStore<double> store;
  auto& x = store.add("x", ParamGroup::ClassifierHead, Tn({1}, {3.0}));
  Graph<double> g;
  auto v = g.param(x);
  g.backward(ops::mul(v, v), GroupMask::all());
  EXPECT_EQ(x.value.grad[0], 6.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  ParamStore<double> store;
  auto& x = store.add("x", ParamGroup::ClassifierHead, Tn({2}, {1.0, 2.0}));
  Graph<double> g;
  EXPECT_THROW(g.backward(g.param(x), GroupMask::all()), ShapeError);
}

TEST(Backward, RestrictedGroupsNeverReceiveGradient) {
  std::mt19937_64 rng(8);
  for (std::uint8_t bits = 0; bits < (1u << kNumParamGroups); ++bits) {
    ParamStore<double> store;
    std::vector<Parameter<double>*> ps;
    for (std::size_t k = 0; k < kNumParamGroups; ++k)
      ps.push_back(&store.add("p" + std::to_string(k), static_cast<ParamGroup>(k),
                              random_tensor({3, 3}, rng)));
    Graph<double> g;
    auto h = g.constant(random_tensor({2, 3}, rng));
    for (auto* p : ps) h = ops::gelu(ops::matmul(h, g.param(*p)));
    const auto mask = GroupMask::from_bits(bits);
    g.backward(ops::mean_all(h), mask);
    for (auto* p : ps) {
      double mag = 0;
      for (double v : p->value.grad) mag += std::abs(v);
      if (mask.contains(p->group)) EXPECT_GT(mag, 0.0) << p->name;
      else EXPECT_EQ(mag, 0.0) << p->name << " bits " << int(bits);
    }
  }
}

TEST(Backward, ComposedMlpMatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  ParamStore<double> store;
  auto& w1 = store.add("w1", ParamGroup::EncoderBelowMg, random_tensor({4, 6}, rng, 0.7));
  auto& b1 = store.add("b1", ParamGroup::EncoderBelowMg, random_tensor({6}, rng));
  auto& w2 = store.add("w2", ParamGroup::ClassifierHead, random_tensor({6, 3}, rng, 0.7));
  const Tn x = random_tensor({5, 4}, rng);
  const Tn target({5, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1, 0.5, 0.5, 0, 0.2, 0.3, 0.5});
  auto r = grad_check<double>(
      [&](Graph<double>& g) {
        auto h = ops::gelu(ops::add(ops::matmul(g.constant(x), g.param(w1)), g.param(b1)));
        auto p = ops::softmax(ops::matmul(h, g.param(w2)));
        return ops::kl_div(p, g.constant(target));
      },
      {&w1, &b1, &w2});
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
  EXPECT_EQ(r.checked, 24u + 6u + 18u);
}

TEST(GradCheck, LayerNormOnRandom4x8) {
  std::mt19937_64 rng(12);
  ParamStore<double> store;
  auto& x = store.add("x", ParamGroup::ClassifierHead, random_tensor({4, 8}, rng));
  auto& gain = store.add("gain", ParamGroup::ClassifierHead, random_tensor({8}, rng));
  auto& bias = store.add("bias", ParamGroup::ClassifierHead, random_tensor({8}, rng));
  const Tn w = random_tensor({4, 8}, rng);
  auto r = grad_check<double>(
      [&](Graph<double>& g) {
        return ops::mean_all(ops::mul(
            ops::layer_norm(g.param(x), g.param(gain), g.param(bias)), g.constant(w)));
      },
      {&x, &gain, &bias});
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(GradCheck, SoftmaxKlChain) {
  std::mt19937_64 rng(13);
  ParamStore<double> store;
  auto& z = store.add("z", ParamGroup::ClassifierHead, random_tensor({3, 5}, rng));
  Tn t({3, 5});
  for (std::size_t r = 0; r < 3; ++r) {
    const auto p = random_simplex(5, rng);
    std::copy(p.begin(), p.end(), t.data.begin() + static_cast<std::ptrdiff_t>(r * 5));
  }
  auto r = grad_check<double>(
      [&](Graph<double>& g) { return ops::kl_div(ops::softmax(g.param(z)), g.constant(t)); },
      {&z});
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(GradCheck, ConstantFunctionHasZeroGradients) {
  ParamStore<double> store;
  auto& x = store.add("x", ParamGroup::ClassifierHead, Tn({3}, {1, 2, 3}));
  auto r = grad_check<double>(
      [&](Graph<double>& g) {
        auto v = g.param(x);
        return ops::add(ops::mean_all(ops::scale(v, 0.0)), g.constant(Tn::scalar(4.0)));
      },
      {&x});
  EXPECT_EQ(r.max_rel_error, 0.0);
  EXPECT_EQ(r.max_abs_analytic, 0.0);
  EXPECT_EQ(r.worst_numeric, 0.0);
}

TEST(GradCheck, RejectsNondeterministicFunction) {
  ParamStore<double> store;
  auto& x = store.add("x", ParamGroup::ClassifierHead, Tn({16}, 1.0));
  Rng drop(3);
  EXPECT_THROW(grad_check<double>(
                   [&](Graph<double>& g) {
                     return ops::mean_all(ops::dropout(g.param(x), 0.5, drop, true));
                   },
                   {&x}),
               std::runtime_error);
}

TEST(GradCheck, ExtendedReferenceAgreesWithSamePrecisionCheck) {
  std::mt19937_64 rng(14);
  const Tn init = random_tensor({3, 4}, rng);
  ParamStore<double> lo;
  ParamStore<long double> hi;
  auto& x = lo.add("x", ParamGroup::ClassifierHead, init);
  auto& xh = hi.add("x", ParamGroup::ClassifierHead, Tensor<long double>({3, 4}, 0.0L));
  auto f = [](auto& g, auto& p) { return ops::mean_all(ops::exp(ops::softmax(g.param(p)))); };
  auto r = grad_check_ref<double, long double>(
      [&](Graph<double>& g) { return f(g, x); }, {&x},
      [&](Graph<long double>& g) { return f(g, xh); }, {&xh}, 1e-5L);
  EXPECT_LT(r.max_rel_error, 1e-6);
  EXPECT_EQ(xh.value.data[5], static_cast<long double>(init.data[5]));
}

TEST(Determinism, RepeatedForwardBackwardIsBitIdentical) {
  auto run = [] {
    std::mt19937_64 rng(15);
    ParamStore<double> store;
    auto& w = store.add("w", ParamGroup::EncoderBelowMg, random_tensor({5, 5}, rng));
    Graph<double> g;
    Rng drop(2);
    auto h = ops::dropout(ops::gelu(ops::matmul(g.constant(random_tensor({4, 5}, rng)),
                                                g.param(w))),
                          0.3, drop, true);
    auto loss = ops::mean_all(ops::softmax(h));
    g.backward(loss, GroupMask::all());
    auto out = w.value.grad;
    out.push_back(loss.value()[0]);
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheckSuite, EveryPrimitiveAndBlockPassesOnFewInstances) {
  const auto rows = run_gradcheck_suite(2, 99);
  EXPECT_GE(rows.size(), 27u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.instances, 2u) << r.name;
    EXPECT_GT(r.entries, 0u) << r.name;
    EXPECT_LT(r.max_rel_error, 1e-4) << r.name;
  }
}
