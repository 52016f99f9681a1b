#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "oommix/baselines.hpp"
#include "oommix/corpus.hpp"

using namespace oommix;

namespace {

ModelConfig model_config() {
  ModelConfig c;
  c.encoder.layers = 3;
  c.encoder.dim = 8;
  c.encoder.heads = 2;
  c.encoder.max_len = 6;
  c.encoder.vocab = 20;
  c.encoder.classes = 3;
  c.encoder.dropout = 0.1;
  c.encoder.ffn_mult = 2;
  c.m_g = 1;
  c.m_d = 2;
  return c;
}

TokenSequence sequence(std::vector<std::uint32_t> tokens, std::size_t max_len) {
  TokenSequence s;
  s.length = tokens.size();
  s.ids.assign(max_len, kPadId);
  s.mask.assign(max_len, 0);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    s.ids[i] = tokens[i];
    s.mask[i] = 1;
  }
  return s;
}

struct Data {
  std::vector<TokenSequence> seqs;
  Batch batch;
  explicit Data(std::size_t max_len) {
    seqs = {sequence({3, 4, 5}, max_len), sequence({6, 7}, max_len),
            sequence({8, 9, 10, 11}, max_len), sequence({12}, max_len)};
    for (const auto& s : seqs) batch.tokens.push_back(&s);
    batch.labels = {0, 1, 2, 1};
  }
};

const std::vector<std::size_t> kPerm{1, 2, 3, 0};

MixStrategy strategy(MixStrategy::Kind k) {
  MixStrategy s;
  s.kind = k;
  return s;
}

/// P(X < x) for X ~ Beta(a, a) with a < 1. Substituting x = t^(1/a) makes
/// the integrand smooth: the mass below x is
/// (1/a) * integral_0^{x^a} (1 - t^(1/a))^(a-1) dt / B(a, a).
double beta_lower_mass(double a, double x) {
  const int n = 20000;
  const double top = std::pow(x, a);
  const double h = top / n;
  auto f = [&](double t) { return std::pow(1.0 - std::pow(t, 1.0 / a), a - 1.0); };
  double s = f(0.0) + f(top);
  for (int i = 1; i < n; ++i) s += (i % 2 ? 4.0 : 2.0) * f(i * h);
  return s * h / 3.0 / a / std::beta(a, a);
}

}  // namespace

TEST(MixStrategy, ParsesNamesAndValidates) {
  for (auto k : {MixStrategy::Kind::None, MixStrategy::Kind::FixedSentence,
                 MixStrategy::Kind::BetaHidden, MixStrategy::Kind::OomMix})
    EXPECT_EQ(MixStrategy::parse(MixStrategy::name(k)), k);
  EXPECT_THROW(MixStrategy::parse("nonlinear"), std::invalid_argument);

  MixStrategy s;
  s.fixed_lambda = 1.5;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = MixStrategy{};
  s.beta_a = 0.0;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  EXPECT_NO_THROW(MixStrategy{}.validate());
}

TEST(FixedSentence, Examples) {
  Graph<double> g;
  Tensor<double> a({2, 3}), b({2, 3});
  for (std::size_t i = 0; i < 6; ++i) {
    a[i] = 0.1 * double(i) - 0.2;
    b[i] = 1.0 - 0.3 * double(i);
  }
  Var<double> s1 = g.constant(a), s2 = g.constant(b);
  EXPECT_EQ(fixed_sentence_mixup(s1, s1).value().data, a.data);
  const std::vector<double> forward = fixed_sentence_mixup(s1, s2).value().data;
  const std::vector<double> swapped = fixed_sentence_mixup(s2, s1).value().data;
  EXPECT_EQ(forward, swapped);
  const auto y = mix_labels(0, 1, 0.5, 2);
  EXPECT_EQ(y, (std::vector<double>{0.5, 0.5}));
}

TEST(BetaSampler, StrictlyInsideTheUnitInterval) {
  Rng rng = make_rng(3, Stream::Mixing);
  for (double a : {0.05, 0.1, 1.0, 2.5})
    for (int i = 0; i < 20000; ++i) {
      const double v = sample_beta(a, a, rng);
      ASSERT_GT(v, 0.0);
      ASSERT_LT(v, 1.0);
    }
  EXPECT_THROW(sample_beta(0.0, 1.0, rng), std::invalid_argument);
  EXPECT_THROW(sample_beta(1.0, -1.0, rng), std::invalid_argument);
}

TEST(BetaSampler, SmallShapeIsBimodal) {
  const double a = 0.05;
  const double tail = 2.0 * beta_lower_mass(a, 0.1);
  EXPECT_GT(tail, 0.85);
  Rng rng = make_rng(4, Stream::Mixing);
  const int n = 100000;
  int hits = 0;
  for (int i = 0; i < n; ++i) {
    const double v = sample_beta(a, a, rng);
    hits += (v < 0.1 || v > 0.9);
  }
  const double p = double(hits) / n;
  EXPECT_GT(p, 0.85);
  EXPECT_NEAR(p, tail, 4.0 * std::sqrt(tail * (1 - tail) / n));
}

TEST(BetaSampler, MomentsMatchTheAnalyticValues) {
  for (double a : {0.05, 0.1, 0.7, 3.0}) {
    Rng rng = make_rng(5, Stream::Mixing, static_cast<std::uint64_t>(a * 100));
    const int n = 100000;
    double sum = 0, sq = 0;
    for (int i = 0; i < n; ++i) {
      const double v = sample_beta(a, a, rng);
      sum += v;
      sq += v * v;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    EXPECT_NEAR(mean, 0.5, 0.01) << a;
    EXPECT_NEAR(var, 1.0 / (4.0 * (2.0 * a + 1.0)), 0.01) << a;
  }
}

TEST(BetaSampler, AsymmetricMean) {
  Rng rng = make_rng(6, Stream::Mixing);
  const int n = 100000;
  double sum = 0;
  for (int i = 0; i < n; ++i) sum += sample_beta(2.0, 5.0, rng);
  EXPECT_NEAR(sum / n, 2.0 / 7.0, 0.005);
}

TEST(BetaHidden, SelfMixReturnsTheInput) {
  Graph<double> g;
  Tensor<double> a({1, 2, 2});
  for (std::size_t i = 0; i < 4; ++i) a[i] = double(i) - 1.5;
  Tensor<double> m({1, 2});
  m[0] = 1;
  ContextualEmbedding<double> h{1, g.constant(a), m};
  Rng rng(1);
  const auto r = beta_hidden_mixup(h, h, 1, 1, 3, 0.1, rng);
  EXPECT_GT(r.lambda, 0.0);
  EXPECT_LT(r.lambda, 1.0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(r.mixed.matrix.value()[i], a[i], 1e-15);
  EXPECT_EQ(r.mixed_label, (std::vector<double>{0, 1, 0}));
  EXPECT_THROW(beta_hidden_mixup(h, h, 0, 1, 3, 0.0, rng), std::invalid_argument);
}

TEST(Dispatch, NoneYieldsClassificationLossOnly) {
  Model<double> m(model_config(), 1);
  Data d(m.config().encoder.max_len);
  Graph<double> g;
  Rng a(0), b(1);
  auto r = strategy_dispatch(g, m, strategy(MixStrategy::Kind::None), d.batch, kPerm, 1.0, a, b);
  EXPECT_GT(r.bundle.l_c, 0.0);
  EXPECT_EQ(r.bundle.l_g, 0.0);
  EXPECT_EQ(r.bundle.l_d, 0.0);
  EXPECT_FALSE(r.l_g.valid());
  EXPECT_TRUE(r.mixes.empty());
}

TEST(Dispatch, OomMixDelegatesToComputeLosses) {
  Model<double> m(model_config(), 2);
  Data d(m.config().encoder.max_len);
  Graph<double> g1, g2;
  Rng a1 = make_rng(3, Stream::Dropout), b1 = make_rng(3, Stream::Mixing);
  Rng a2 = make_rng(3, Stream::Dropout), b2 = make_rng(3, Stream::Mixing);
  auto r1 = strategy_dispatch(g1, m, strategy(MixStrategy::Kind::OomMix), d.batch, kPerm, 0.4,
                              a1, b1);
  auto r2 = compute_losses(g2, m, d.batch, kPerm, 0.4, a2, b2);
  EXPECT_EQ(r1.bundle.l_c, r2.bundle.l_c);
  EXPECT_EQ(r1.bundle.l_g, r2.bundle.l_g);
  EXPECT_EQ(r1.bundle.l_d, r2.bundle.l_d);
  EXPECT_EQ(r1.bundle.total, r2.bundle.total);
  ASSERT_EQ(r1.mixes.size(), r2.mixes.size());
  for (std::size_t i = 0; i < r1.mixes.size(); ++i)
    EXPECT_EQ(r1.mixes[i].lambda, r2.mixes[i].lambda);
}

TEST(Dispatch, FixedSentenceHasNoDiscriminationLoss) {
  Model<double> m(model_config(), 3);
  Data d(m.config().encoder.max_len);
  for (std::uint64_t s = 0; s < 3; ++s) {
    Graph<double> g;
    Rng a(s), b(s + 10);
    auto r = strategy_dispatch(g, m, strategy(MixStrategy::Kind::FixedSentence), d.batch, kPerm,
                               1.0, a, b);
    EXPECT_EQ(r.bundle.l_d, 0.0);
    EXPECT_GT(r.bundle.l_g, 0.0);
    EXPECT_DOUBLE_EQ(r.bundle.total, r.bundle.l_c + r.bundle.l_g);
    for (const auto& x : r.mixes) EXPECT_EQ(x.lambda, 0.5);
    EXPECT_EQ(r.mixes[1].mixed_label, (std::vector<double>{0, 0.5, 0.5}));
  }
}

TEST(Dispatch, ManualBaselinesNeverTouchGeneratorOrDiscriminator) {
  for (auto k : {MixStrategy::Kind::FixedSentence, MixStrategy::Kind::BetaHidden}) {
    Model<double> m(model_config(), 4);
    Data d(m.config().encoder.max_len);
    Graph<double> g;
    Rng a(0), b(1);
    apply_gradients(g, strategy_dispatch(g, m, strategy(k), d.batch, kPerm, 1.0, a, b));
    for (std::size_t i = 0; i < m.params().size(); ++i) {
      const auto& p = m.params()[i];
      if (p.group != ParamGroup::Generator && p.group != ParamGroup::Discriminator) continue;
      for (double v : p.value.grad) ASSERT_EQ(v, 0.0) << p.name;
    }
  }
}

TEST(Dispatch, BetaHiddenMixesAtTheConfiguredLayer) {
  Model<double> m(model_config(), 5);
  Data d(m.config().encoder.max_len);
  auto s = strategy(MixStrategy::Kind::BetaHidden);
  s.beta_a = 0.1;
  for (std::size_t layer : {0u, 1u, 2u, 3u}) {
    s.layer = layer;
    Graph<double> g;
    Rng a(0), b(1);
    auto r = strategy_dispatch(g, m, s, d.batch, kPerm, 1.0, a, b);
    ASSERT_EQ(r.mixes.size(), 4u);
    for (const auto& x : r.mixes) {
      EXPECT_GT(x.lambda, 0.0);
      EXPECT_LT(x.lambda, 1.0);
    }
    EXPECT_GT(r.bundle.l_g, 0.0);
  }
  s.layer = 4;
  Graph<double> g;
  Rng a(0), b(1);
  EXPECT_THROW(strategy_dispatch(g, m, s, d.batch, kPerm, 1.0, a, b), std::invalid_argument);
}

TEST(Dispatch, SymmetrizedBetaKeepsTheLargerCoefficient) {
  Model<double> m(model_config(), 6);
  Data d(m.config().encoder.max_len);
  auto s = strategy(MixStrategy::Kind::BetaHidden);
  s.beta_symmetrize = true;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Graph<double> g;
    Rng a(seed), b(seed + 50);
    for (const auto& x : strategy_dispatch(g, m, s, d.batch, kPerm, 1.0, a, b).mixes)
      EXPECT_GE(x.lambda, 0.5);
  }
}

TEST(Dispatch, StrategiesShareTheBatchStream) {
  // The classification loss only depends on the batch and dropout draws, so
  // it is identical across strategies for identical seeds in eval mode.
  Model<double> m(model_config(), 7);
  Data d(m.config().encoder.max_len);
  std::vector<double> lc;
  for (auto k : {MixStrategy::Kind::None, MixStrategy::Kind::FixedSentence,
                 MixStrategy::Kind::BetaHidden, MixStrategy::Kind::OomMix}) {
    Graph<double> g;
    Rng a(0), b(1);
    lc.push_back(strategy_dispatch(g, m, strategy(k), d.batch, kPerm, 1.0, a, b, false).bundle.l_c);
  }
  for (double v : lc) EXPECT_NEAR(v, lc[0], 1e-12);
}
