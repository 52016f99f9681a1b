#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include <Eigen/Eigenvalues>
#include <gtest/gtest.h>

#include "oommix/analysis.hpp"

using namespace oommix;

namespace {

std::vector<LambdaLogRecord> log_of(const std::vector<std::pair<std::size_t, double>>& xs) {
  std::vector<LambdaLogRecord> log;
  for (auto [step, lam] : xs) {
    LambdaLogRecord r;
    r.step = step;
    r.lambda = lam;
    log.push_back(r);
  }
  return log;
}

double gaussian(Rng& rng) {
  // Box-Muller; uniform01 never returns 1, so 1 - u is positive.
  const double u1 = 1.0 - uniform01(rng), u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

PointSet gaussian_cloud(std::size_t n, const std::vector<double>& sd, std::uint64_t seed) {
  Rng rng(seed);
  PointSet pts(n, std::vector<double>(sd.size()));
  for (auto& p : pts)
    for (std::size_t j = 0; j < sd.size(); ++j) p[j] = sd[j] * gaussian(rng);
  return pts;
}

Eigen::MatrixXd pairwise(const Eigen::MatrixXd& x) {
  const auto n = x.rows();
  Eigen::MatrixXd d(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) d(i, j) = (x.row(i) - x.row(j)).norm();
  return d;
}

/// Classical MDS through Eigen's dense symmetric solver.
Eigen::MatrixXd reference_mds(const Eigen::MatrixXd& dist, int dim) {
  const auto n = dist.rows();
  const Eigen::MatrixXd j =
      Eigen::MatrixXd::Identity(n, n) - Eigen::MatrixXd::Constant(n, n, 1.0 / double(n));
  const Eigen::MatrixXd b = -0.5 * j * dist.array().square().matrix() * j;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(b);
  Eigen::MatrixXd out(n, dim);
  for (int c = 0; c < dim; ++c) {
    const auto idx = n - 1 - c;  // ascending order
    out.col(c) = es.eigenvectors().col(idx) * std::sqrt(std::max(0.0, es.eigenvalues()(idx)));
  }
  return out;
}

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size(); ++i) r[order[i]] = double(i);
  return r;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ra = ranks(a), rb = ranks(b);
  const double n = double(a.size()), mean = (n - 1) / 2;
  double num = 0, da = 0, db = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (ra[i] - mean) * (rb[i] - mean);
    da += (ra[i] - mean) * (ra[i] - mean);
    db += (rb[i] - mean) * (rb[i] - mean);
  }
  return num / std::sqrt(da * db);
}

RunConfig tiny_run() {
  RunConfig rc;
  rc.seed = 3;
  rc.synth.classes = 2;
  rc.synth.q = 0.6;
  rc.synth.vocab = 30;
  rc.synth.length = 8;
  rc.synth.train = 48;
  rc.synth.valid = 16;
  rc.synth.test = 24;
  rc.model.encoder.layers = 3;
  rc.model.encoder.dim = 8;
  rc.model.encoder.heads = 2;
  rc.model.encoder.max_len = 8;
  rc.model.encoder.vocab = 100;
  rc.model.encoder.ffn_mult = 2;
  rc.model.m_g = 1;
  rc.model.m_d = 2;
  rc.train.batch = 8;
  rc.train.warmup_steps = 5;
  rc.train.eval_every = 5;
  rc.train.max_steps = 10;
  return rc;
}

}  // namespace

TEST(Histogram, ConstantLambdaFillsOneBinPerPhase) {
  auto log = log_of({{1, 0.5}, {2, 0.5}, {3, 0.5}, {4, 0.5}, {5, 0.5}});
  auto h = lambda_histogram(log);
  ASSERT_EQ(h.edges.size(), 21u);
  EXPECT_DOUBLE_EQ(h.midpoint, 3.0);
  EXPECT_EQ(h.totals, (std::vector<std::size_t>{3, 2}));
  for (std::size_t p = 0; p < 2; ++p)
    for (std::size_t b = 0; b < 20; ++b) {
      const bool holds = h.edges[b] <= 0.5 && 0.5 < h.edges[b + 1];
      EXPECT_EQ(h.counts[p][b], holds ? h.totals[p] : 0u) << p << " " << b;
    }
}

TEST(Histogram, EndpointsLandInTheOuterBins) {
  auto h = lambda_histogram(log_of({{1, 0.0}, {1, 1.0}, {2, 0.999}}), 4);
  EXPECT_EQ(h.counts[0][0], 1u);
  EXPECT_EQ(h.counts[0][3], 1u);
  EXPECT_EQ(h.counts[1][3], 1u);
  EXPECT_THROW(lambda_histogram({}), std::invalid_argument);
}

TEST(Histogram, UniformDrawsWithinFourSigma) {
  Rng rng(17);
  std::vector<std::pair<std::size_t, double>> xs;
  const std::size_t n = 10000;
  for (std::size_t i = 0; i < n; ++i) xs.push_back({i + 1, uniform01(rng)});
  auto h = lambda_histogram(log_of(xs));
  std::size_t total = 0;
  const double p = 1.0 / 20, sigma = std::sqrt(double(n) * p * (1 - p));
  for (std::size_t b = 0; b < 20; ++b) {
    const std::size_t c = h.counts[0][b] + h.counts[1][b];
    total += c;
    EXPECT_LT(std::abs(double(c) - 500.0), 4 * sigma) << b;
  }
  EXPECT_EQ(total, n);
  for (std::size_t ph = 0; ph < 2; ++ph) {
    std::size_t s = 0;
    for (auto c : h.counts[ph]) s += c;
    EXPECT_EQ(s, h.totals[ph]);
  }
}

TEST(Median, Examples) {
  EXPECT_EQ(median({0.1, 0.9, 0.5}), 0.5);
  EXPECT_DOUBLE_EQ(median({0.4, 0.2}), 0.3);
  EXPECT_EQ(median({0.7}), 0.7);
  EXPECT_THROW(median({}), std::invalid_argument);
}

TEST(Median, PerPhase) {
  auto log = log_of({{1, 0.1}, {1, 0.5}, {2, 0.9}, {9, 0.2}, {10, 0.4}});
  EXPECT_EQ(median_lambda(log, 0), 0.5);
  EXPECT_DOUBLE_EQ(median_lambda(log, 1), 0.3);
  auto one = log_of({{4, 0.3}});
  EXPECT_EQ(median_lambda(one, 0), 0.3);
  EXPECT_THROW(median_lambda(one, 1), std::invalid_argument);
}

TEST(EigenSolver, MatchesDenseSolverWithSmallResiduals) {
  Rng rng(3);
  for (int n : {4, 10, 25}) {
    Eigen::MatrixXd m(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) m(i, j) = uniform01(rng) - 0.5;
    const Eigen::MatrixXd a = m + m.transpose();
    const int k = std::min(n, 5);
    auto eig = top_eigenpairs(a, static_cast<std::size_t>(k));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
    for (int j = 0; j < k; ++j) {
      EXPECT_NEAR(eig.values[j], es.eigenvalues()(n - 1 - j), 1e-7 * eig.norm) << n << " " << j;
      EXPECT_LE(eig.residuals[j], 1e-6 * eig.norm);
      const Eigen::VectorXd v = eig.vectors.col(j);
      EXPECT_LE((a * v - eig.values[j] * v).norm(), 1e-6 * a.norm());
    }
  }
}

TEST(EigenSolver, RejectsBadInput) {
  Eigen::MatrixXd a(2, 3);
  a.setZero();
  EXPECT_THROW(top_eigenpairs(a, 1), std::invalid_argument);
  Eigen::MatrixXd b(2, 2);
  b << 1, 2, 0, 1;
  EXPECT_THROW(top_eigenpairs(b, 1), std::invalid_argument);
  EXPECT_THROW(top_eigenpairs(Eigen::MatrixXd::Identity(2, 2), 3), std::invalid_argument);
}

TEST(Pca, IsotropicCloudNeedsMostDimensions) {
  auto pts = gaussian_cloud(10000, std::vector<double>(8, 1.0), 5);
  EXPECT_NEAR(pca_variance_coverage(pts), 0.8, 0.15);
}

TEST(Pca, RankOneData) {
  Rng rng(6);
  const std::vector<double> dir{1, -2, 0.5, 3, 0, 1};
  PointSet pts;
  for (int i = 0; i < 200; ++i) {
    const double t = gaussian(rng);
    std::vector<double> p;
    for (double d : dir) p.push_back(t * d + 4.0);
    pts.push_back(p);
  }
  EXPECT_DOUBLE_EQ(pca_variance_coverage(pts), 1.0 / 6);
}

TEST(Pca, DuplicatedCoordinatesHalveTheFraction) {
  auto pts = gaussian_cloud(4000, {4, 2, 1, 0.5}, 7);
  PointSet dup;
  for (const auto& p : pts) {
    std::vector<double> q;
    for (double v : p) q.insert(q.end(), {v, v});
    dup.push_back(q);
  }
  const double base = pca_variance_coverage(pts);
  EXPECT_DOUBLE_EQ(pca_variance_coverage(dup), base / 2);
}

TEST(Pca, RotationInvariant) {
  auto pts = gaussian_cloud(3000, {3, 2.5, 2, 1.5, 1, 0.5}, 8);
  Rng rng(9);
  Eigen::MatrixXd r(6, 6);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) r(i, j) = gaussian(rng);
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(r).householderQ();
  PointSet rotated;
  for (const auto& p : pts) {
    const Eigen::VectorXd v = q * Eigen::Map<const Eigen::VectorXd>(p.data(), 6);
    rotated.emplace_back(v.data(), v.data() + 6);
  }
  EXPECT_NEAR(pca_variance_coverage(rotated), pca_variance_coverage(pts), 1.0 / 6 + 1e-12);
}

TEST(Pca, ZeroVarianceFails) {
  PointSet same(10, std::vector<double>{1, 2, 3});
  EXPECT_THROW(pca_variance_coverage(same), std::invalid_argument);
}

TEST(Isomap, CollinearPointsKeepTheirOrder) {
  PointSet pts;
  for (int i = 0; i < 12; ++i) pts.push_back({2.0 * i, 1.0 * i, -0.5 * i});
  auto r = isomap(pts, pts.size() - 1, 3);
  ASSERT_EQ(r.kept.size(), 12u);
  EXPECT_EQ(r.dropped, 0u);
  const double sign = r.coords(1, 0) > r.coords(0, 0) ? 1.0 : -1.0;
  for (int i = 1; i < 12; ++i) EXPECT_GT(sign * (r.coords(i, 0) - r.coords(i - 1, 0)), 0.0);
  EXPECT_LT(std::abs(r.eig.values[1]), 1e-8 * r.eig.values[0]);
  EXPECT_LT(std::abs(r.eig.values[2]), 1e-8 * r.eig.values[0]);
}

TEST(Isomap, CompleteGraphEqualsClassicalMds) {
  auto pts = gaussian_cloud(40, {3, 2, 1, 0.3}, 11);
  auto r = isomap(pts, pts.size() - 1, 3);
  const Eigen::MatrixXd x = to_matrix(pts);
  const Eigen::MatrixXd ref = reference_mds(pairwise(x), 3);
  const Eigen::MatrixXd got = pairwise(r.coords), want = pairwise(ref);
  EXPECT_LE((got - want).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Isomap, GeodesicsFollowTheSwissRoll) {
  Rng rng(12);
  PointSet pts;
  std::vector<std::pair<double, double>> intrinsic;
  auto arc = [](double t) { return 0.5 * (t * std::sqrt(1 + t * t) + std::asinh(t)); };
  const double pi = std::numbers::pi;
  for (int i = 0; i < 500; ++i) {
    const double t = 1.5 * pi + 3.0 * pi * uniform01(rng);
    const double h = 20.0 * uniform01(rng);
    pts.push_back({t * std::cos(t), h, t * std::sin(t)});
    intrinsic.push_back({arc(t), h});
  }
  auto r = isomap(pts, 10, 2);
  ASSERT_EQ(r.dropped, 0u);
  const Eigen::MatrixXd x = to_matrix(pts);
  std::vector<double> truth, geo, euclid;
  for (std::size_t a = 0; a < pts.size(); a += 2)
    for (std::size_t b = a + 1; b < pts.size(); b += 3) {
      truth.push_back(std::hypot(intrinsic[a].first - intrinsic[b].first,
                                 intrinsic[a].second - intrinsic[b].second));
      geo.push_back((r.coords.row(Eigen::Index(a)) - r.coords.row(Eigen::Index(b))).norm());
      euclid.push_back((x.row(Eigen::Index(a)) - x.row(Eigen::Index(b))).norm());
    }
  const double s_geo = spearman(geo, truth), s_euclid = spearman(euclid, truth);
  EXPECT_GT(s_geo, s_euclid);
}

TEST(Isomap, KeepsTheLargestComponent) {
  PointSet pts;
  for (int i = 0; i < 10; ++i) pts.push_back({100.0 + i * 0.1, 0.0});
  for (int i = 0; i < 20; ++i) pts.push_back({std::cos(i * 0.3), std::sin(i * 0.3)});
  auto r = isomap(pts, 4, 2);
  EXPECT_EQ(r.dropped, 10u);
  ASSERT_EQ(r.kept.size(), 20u);
  for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(r.kept[i], i + 10);
  EXPECT_EQ(r.coords.rows(), 20);
}

TEST(Isomap, NeedsMorePointsThanNeighbours) {
  PointSet pts(15, std::vector<double>{0, 0});
  EXPECT_THROW(isomap(pts, 15), std::invalid_argument);
}

TEST(Embeddings, CountsTagsAndDeterminism) {
  auto rc = tiny_run();
  auto data = prepare_data(rc);
  Model<double> m(model_config_for(rc, data.vocab, data.encoded.classes), 1);
  const auto& xs = data.encoded.valid;
  auto none = dump_embeddings(m, xs, 0, 5, 7);
  ASSERT_EQ(none.size(), xs.size());
  for (std::size_t i = 0; i < none.size(); ++i) {
    EXPECT_FALSE(none[i].generated);
    EXPECT_EQ(none[i].cls, xs[i].label);
    EXPECT_EQ(none[i].v.size(), 8u);
  }
  auto a = dump_embeddings(m, xs, 23, 5, 7);
  auto b = dump_embeddings(m, xs, 23, 5, 7);
  ASSERT_EQ(a.size(), xs.size() + 23);
  std::size_t generated = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    generated += a[i].generated;
    EXPECT_EQ(a[i].generated, i >= xs.size());
    EXPECT_LT(a[i].cls, data.encoded.classes);
    EXPECT_EQ(a[i].v, b[i].v);
    EXPECT_EQ(a[i].cls, b[i].cls);
  }
  EXPECT_EQ(generated, 23u);
  // Actual points do not depend on the batch size.
  auto c = dump_embeddings(m, xs, 0, 5, 3);
  for (std::size_t i = 0; i < xs.size(); ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(c[i].v[j], none[i].v[j], 1e-12);
}

TEST(Sweep, SingleCellEqualsOneTrainingRun) {
  auto rc = tiny_run();
  auto data = prepare_data(rc);
  auto grid = layer_sweep(rc, data, {1}, {3}, 1, false);
  ASSERT_EQ(grid.size(), 1u);
  ASSERT_EQ(grid[0].test_acc.size(), 1u);

  auto mc = model_config_for(rc, data.vocab, data.encoded.classes);
  mc.m_g = 1;
  mc.m_d = 3;
  Model<float> model(mc, rc.seed);
  TrainConfig tc = rc.train;
  tc.seed = rc.seed;
  MixStrategy s = rc.mix;
  s.kind = MixStrategy::Kind::OomMix;
  EXPECT_EQ(grid[0].test_acc[0], train(model, data.encoded, s, tc).test_acc);
  EXPECT_EQ(grid[0].mean, grid[0].test_acc[0]);
  EXPECT_EQ(grid[0].stddev, 0.0);
}

TEST(Sweep, GridShapeSkipsAndDeterminism) {
  auto rc = tiny_run();
  auto data = prepare_data(rc);
  std::vector<std::string> warnings;
  auto warn = [&](const std::string& w) { warnings.push_back(w); };
  auto a = layer_sweep(rc, data, {1, 2}, {2, 3}, 2, false, 1, warn);
  auto b = layer_sweep(rc, data, {1, 2}, {2, 3}, 2, false, 2);
  ASSERT_EQ(a.size(), 4u);
  EXPECT_EQ(warnings.size(), 1u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(a[i].m_g, i < 2 ? 1u : 2u);
    EXPECT_EQ(a[i].m_d, i % 2 ? 3u : 2u);
    EXPECT_EQ(a[i].skipped, a[i].m_g >= a[i].m_d);
    EXPECT_EQ(a[i].test_acc, b[i].test_acc);
    if (!a[i].skipped) {
      ASSERT_EQ(a[i].test_acc.size(), 2u);
      auto [m, s] = mean_std(a[i].test_acc);
      EXPECT_EQ(a[i].mean, m);
      EXPECT_EQ(a[i].stddev, s);
    }
  }
  auto eq = layer_sweep(rc, data, {2}, {2}, 1, true);
  EXPECT_FALSE(eq[0].skipped);
}

TEST(Sweep, MeanAndSampleDeviation) {
  auto [m, s] = mean_std({0.5, 0.7, 0.9});
  EXPECT_DOUBLE_EQ(m, 0.7);
  EXPECT_NEAR(s, 0.2, 1e-15);
}
