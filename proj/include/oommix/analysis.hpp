#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <queue>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "oommix/pipeline.hpp"
#include "oommix/trainer.hpp"

namespace oommix {

// ---------------------------------------------------------------------------
// Mixing-coefficient histograms

struct LambdaHistogram {
  std::vector<double> edges;                     // bins + 1 edges over [0, 1]
  std::vector<std::vector<std::size_t>> counts;  // [phase][bin]
  std::vector<std::size_t> totals;               // records per phase
  double midpoint = 0;                           // phase boundary step
};

/// Phase of a record: 0 when its step is at or before the midpoint between
/// the first and last logged steps, 1 afterwards.
inline std::size_t lambda_phase(std::size_t step, double midpoint) {
  return static_cast<double>(step) <= midpoint ? 0 : 1;
}

inline double log_midpoint(const std::vector<LambdaLogRecord>& log) {
  if (log.empty()) throw std::invalid_argument("lambda log is empty");
  auto [lo, hi] = std::minmax_element(log.begin(), log.end(),
                                      [](const auto& a, const auto& b) { return a.step < b.step; });
  return 0.5 * (static_cast<double>(lo->step) + static_cast<double>(hi->step));
}

inline LambdaHistogram lambda_histogram(const std::vector<LambdaLogRecord>& log,
                                        std::size_t bins = 20) {
  if (bins == 0) throw std::invalid_argument("histogram needs at least one bin");
  LambdaHistogram h;
  h.midpoint = log_midpoint(log);
  for (std::size_t i = 0; i <= bins; ++i)
    h.edges.push_back(static_cast<double>(i) / static_cast<double>(bins));
  h.counts.assign(2, std::vector<std::size_t>(bins, 0));
  h.totals.assign(2, 0);
  for (const auto& r : log) {
    const std::size_t p = lambda_phase(r.step, h.midpoint);
    const double v = std::clamp(r.lambda, 0.0, 1.0);
    const std::size_t b =
        std::min(bins - 1, static_cast<std::size_t>(v * static_cast<double>(bins)));
    ++h.counts[p][b];
    ++h.totals[p];
  }
  return h;
}

/// Exact median; mean of the middle two on even counts.
inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty set");
  const std::size_t n = v.size();
  std::sort(v.begin(), v.end());
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double median_lambda(const std::vector<LambdaLogRecord>& log, std::size_t phase) {
  const double mid = log_midpoint(log);
  std::vector<double> v;
  for (const auto& r : log)
    if (lambda_phase(r.step, mid) == phase) v.push_back(r.lambda);
  if (v.empty()) throw std::invalid_argument("phase " + std::to_string(phase) + " is empty");
  return median(std::move(v));
}

// ---------------------------------------------------------------------------
// Symmetric eigen-solver: power iteration with deflation.

struct EigenPairs {
  std::vector<double> values;     // descending
  Eigen::MatrixXd vectors;        // one unit column per value
  std::vector<double> residuals;  // ||A v - lambda v||
  double norm = 0;                // Frobenius norm of A
};

struct PowerOptions {
  std::size_t max_iter = 10000;
  double tol = 1e-10;      // eigenvalue change, relative to ||A||
  bool assume_psd = false; // skip the Gershgorin shift
  std::uint64_t seed = 0x5eed;
};

/// Top-k algebraic eigenpairs of a symmetric matrix. Indefinite matrices are
/// shifted by a Gershgorin bound so the largest algebraic eigenvalue also
/// dominates in magnitude.
inline EigenPairs top_eigenpairs(const Eigen::MatrixXd& a, std::size_t k,
                                 const PowerOptions& opt = {}) {
  const auto n = a.rows();
  if (a.cols() != n) throw std::invalid_argument("eigen-solver needs a square matrix");
  if (k > static_cast<std::size_t>(n)) throw std::invalid_argument("more eigenpairs than rows");
  if (!a.isApprox(a.transpose(), 1e-9) && a.norm() > 0) {
    throw std::invalid_argument("eigen-solver needs a symmetric matrix");
  }
  EigenPairs out;
  out.norm = a.norm();
  out.vectors.resize(n, static_cast<Eigen::Index>(k));

  double shift = 0;
  if (!opt.assume_psd) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double off = a.row(i).cwiseAbs().sum() - std::abs(a(i, i));
      shift = std::max(shift, off - a(i, i));
    }
  }
  Eigen::MatrixXd work = a;
  work.diagonal().array() += shift;
  const double scale = std::max(out.norm, 1e-300);

  Rng rng = make_rng(opt.seed, Stream::Analysis);
  for (std::size_t j = 0; j < k; ++j) {
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = uniform01(rng) - 0.5;
    auto orthogonalize = [&](Eigen::VectorXd& x) {
      for (std::size_t p = 0; p < j; ++p) {
        const auto col = out.vectors.col(static_cast<Eigen::Index>(p));
        x -= col.dot(x) * col;
      }
    };
    orthogonalize(v);
    v.normalize();
    double mu = v.dot(work * v);
    for (std::size_t it = 0; it < opt.max_iter; ++it) {
      Eigen::VectorXd w = work * v;
      orthogonalize(w);
      const double wn = w.norm();
      if (wn == 0.0) {
        mu = 0.0;
        break;
      }
      const double next = v.dot(w);
      const double resid = (w - next * v).norm();
      v = w / wn;
      const bool settled = std::abs(next - mu) <= opt.tol * scale;
      mu = next;
      if (settled && resid <= 1e-9 * scale) break;
    }
    out.vectors.col(static_cast<Eigen::Index>(j)) = v;
    work -= mu * v * v.transpose();
    const double lambda = v.dot(a * v);
    out.values.push_back(lambda);
    out.residuals.push_back((a * v - lambda * v).norm());
  }
  return out;
}

// ---------------------------------------------------------------------------
// PCA variance coverage

using PointSet = std::vector<std::vector<double>>;

inline Eigen::MatrixXd to_matrix(const PointSet& pts) {
  if (pts.empty()) throw std::invalid_argument("empty point set");
  const std::size_t d = pts[0].size();
  Eigen::MatrixXd m(static_cast<Eigen::Index>(pts.size()), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (pts[i].size() != d) throw std::invalid_argument("points differ in dimension");
    for (std::size_t j = 0; j < d; ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = pts[i][j];
  }
  return m;
}

/// Smallest fraction of principal dimensions whose eigenvalues reach
/// `target` of the total variance.
inline double pca_variance_coverage(const PointSet& pts, double target = 0.8) {
  if (!(target > 0.0 && target <= 1.0)) throw std::invalid_argument("target outside (0, 1]");
  Eigen::MatrixXd x = to_matrix(pts);
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = x.transpose() * x / static_cast<double>(x.rows());
  const double total = cov.trace();
  if (!(total > 0.0)) throw std::invalid_argument("zero total variance");
  const auto d = static_cast<std::size_t>(cov.rows());
  PowerOptions opt;
  opt.assume_psd = true;
  const auto eig = top_eigenpairs(cov, d, opt);
  double cum = 0;
  for (std::size_t k = 0; k < d; ++k) {
    cum += std::max(0.0, eig.values[k]);
    if (cum >= target * total * (1.0 - 1e-12)) {
      return static_cast<double>(k + 1) / static_cast<double>(d);
    }
  }
  return 1.0;
}

// ---------------------------------------------------------------------------
// Isomap

/// Classical metric MDS of a distance matrix: double-centred squared
/// distances, top eigenpairs, coordinates scaled by sqrt(eigenvalue).
struct MdsResult {
  Eigen::MatrixXd coords;
  EigenPairs eig;
};

inline MdsResult classical_mds(const Eigen::MatrixXd& dist, std::size_t dim) {
  const auto n = dist.rows();
  Eigen::MatrixXd b = dist.array().square().matrix();
  const Eigen::VectorXd row_mean = b.rowwise().mean();
  const Eigen::VectorXd col_mean = b.colwise().mean().transpose();
  const double all_mean = b.mean();
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      b(i, j) = -0.5 * (b(i, j) - row_mean(i) - col_mean(j) + all_mean);
  b = 0.5 * (b + b.transpose()).eval();
  MdsResult r;
  r.eig = top_eigenpairs(b, dim);
  r.coords.resize(n, static_cast<Eigen::Index>(dim));
  for (std::size_t j = 0; j < dim; ++j) {
    const double s = std::sqrt(std::max(0.0, r.eig.values[j]));
    r.coords.col(static_cast<Eigen::Index>(j)) = s * r.eig.vectors.col(static_cast<Eigen::Index>(j));
  }
  return r;
}

struct IsomapResult {
  Eigen::MatrixXd coords;         // kept points x out_dim
  std::vector<std::size_t> kept;  // input index of each row
  std::size_t dropped = 0;        // points outside the largest component
  EigenPairs eig;
};

/// Symmetric k-nearest-neighbour graph: j is adjacent to i when either is
/// among the other's k nearest (ties by lower index).
inline std::vector<std::vector<std::pair<std::size_t, double>>> knn_graph(
    const Eigen::MatrixXd& x, std::size_t k) {
  const auto n = static_cast<std::size_t>(x.rows());
  std::vector<std::vector<char>> adj(n, std::vector<char>(n, 0));
  std::vector<std::vector<double>> dist(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      dist[i][j] = dist[j][i] =
          (x.row(static_cast<Eigen::Index>(i)) - x.row(static_cast<Eigen::Index>(j))).norm();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) {
    order.clear();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) order.push_back(j);
    auto closer = [&](std::size_t a, std::size_t b) {
      return dist[i][a] < dist[i][b] || (dist[i][a] == dist[i][b] && a < b);
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      closer);
    for (std::size_t t = 0; t < k; ++t) adj[i][order[t]] = adj[order[t]][i] = 1;
  }
  std::vector<std::vector<std::pair<std::size_t, double>>> g(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (adj[i][j]) g[i].push_back({j, dist[i][j]});
  return g;
}

/// Single-source shortest paths with a binary heap.
inline std::vector<double> dijkstra(
    const std::vector<std::vector<std::pair<std::size_t, double>>>& g, std::size_t src) {
  std::vector<double> d(g.size(), std::numeric_limits<double>::infinity());
  using Item = std::pair<double, std::size_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<Item>> pq;
  d[src] = 0;
  pq.push({0.0, src});
  while (!pq.empty()) {
    auto [du, u] = pq.top();
    pq.pop();
    if (du > d[u]) continue;
    for (auto [v, w] : g[u]) {
      if (du + w < d[v]) {
        d[v] = du + w;
        pq.push({d[v], v});
      }
    }
  }
  return d;
}

inline IsomapResult isomap(const PointSet& pts, std::size_t k = 15, std::size_t out_dim = 3) {
  const std::size_t n = pts.size();
  if (n <= k) {
    throw std::invalid_argument("isomap needs more points (" + std::to_string(n) +
                                ") than neighbours (" + std::to_string(k) + ")");
  }
  if (k == 0) throw std::invalid_argument("isomap needs k >= 1");
  const Eigen::MatrixXd x = to_matrix(pts);
  auto g = knn_graph(x, k);

  // Largest connected component; ties go to the one holding the lowest index.
  std::vector<int> comp(n, -1);
  std::vector<std::size_t> sizes;
  for (std::size_t s = 0; s < n; ++s) {
    if (comp[s] >= 0) continue;
    const int id = static_cast<int>(sizes.size());
    std::size_t size = 0;
    std::vector<std::size_t> stack{s};
    comp[s] = id;
    while (!stack.empty()) {
      auto u = stack.back();
      stack.pop_back();
      ++size;
      for (auto [v, w] : g[u])
        if (comp[v] < 0) comp[v] = id, stack.push_back(v);
    }
    sizes.push_back(size);
  }
  const int best = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
  IsomapResult r;
  for (std::size_t i = 0; i < n; ++i)
    if (comp[i] == best) r.kept.push_back(i);
  r.dropped = n - r.kept.size();
  if (r.kept.size() <= out_dim) throw std::runtime_error("isomap: largest component too small");

  const auto m = static_cast<Eigen::Index>(r.kept.size());
  Eigen::MatrixXd geo(m, m);
  for (Eigen::Index a = 0; a < m; ++a) {
    auto d = dijkstra(g, r.kept[static_cast<std::size_t>(a)]);
    for (Eigen::Index b = 0; b < m; ++b) geo(a, b) = d[r.kept[static_cast<std::size_t>(b)]];
  }
  geo = 0.5 * (geo + geo.transpose()).eval();
  auto mds = classical_mds(geo, out_dim);
  r.coords = std::move(mds.coords);
  r.eig = std::move(mds.eig);
  return r;
}

// ---------------------------------------------------------------------------
// Embedding dumps

struct EmbeddingPoint {
  bool generated = false;
  std::size_t cls = 0;  // true class (actual) or predicted class (generated)
  std::vector<double> v;
};

/// Sentence-level (mean-pooled last layer) embeddings of `xs`, followed by
/// `n_pairs` generator outputs propagated to the last layer. Evaluation mode.
template <typename T>
std::vector<EmbeddingPoint> dump_embeddings(const Model<T>& model,
                                            const std::vector<EncodedExample>& xs,
                                            std::size_t n_pairs, std::uint64_t seed,
                                            std::size_t batch = 64) {
  std::vector<EmbeddingPoint> out;
  const auto& enc = model.encoder();
  Rng unused = make_rng(seed, Stream::Dropout);
  const std::size_t d = model.config().encoder.dim, c = model.classes();
  for (std::size_t i = 0; i < xs.size(); i += batch) {
    std::vector<const TokenSequence*> toks;
    for (std::size_t j = i; j < std::min(xs.size(), i + batch); ++j) toks.push_back(&xs[j].tokens);
    Graph<T> g;
    auto h = model.advance(g, enc.embed(g, toks), model.layers(), false, unused);
    const auto& s = enc.sentence(g, h).value().data;
    for (std::size_t r = 0; r < toks.size(); ++r)
      out.push_back({false, xs[i + r].label,
                     std::vector<double>(s.begin() + static_cast<std::ptrdiff_t>(r * d),
                                         s.begin() + static_cast<std::ptrdiff_t>((r + 1) * d))});
  }
  if (n_pairs == 0) return out;
  if (xs.size() < 2) throw std::invalid_argument("generated pairs need at least 2 examples");

  Rng pick = make_rng(seed, Stream::Analysis, 1);
  Rng mix = make_rng(seed, Stream::Analysis, 2);
  auto draw = [&](std::size_t bound) {
    return std::min(bound - 1,
                    static_cast<std::size_t>(uniform01(pick) * static_cast<double>(bound)));
  };
  const std::size_t half = std::max<std::size_t>(1, batch / 2);
  for (std::size_t done = 0; done < n_pairs;) {
    const std::size_t n = std::min(half, n_pairs - done);
    std::vector<const TokenSequence*> toks(2 * n);
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t a = draw(xs.size());
      std::size_t b = draw(xs.size() - 1);
      if (b >= a) ++b;
      toks[k] = &xs[a].tokens;
      toks[n + k] = &xs[b].tokens;
    }
    std::vector<std::size_t> perm(2 * n);
    for (std::size_t k = 0; k < n; ++k) perm[k] = n + k, perm[n + k] = k;
    Graph<T> g;
    auto hg = model.advance(g, enc.embed(g, toks), model.m_g(), false, unused);
    auto gen = generate(g, model, hg, perm, false, unused, mix);
    auto hm = model.advance(g, gen.mixed, model.layers(), false, unused);
    Var<T> s = enc.sentence(g, hm);
    const auto& probs = enc.head(g, s).value().data;
    const auto& sv = s.value().data;
    for (std::size_t k = 0; k < n; ++k) {
      const auto row = probs.begin() + static_cast<std::ptrdiff_t>(k * c);
      out.push_back({true, argmax(row, row + static_cast<std::ptrdiff_t>(c)),
                     std::vector<double>(sv.begin() + static_cast<std::ptrdiff_t>(k * d),
                                         sv.begin() + static_cast<std::ptrdiff_t>((k + 1) * d))});
    }
    done += n;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layer-placement sweep

struct SweepCell {
  std::size_t m_g = 0, m_d = 0;
  std::vector<double> test_acc;  // one per seed
  double mean = 0, stddev = 0;
  bool skipped = false;
};

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
}

/// One OoMMix training run per (m_g, m_d, seed). Run s uses seed base + s for
/// initialisation and training; the data are shared. Invalid pairs are
/// skipped and reported through `warn`.
inline std::vector<SweepCell> layer_sweep(const RunConfig& rc, const PreparedData& data,
                                          const std::vector<std::size_t>& mg_range,
                                          const std::vector<std::size_t>& md_range,
                                          std::size_t seeds, bool allow_equal,
                                          std::size_t threads = 1,
                                          const std::function<void(const std::string&)>& warn = {}) {
  std::vector<SweepCell> grid;
  struct Job {
    std::size_t cell, seed;
  };
  std::vector<Job> jobs;
  for (auto mg : mg_range)
    for (auto md : md_range) {
      SweepCell cell;
      cell.m_g = mg;
      cell.m_d = md;
      ModelConfig mc = model_config_for(rc, data.vocab, data.encoded.classes);
      mc.m_g = mg;
      mc.m_d = md;
      try {
        mc.validate(allow_equal);
      } catch (const std::invalid_argument& e) {
        cell.skipped = true;
        if (warn) {
          warn("skipping m_g=" + std::to_string(mg) + " m_d=" + std::to_string(md) + ": " +
               e.what());
        }
      }
      if (!cell.skipped) {
        cell.test_acc.assign(seeds, 0.0);
        for (std::size_t s = 0; s < seeds; ++s) jobs.push_back({grid.size(), s});
      }
      grid.push_back(cell);
    }

  MixStrategy strategy = rc.mix;
  strategy.kind = MixStrategy::Kind::OomMix;
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(jobs.size());
  auto worker = [&] {
    for (std::size_t j; (j = next.fetch_add(1)) < jobs.size();) {
      try {
        auto& cell = grid[jobs[j].cell];
        ModelConfig mc = model_config_for(rc, data.vocab, data.encoded.classes);
        mc.m_g = cell.m_g;
        mc.m_d = cell.m_d;
        const std::uint64_t seed = rc.seed + jobs[j].seed;
        Model<float> model(mc, seed, allow_equal);
        TrainConfig tc = rc.train;
        tc.seed = seed;
        cell.test_acc[jobs[j].seed] = train(model, data.encoded, strategy, tc).test_acc;
      } catch (...) {
        errors[j] = std::current_exception();
      }
    }
  };
  const std::size_t nt = std::max<std::size_t>(1, std::min(threads, jobs.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < nt; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  for (auto& cell : grid)
    if (!cell.skipped) std::tie(cell.mean, cell.stddev) = mean_std(cell.test_acc);
  return grid;
}

}  // namespace oommix
