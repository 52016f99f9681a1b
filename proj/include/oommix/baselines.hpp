#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "oommix/oommix.hpp"
#include "oommix/rng.hpp"

namespace oommix {

/// Mixup variant used by the trainer (`mix.strategy`).
struct MixStrategy {
  enum class Kind { None, FixedSentence, BetaHidden, OomMix };

  Kind kind = Kind::OomMix;
  double fixed_lambda = 0.5;          // fixed-sentence
  double beta_a = 0.1;                // beta-hidden, Beta(a, a)
  std::optional<std::size_t> layer;   // beta-hidden mixing layer, default m_g
  bool beta_symmetrize = false;       // lambda <- max(lambda, 1 - lambda)
  bool use_discriminator = true;      // oommix

  static Kind parse(const std::string& s) {
    if (s == "none") return Kind::None;
    if (s == "fixed-sentence") return Kind::FixedSentence;
    if (s == "beta-hidden") return Kind::BetaHidden;
    if (s == "oommix") return Kind::OomMix;
    throw std::invalid_argument("unknown mix strategy: " + s);
  }

  static std::string name(Kind k) {
    switch (k) {
      case Kind::None: return "none";
      case Kind::FixedSentence: return "fixed-sentence";
      case Kind::BetaHidden: return "beta-hidden";
      case Kind::OomMix: return "oommix";
    }
    return "?";
  }

  bool mixes() const { return kind != Kind::None; }

  void validate() const {
    if (fixed_lambda < 0.0 || fixed_lambda > 1.0) {
      throw std::invalid_argument("fixed lambda must lie in [0, 1]");
    }
    if (!(beta_a > 0.0)) {
      throw std::invalid_argument("beta shape must be positive");
    }
  }
};

/// log of a Gamma(shape, 1) draw. Marsaglia-Tsang for shape >= 1; smaller
/// shapes use Gamma(shape + 1) * U^(1/shape), kept in log space so tiny
/// shapes do not underflow.
inline double log_gamma_sample(double shape, Rng& rng) {
  if (!(shape > 0.0)) throw std::invalid_argument("gamma shape must be positive");
  if (shape < 1.0) {
    double u;
    do {
      u = uniform01(rng);
    } while (u == 0.0);
    return log_gamma_sample(shape + 1.0, rng) + std::log(u) / shape;
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      // Box-Muller from two uniforms; one normal per iteration.
      double u1;
      do {
        u1 = uniform01(rng);
      } while (u1 == 0.0);
      const double u2 = uniform01(rng);
      x = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    double u;
    do {
      u = uniform01(rng);
    } while (u == 0.0);
    if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) {
      return std::log(d) + std::log(v);
    }
  }
}

/// Beta(a, b) draw, strictly inside (0, 1).
inline double sample_beta(double a, double b, Rng& rng) {
  if (!(a > 0.0) || !(b > 0.0)) {
    throw std::invalid_argument("beta shape must be positive");
  }
  const double lx = log_gamma_sample(a, rng);
  const double ly = log_gamma_sample(b, rng);
  double lambda = 1.0 / (1.0 + std::exp(ly - lx));
  // Representable open interval; exp saturation would otherwise yield 0 or 1.
  lambda = std::max(lambda, std::numeric_limits<double>::denorm_min());
  lambda = std::min(lambda, std::nextafter(1.0, 0.0));
  return lambda;
}

/// lambda * s1 + (1 - lambda) * s2 on pooled sentence vectors.
template <typename T>
Var<T> fixed_sentence_mixup(Var<T> s1, Var<T> s2, T lambda = T(0.5)) {
  return ops::combine(lambda, s1, T(1) - lambda, s2);
}

/// Beta-sampled mix of two embeddings sharing a layer.
template <typename T>
struct BetaMix {
  double lambda;
  ContextualEmbedding<T> mixed;
  std::vector<double> mixed_label;
};

template <typename T>
BetaMix<T> beta_hidden_mixup(const ContextualEmbedding<T>& h1,
                             const ContextualEmbedding<T>& h2, std::size_t y1,
                             std::size_t y2, std::size_t classes, double a,
                             Rng& rng) {
  if (!(a > 0.0)) throw std::invalid_argument("beta shape must be positive");
  const double lambda = sample_beta(a, a, rng);
  return {lambda, mix_embeddings(h1, h2, static_cast<T>(lambda)),
          mix_labels(y1, y2, lambda, classes)};
}

namespace detail {

template <typename T>
void fill_constant_mixes(ForwardResult<T>& r, const Batch& batch,
                         const std::vector<std::size_t>& perm,
                         const std::vector<double>& lambdas,
                         std::size_t classes) {
  r.mixes.resize(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    auto& m = r.mixes[i];
    m.alpha = lambdas[i];
    m.delta = 0.0;
    m.gamma = 0.0;
    m.lambda = lambdas[i];
    m.first = i;
    m.second = perm[i];
    m.mixed_label =
        mix_labels(batch.labels[i], batch.labels[perm[i]], lambdas[i], classes);
  }
}

template <typename T>
Tensor<T> label_tensor(const std::vector<MixRecord>& mixes, std::size_t classes) {
  Tensor<T> t({mixes.size(), classes});
  for (std::size_t i = 0; i < mixes.size(); ++i)
    for (std::size_t c = 0; c < classes; ++c)
      t[i * classes + c] = static_cast<T>(mixes[i].mixed_label[c]);
  return t;
}

}  // namespace detail

/// Forward pass and losses for any strategy. `none` yields L_C only;
/// manual mixup baselines put their loss in l_g, scoped like L_C;
/// `oommix` delegates to compute_losses.
template <typename T>
ForwardResult<T> strategy_dispatch(Graph<T>& g, const Model<T>& model,
                                   const MixStrategy& strategy,
                                   const Batch& batch,
                                   const std::vector<std::size_t>& perm,
                                   double e, Rng& dropout_rng, Rng& mix_rng,
                                   bool train = true) {
  strategy.validate();
  using Kind = MixStrategy::Kind;
  if (strategy.kind == Kind::OomMix) {
    MixOptions opt;
    opt.train = train;
    opt.use_discriminator = strategy.use_discriminator;
    return compute_losses(g, model, batch, perm, e, dropout_rng, mix_rng, opt);
  }

  const auto& enc = model.encoder();
  const std::size_t c = model.classes();
  const std::size_t b = batch.tokens.size();
  ForwardResult<T> r;
  r.bundle.e = e;

  auto h0 = enc.embed(g, batch.tokens);
  switch (strategy.kind) {
    case Kind::None: {
      auto hm = model.advance(g, h0, model.layers(), train, dropout_rng);
      r.l_c = ops::kl_div(enc.classify(g, hm), g.constant(one_hot<T>(batch.labels, c)));
      break;
    }
    case Kind::FixedSentence: {
      check_pairing(perm, b);
      auto hm = model.advance(g, h0, model.layers(), train, dropout_rng);
      Var<T> s = enc.sentence(g, hm);
      r.l_c = ops::kl_div(enc.head(g, s), g.constant(one_hot<T>(batch.labels, c)));
      const double lam = strategy.fixed_lambda;
      Var<T> mixed = fixed_sentence_mixup(s, ops::gather_rows(s, perm),
                                          static_cast<T>(lam));
      detail::fill_constant_mixes(r, batch, perm, std::vector<double>(b, lam), c);
      r.l_g = ops::kl_div(enc.head(g, mixed),
                          g.constant(detail::label_tensor<T>(r.mixes, c)));
      r.scope_g = kScopeClassification;
      break;
    }
    case Kind::BetaHidden: {
      check_pairing(perm, b);
      const std::size_t layer = strategy.layer.value_or(model.m_g());
      if (layer > model.layers()) {
        throw std::invalid_argument("beta-hidden: mixing layer beyond the encoder");
      }
      auto hl = model.advance(g, h0, layer, train, dropout_rng);
      auto hm = model.advance(g, hl, model.layers(), train, dropout_rng);
      r.l_c = ops::kl_div(enc.classify(g, hm), g.constant(one_hot<T>(batch.labels, c)));
      std::vector<double> lambdas(b);
      Tensor<T> lam({b, 1});
      for (std::size_t i = 0; i < b; ++i) {
        double v = sample_beta(strategy.beta_a, strategy.beta_a, mix_rng);
        if (strategy.beta_symmetrize) v = std::max(v, 1.0 - v);
        lambdas[i] = v;
        lam[i] = static_cast<T>(v);
      }
      auto mixed = mix_rows(hl, perm, g.constant(std::move(lam)));
      auto mixed_m = model.advance(g, mixed, model.layers(), train, dropout_rng);
      detail::fill_constant_mixes(r, batch, perm, lambdas, c);
      r.l_g = ops::kl_div(enc.classify(g, mixed_m),
                          g.constant(detail::label_tensor<T>(r.mixes, c)));
      r.scope_g = kScopeClassification;
      break;
    }
    case Kind::OomMix:
      break;
  }
  r.bundle.l_c = r.l_c.value()[0];
  r.bundle.l_g = r.l_g.valid() ? static_cast<double>(r.l_g.value()[0]) : 0.0;
  r.bundle.l_d = 0.0;
  r.bundle.total = r.bundle.l_c + r.bundle.l_g;
  return r;
}

}  // namespace oommix
