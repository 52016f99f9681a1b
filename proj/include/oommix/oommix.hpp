#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "oommix/encoder.hpp"
#include "oommix/graph.hpp"
#include "oommix/ops.hpp"
#include "oommix/rng.hpp"

namespace oommix {

/// Parameter groups each objective may update.
inline constexpr GroupMask kScopeClassification{
    ParamGroup::EncoderBelowMg, ParamGroup::EncoderMgAndAbove,
    ParamGroup::ClassifierHead};
inline constexpr GroupMask kScopeGenerated{ParamGroup::EncoderMgAndAbove,
                                           ParamGroup::ClassifierHead,
                                           ParamGroup::Generator};
inline constexpr GroupMask kScopeDiscrimination{ParamGroup::Generator,
                                                ParamGroup::Discriminator};

/// How the two BCE terms of the discrimination loss are reduced.
enum class LdReduction { Mean, Sum };

struct LossBundle {
  double l_c = 0, l_g = 0, l_d = 0, e = 0, total = 0;
};

/// One generator invocation for a pair (first, second) of the batch.
struct MixRecord {
  double alpha = 0, delta = 0, gamma = 0, lambda = 0;
  std::size_t first = 0, second = 0;
  std::vector<double> mixed_label;
};

struct ModelConfig {
  EncoderConfig encoder;
  std::size_t m_g = 1;
  std::size_t m_d = 4;
  std::size_t head_hidden = 0;  // 0 means D
  LdReduction ld_reduction = LdReduction::Mean;

  void validate(bool allow_equal_layers = false) const {
    encoder.validate();
    if (m_d > encoder.layers) {
      throw std::invalid_argument("m_d exceeds the number of layers");
    }
    if (m_g > m_d || (m_g == m_d && !allow_equal_layers)) {
      throw std::invalid_argument("generator layer must lie below the "
                                  "discriminator layer");
    }
  }
};

// ---------------------------------------------------------------------------
// Scalar pieces of the generator.

/// lambda = alpha + gamma * delta with gamma ~ U(0, 1).
inline std::pair<double, double> sample_lambda(double alpha, double delta,
                                               Rng& rng) {
  const double gamma = uniform01(rng);
  return {gamma, alpha + gamma * delta};
}

/// lambda * e_{y1} + (1 - lambda) * e_{y2}.
inline std::vector<double> mix_labels(std::size_t y1, std::size_t y2,
                                      double lambda, std::size_t classes) {
  if (y1 >= classes || y2 >= classes) {
    throw std::out_of_range("mix_labels: class index outside [0, " +
                            std::to_string(classes) + ")");
  }
  std::vector<double> y(classes, 0.0);
  y[y1] += lambda;
  y[y2] += 1.0 - lambda;
  return y;
}

/// lambda * h1 + (1 - lambda) * h2 for one shared scalar lambda; mask is
/// the union of both masks.
template <typename T>
ContextualEmbedding<T> mix_embeddings(const ContextualEmbedding<T>& h1,
                                      const ContextualEmbedding<T>& h2,
                                      T lambda) {
  if (h1.layer != h2.layer) {
    throw std::invalid_argument("mix_embeddings: layers differ");
  }
  if (h1.matrix.shape() != h2.matrix.shape()) {
    throw ShapeError("mix_embeddings: shapes " + to_string(h1.matrix.shape()) +
                     " and " + to_string(h2.matrix.shape()) + " differ");
  }
  Tensor<T> mask(h1.mask.shape);
  for (std::size_t i = 0; i < mask.size(); ++i)
    mask[i] = (h1.mask[i] != T(0) || h2.mask[i] != T(0)) ? T(1) : T(0);
  return {h1.layer, ops::combine(lambda, h1.matrix, T(1) - lambda, h2.matrix),
          std::move(mask)};
}

/// Union of each row's mask with its partner's.
template <typename T>
Tensor<T> union_mask(const Tensor<T>& mask, const std::vector<std::size_t>& partner) {
  const std::size_t l = mask.shape[1];
  Tensor<T> out(mask.shape);
  for (std::size_t i = 0; i < partner.size(); ++i)
    for (std::size_t j = 0; j < l; ++j)
      out[i * l + j] =
          (mask[i * l + j] != T(0) || mask[partner[i] * l + j] != T(0)) ? T(1)
                                                                         : T(0);
  return out;
}

/// Per-row interpolation lambda_i * h_i + (1 - lambda_i) * h_{partner(i)}
/// with lambda of shape [B, 1].
template <typename T>
ContextualEmbedding<T> mix_rows(const ContextualEmbedding<T>& h,
                                const std::vector<std::size_t>& partner,
                                Var<T> lambda) {
  const auto& s = h.matrix.shape();
  Var<T> other = ops::gather_rows(h.matrix, partner);
  Var<T> lam = ops::reshape(lambda, {s[0], 1, 1});
  Var<T> mixed = ops::add(other, ops::mul(lam, ops::sub(h.matrix, other)));
  return {h.layer, mixed, union_mask(h.mask, partner)};
}

/// Mixed labels for a batch as a graph node: e2 + lambda (e1 - e2).
template <typename T>
Var<T> mix_label_rows(Graph<T>& g, const std::vector<std::size_t>& labels,
                      const std::vector<std::size_t>& partner, Var<T> lambda,
                      std::size_t classes) {
  const std::size_t b = labels.size();
  Tensor<T> base({b, classes}), diff({b, classes});
  for (std::size_t i = 0; i < b; ++i) {
    base[i * classes + labels[partner[i]]] += T(1);
    diff[i * classes + labels[i]] += T(1);
    diff[i * classes + labels[partner[i]]] -= T(1);
  }
  return ops::add(g.constant(std::move(base)),
                  ops::mul(lambda, g.constant(std::move(diff))));
}

template <typename T>
Tensor<T> one_hot(const std::vector<std::size_t>& labels, std::size_t classes) {
  Tensor<T> t({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) {
      throw std::out_of_range("one_hot: label " + std::to_string(labels[i]) +
                              " outside [0, " + std::to_string(classes) + ")");
    }
    t[i * classes + labels[i]] = T(1);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Generator and discriminator networks.

/// Siamese tower (one transformer layer + masked mean) shared by both
/// inputs, then a two-layer head 2D -> hidden -> 3 with softmax. The first
/// two outputs are alpha and delta; the third is slack.
template <typename T>
class Generator {
 public:
  Generator() = default;

  Generator(ParamStore<T>& store, const EncoderConfig& cfg,
            std::size_t hidden, Rng& rng)
      : tower_(store, "generator.tower", ParamGroup::Generator, cfg.dim,
               cfg.heads, cfg.dim * cfg.ffn_mult, cfg.dropout, rng),
        fc1_(Linear<T>::make(store, "generator.fc1", ParamGroup::Generator,
                             2 * cfg.dim, hidden, rng)),
        fc2_(Linear<T>::make(store, "generator.fc2", ParamGroup::Generator,
                             hidden, 3, rng)) {}

  Var<T> sentence_embed(Graph<T>& g, const ContextualEmbedding<T>& h,
                        bool train, Rng& rng) const {
    return masked_mean_pool(g, tower_(g, h.matrix, h.mask, train, rng), h.mask);
  }

  /// Normalized (alpha, delta, slack) rows, [B, 3].
  Var<T> interval(Graph<T>& g, Var<T> s1, Var<T> s2) const {
    Var<T> s = ops::concat<T>({s1, s2}, -1);
    return ops::softmax(fc2_(g, ops::gelu(fc1_(g, s))), -1);
  }

  /// (alpha, delta) for two separately supplied embeddings.
  std::pair<Var<T>, Var<T>> interval(Graph<T>& g,
                                     const ContextualEmbedding<T>& h1,
                                     const ContextualEmbedding<T>& h2,
                                     bool train, Rng& rng) const {
    if (h1.layer != h2.layer) {
      throw std::invalid_argument("generator_interval: inputs from layers " +
                                  std::to_string(h1.layer) + " and " +
                                  std::to_string(h2.layer));
    }
    Var<T> p = interval(g, sentence_embed(g, h1, train, rng),
                        sentence_embed(g, h2, train, rng));
    return {ops::slice(p, -1, 0, 1), ops::slice(p, -1, 1, 2)};
  }

  Parameter<T>& fc2_weight() const { return *fc2_.weight; }
  Parameter<T>& fc2_bias() const { return *fc2_.bias; }

 private:
  TransformerLayer<T> tower_;
  Linear<T> fc1_, fc2_;
};

/// One transformer layer, masked mean, two-layer head D -> hidden -> 1 and
/// a sigmoid: the probability that an embedding comes from actual text.
template <typename T>
class Discriminator {
 public:
  Discriminator() = default;

  Discriminator(ParamStore<T>& store, const EncoderConfig& cfg,
                std::size_t hidden, Rng& rng)
      : tower_(store, "discriminator.tower", ParamGroup::Discriminator,
               cfg.dim, cfg.heads, cfg.dim * cfg.ffn_mult, cfg.dropout, rng),
        fc1_(Linear<T>::make(store, "discriminator.fc1",
                             ParamGroup::Discriminator, cfg.dim, hidden, rng)),
        fc2_(Linear<T>::make(store, "discriminator.fc2",
                             ParamGroup::Discriminator, hidden, 1, rng)) {}

  /// Scores [B, 1].
  Var<T> score(Graph<T>& g, const ContextualEmbedding<T>& h, bool train,
               Rng& rng) const {
    Var<T> s = masked_mean_pool(g, tower_(g, h.matrix, h.mask, train, rng), h.mask);
    return ops::sigmoid(fc2_(g, ops::gelu(fc1_(g, s))));
  }

  Parameter<T>& fc2_weight() const { return *fc2_.weight; }
  Parameter<T>& fc2_bias() const { return *fc2_.bias; }

 private:
  TransformerLayer<T> tower_;
  Linear<T> fc1_, fc2_;
};

/// Encoder, generator and discriminator over one parameter store.
template <typename T>
class Model {
 public:
  explicit Model(const ModelConfig& cfg, std::uint64_t seed,
                 bool allow_equal_layers = false)
      : cfg_(cfg) {
    cfg.validate(allow_equal_layers);
    Rng rng = make_rng(seed, Stream::Init);
    const std::size_t hidden = cfg.head_hidden ? cfg.head_hidden : cfg.encoder.dim;
    encoder_ = Encoder<T>(params_, cfg.encoder, rng);
    generator_ = Generator<T>(params_, cfg.encoder, hidden, rng);
    discriminator_ = Discriminator<T>(params_, cfg.encoder, hidden, rng);
    encoder_.assign_groups(cfg.m_g);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const Encoder<T>& encoder() const { return encoder_; }
  const Generator<T>& generator() const { return generator_; }
  const Discriminator<T>& discriminator() const { return discriminator_; }

  std::size_t m_g() const { return cfg_.m_g; }
  std::size_t m_d() const { return cfg_.m_d; }
  std::size_t layers() const { return cfg_.encoder.layers; }
  std::size_t classes() const { return cfg_.encoder.classes; }

  /// h at `target`, or h itself when it is already there.
  ContextualEmbedding<T> advance(Graph<T>& g, const ContextualEmbedding<T>& h,
                                 std::size_t target, bool train, Rng& rng) const {
    if (target == h.layer) return h;
    return encoder_.forward_layers(g, h, target, train, rng);
  }

 private:
  ModelConfig cfg_;
  ParamStore<T> params_;
  Encoder<T> encoder_;
  Generator<T> generator_;
  Discriminator<T> discriminator_;
};

// ---------------------------------------------------------------------------
// Losses.

/// Graph outputs of one training forward pass. Each loss node carries the
/// parameter groups its gradient may reach.
template <typename T>
struct ForwardResult {
  Var<T> l_c, l_g, l_d;
  GroupMask scope_c = kScopeClassification;
  GroupMask scope_g = kScopeGenerated;
  GroupMask scope_d = kScopeDiscrimination;
  LossBundle bundle;
  std::vector<MixRecord> mixes;
};

struct Batch {
  std::vector<const TokenSequence*> tokens;
  std::vector<std::size_t> labels;
};

struct MixOptions {
  bool train = true;
  bool use_discriminator = true;
  /// Replaces the sampled lambda with a constant (no generator gradient).
  std::optional<double> forced_lambda;
};

inline void check_pairing(const std::vector<std::size_t>& perm, std::size_t b) {
  if (b < 2) throw std::invalid_argument("mixup needs a batch of at least 2");
  if (perm.size() != b) {
    throw std::invalid_argument("pairing does not match batch size");
  }
  std::vector<bool> seen(b, false);
  for (auto p : perm) {
    if (p >= b || seen[p]) {
      throw std::invalid_argument("pairing is not a permutation");
    }
    seen[p] = true;
  }
}

/// Generator pass at layer m_g: draws gamma per pair, returns the mixed
/// embedding, lambda node [B,1] and per-pair records (labels left empty).
template <typename T>
struct GeneratedBatch {
  ContextualEmbedding<T> mixed;
  Var<T> lambda;
  std::vector<MixRecord> records;
};

template <typename T>
GeneratedBatch<T> generate(Graph<T>& g, const Model<T>& model,
                           const ContextualEmbedding<T>& hg,
                           const std::vector<std::size_t>& perm, bool train,
                           Rng& dropout_rng, Rng& mix_rng,
                           std::optional<double> forced_lambda = std::nullopt) {
  const std::size_t b = perm.size();
  if (hg.layer != model.m_g()) {
    throw std::invalid_argument("generate: embedding at layer " +
                                std::to_string(hg.layer) + ", generator at " +
                                std::to_string(model.m_g()));
  }
  Var<T> s = model.generator().sentence_embed(g, hg, train, dropout_rng);
  Var<T> p = model.generator().interval(g, s, ops::gather_rows(s, perm));
  Var<T> alpha = ops::slice(p, -1, 0, 1);
  Var<T> delta = ops::slice(p, -1, 1, 2);
  Tensor<T> gamma({b, 1});
  for (std::size_t i = 0; i < b; ++i) gamma[i] = static_cast<T>(uniform01(mix_rng));
  Var<T> lambda;
  if (forced_lambda) {
    lambda = g.constant(Tensor<T>({b, 1}, static_cast<T>(*forced_lambda)));
  } else {
    lambda = ops::add(alpha, ops::mul(delta, g.constant(gamma)));
  }
  GeneratedBatch<T> out{mix_rows(hg, perm, lambda), lambda, {}};
  out.records.resize(b);
  for (std::size_t i = 0; i < b; ++i) {
    auto& r = out.records[i];
    r.alpha = alpha.value()[i];
    r.delta = delta.value()[i];
    r.gamma = gamma[i];
    r.lambda = lambda.value()[i];
    r.first = i;
    r.second = perm[i];
  }
  return out;
}

/// L_C, L_G and L_D for one batch with the given pairing.
template <typename T>
ForwardResult<T> compute_losses(Graph<T>& g, const Model<T>& model,
                                const Batch& batch,
                                const std::vector<std::size_t>& perm, double e,
                                Rng& dropout_rng, Rng& mix_rng,
                                const MixOptions& opt = {}) {
  const std::size_t b = batch.tokens.size();
  check_pairing(perm, b);
  const auto& enc = model.encoder();
  const std::size_t c = model.classes();

  auto h0 = enc.embed(g, batch.tokens);
  auto hg = model.advance(g, h0, model.m_g(), opt.train, dropout_rng);
  auto hd = model.advance(g, hg, model.m_d(), opt.train, dropout_rng);
  auto hm = model.advance(g, hd, model.layers(), opt.train, dropout_rng);

  ForwardResult<T> r;
  r.l_c = ops::kl_div(enc.classify(g, hm),
                      g.constant(one_hot<T>(batch.labels, c)));

  auto gen = generate(g, model, hg, perm, opt.train, dropout_rng, mix_rng,
                      opt.forced_lambda);
  Var<T> target = mix_label_rows(g, batch.labels, perm, gen.lambda, c);
  auto mixed_d = model.advance(g, gen.mixed, model.m_d(), opt.train, dropout_rng);
  auto mixed_m = model.advance(g, mixed_d, model.layers(), opt.train, dropout_rng);
  r.l_g = ops::kl_div(enc.classify(g, mixed_m), target);

  if (opt.use_discriminator) {
    const auto& disc = model.discriminator();
    Var<T> fake = disc.score(g, mixed_d, opt.train, dropout_rng);
    Var<T> real = disc.score(g, hd, opt.train, dropout_rng);
    Var<T> l_fake = ops::bce(fake, std::vector<T>(b, T(0)));
    Var<T> l_real = ops::bce(real, std::vector<T>(b, T(1)));
    r.l_d = model.config().ld_reduction == LdReduction::Mean
                ? ops::combine(T(0.5), l_fake, T(0.5), l_real)
                : ops::add(l_fake, l_real);
    r.bundle.l_d = r.l_d.value()[0];
  }

  r.bundle.l_c = r.l_c.value()[0];
  r.bundle.l_g = r.l_g.value()[0];
  r.bundle.e = e;
  r.bundle.total = r.bundle.l_c + r.bundle.l_g + e * r.bundle.l_d;
  r.mixes = std::move(gen.records);
  for (std::size_t i = 0; i < b; ++i) {
    r.mixes[i].mixed_label.assign(target.value().data.begin() + i * c,
                                  target.value().data.begin() + (i + 1) * c);
  }
  return r;
}

/// Routes each loss's gradient to its scope: L_C to the encoder and head,
/// L_G to layers above m_g, head and generator, e * L_D to generator and
/// discriminator only. Gradients add into the parameters' grad buffers.
template <typename T>
void apply_gradients(Graph<T>& g, const ForwardResult<T>& r) {
  if (r.l_c.valid()) g.backward(r.l_c, r.scope_c);
  if (r.l_g.valid()) g.backward(r.l_g, r.scope_g);
  if (r.l_d.valid() && r.bundle.e != 0.0) {
    g.backward(r.l_d, r.scope_d, static_cast<T>(r.bundle.e));
  }
}

}  // namespace oommix
