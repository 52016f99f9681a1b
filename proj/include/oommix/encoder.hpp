#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "oommix/graph.hpp"
#include "oommix/ops.hpp"

namespace oommix {

struct EncoderConfig {
  std::size_t layers = 4;      // M
  std::size_t dim = 64;        // D
  std::size_t heads = 4;       // H
  std::size_t max_len = 64;    // L
  std::size_t vocab = 1000;    // V
  std::size_t classes = 2;     // C
  double dropout = 0.1;
  std::size_t ffn_mult = 4;

  void validate() const {
    auto fail = [](const std::string& m) {
      throw std::invalid_argument("encoder config: " + m);
    };
    if (heads == 0 || dim % heads != 0) fail("dim must be divisible by heads");
    if (layers < 2) fail("at least 2 layers required");
    if (max_len < 2) fail("max_len must be >= 2");
    if (classes < 2) fail("at least 2 classes required");
    if (vocab < 3) fail("vocab must hold pad, unk and one token");
    if (dropout < 0.0 || dropout >= 1.0) fail("dropout must lie in [0, 1)");
    if (ffn_mult == 0) fail("ffn_mult must be positive");
  }
};

/// Padded token ids with a prefix mask of `length` ones.
struct TokenSequence {
  std::vector<std::uint32_t> ids;
  std::vector<std::uint8_t> mask;
  std::size_t length = 0;
};

/// Batched h^(m): matrix is [B, L, D]; mask is [B, L] of 0/1.
template <typename T>
struct ContextualEmbedding {
  std::size_t layer = 0;
  Var<T> matrix;
  Tensor<T> mask;

  std::size_t batch() const { return mask.shape[0]; }
};

/// Truncated normal (two standard deviations) used for weight init.
template <typename T, typename Rng>
Tensor<T> truncated_normal(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& v : t.data) {
    double x;
    do {
      x = nd(rng);
    } while (std::abs(x) > 2.0);
    v = static_cast<T>(x * stddev);
  }
  return t;
}

/// Affine map y = x W + b over the last axis.
template <typename T>
struct Linear {
  Parameter<T>* weight = nullptr;  // [in, out]
  Parameter<T>* bias = nullptr;    // [out]

  template <typename Rng>
  static Linear make(ParamStore<T>& store, const std::string& name,
                     ParamGroup group, std::size_t in, std::size_t out,
                     Rng& rng) {
    Linear l;
    l.weight = &store.add(name + ".weight", group,
                          truncated_normal<T>({in, out}, 0.02, rng));
    l.bias = &store.add(name + ".bias", group, Tensor<T>({out}));
    return l;
  }

  Var<T> operator()(Graph<T>& g, Var<T> x) const {
    return ops::add(ops::matmul(x, g.param(*weight)), g.param(*bias));
  }

  void set_group(ParamGroup gr) const {
    weight->group = gr;
    bias->group = gr;
  }
};

template <typename T>
struct LayerNormParams {
  Parameter<T>* gain = nullptr;
  Parameter<T>* bias = nullptr;

  static LayerNormParams make(ParamStore<T>& store, const std::string& name,
                              ParamGroup group, std::size_t dim) {
    LayerNormParams p;
    p.gain = &store.add(name + ".gain", group, Tensor<T>({dim}, T(1)));
    p.bias = &store.add(name + ".bias", group, Tensor<T>({dim}));
    return p;
  }

  Var<T> operator()(Graph<T>& g, Var<T> x) const {
    return ops::layer_norm(x, g.param(*gain), g.param(*bias));
  }

  void set_group(ParamGroup gr) const {
    gain->group = gr;
    bias->group = gr;
  }
};

/// Additive attention bias [B, H, L, L]: 0 on real keys, -1e9 on padding.
template <typename T>
Tensor<T> key_padding_bias(const Tensor<T>& mask, std::size_t heads) {
  const std::size_t b = mask.shape[0], l = mask.shape[1];
  Tensor<T> bias({b, heads, l, l});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t r = 0; r < heads * l; ++r)
      for (std::size_t j = 0; j < l; ++j)
        bias[(i * heads * l + r) * l + j] =
            mask[i * l + j] != T(0) ? T(0) : static_cast<T>(-1e9);
  return bias;
}

/// Post-norm transformer encoder layer: self-attention, residual, norm,
/// feed-forward, residual, norm.
template <typename T>
class TransformerLayer {
 public:
  TransformerLayer() = default;

  template <typename Rng>
  TransformerLayer(ParamStore<T>& store, const std::string& name,
                   ParamGroup group, std::size_t dim, std::size_t heads,
                   std::size_t ffn, double dropout, Rng& rng)
      : dim_(dim), heads_(heads), dropout_(dropout) {
    q_ = Linear<T>::make(store, name + ".attn.q", group, dim, dim, rng);
    k_ = Linear<T>::make(store, name + ".attn.k", group, dim, dim, rng);
    v_ = Linear<T>::make(store, name + ".attn.v", group, dim, dim, rng);
    o_ = Linear<T>::make(store, name + ".attn.o", group, dim, dim, rng);
    ln1_ = LayerNormParams<T>::make(store, name + ".ln1", group, dim);
    ff1_ = Linear<T>::make(store, name + ".ffn.in", group, dim, ffn, rng);
    ff2_ = Linear<T>::make(store, name + ".ffn.out", group, ffn, dim, rng);
    ln2_ = LayerNormParams<T>::make(store, name + ".ln2", group, dim);
  }

  /// x: [B, L, D]; mask: [B, L].
  template <typename Rng>
  Var<T> operator()(Graph<T>& g, Var<T> x, const Tensor<T>& mask, bool train,
                    Rng& rng) const {
    const auto& s = x.shape();
    if (s.size() != 3 || s[2] != dim_ || mask.shape != Shape{s[0], s[1]}) {
      throw ShapeError("transformer_layer: input " + to_string(s) +
                       " with mask " + to_string(mask.shape) +
                       " does not fit width " + std::to_string(dim_));
    }
    const std::size_t b = s[0], l = s[1], dh = dim_ / heads_;
    auto split = [&](Var<T> t) {
      return ops::permute(ops::reshape(t, {b, l, heads_, dh}), {0, 2, 1, 3});
    };
    Var<T> q = split(q_(g, x));
    Var<T> k = split(k_(g, x));
    Var<T> v = split(v_(g, x));
    Var<T> scores = ops::scale(ops::matmul(q, k, false, true),
                               T(1) / std::sqrt(static_cast<T>(dh)));
    scores = ops::add(scores, g.constant(key_padding_bias(mask, heads_)));
    Var<T> att = ops::softmax(scores, -1);
    Var<T> ctx = ops::reshape(ops::permute(ops::matmul(att, v), {0, 2, 1, 3}),
                              {b, l, dim_});
    Var<T> a = ops::dropout(o_(g, ctx), dropout_, rng, train);
    Var<T> h = ln1_(g, ops::add(x, a));
    Var<T> f = ff2_(g, ops::gelu(ff1_(g, h)));
    f = ops::dropout(f, dropout_, rng, train);
    return ln2_(g, ops::add(h, f));
  }

  void set_group(ParamGroup gr) const {
    for (auto* lin : {&q_, &k_, &v_, &o_, &ff1_, &ff2_}) lin->set_group(gr);
    ln1_.set_group(gr);
    ln2_.set_group(gr);
  }

  std::size_t dim() const { return dim_; }

 private:
  std::size_t dim_ = 0, heads_ = 1;
  double dropout_ = 0.0;
  Linear<T> q_, k_, v_, o_, ff1_, ff2_;
  LayerNormParams<T> ln1_, ln2_;
};

/// Mean over rows whose mask is set. x: [B, L, D] -> [B, D].
template <typename T>
Var<T> masked_mean_pool(Graph<T>& g, Var<T> x, const Tensor<T>& mask) {
  const std::size_t b = mask.shape[0], l = mask.shape[1];
  if (x.shape().size() != 3 || x.shape()[0] != b || x.shape()[1] != l) {
    throw ShapeError("masked_mean_pool: input " + to_string(x.shape()) +
                     " vs mask " + to_string(mask.shape));
  }
  Tensor<T> m({b, l, 1});
  Tensor<T> inv({b, 1});
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t count = 0;
    for (std::size_t j = 0; j < l; ++j) {
      m[i * l + j] = mask[i * l + j] != T(0) ? T(1) : T(0);
      count += mask[i * l + j] != T(0);
    }
    if (count == 0) {
      throw std::invalid_argument("masked_mean_pool: sequence " +
                                  std::to_string(i) + " is fully masked");
    }
    inv[i] = T(1) / static_cast<T>(count);
  }
  Var<T> summed = ops::sum(ops::mul(x, g.constant(std::move(m))), 1);
  return ops::mul(summed, g.constant(std::move(inv)));
}

/// M-layer transformer classifier, f = f_{m'} o h_m^{m'} o h_0^m.
template <typename T>
class Encoder {
 public:
  Encoder() = default;

  template <typename Rng>
  Encoder(ParamStore<T>& store, const EncoderConfig& cfg, Rng& rng)
      : cfg_(cfg) {
    cfg.validate();
    token_ = &store.add("embed.token", ParamGroup::EncoderBelowMg,
                        truncated_normal<T>({cfg.vocab, cfg.dim}, 0.02, rng));
    position_ = &store.add(
        "embed.position", ParamGroup::EncoderBelowMg,
        truncated_normal<T>({cfg.max_len, cfg.dim}, 0.02, rng));
    for (std::size_t i = 1; i <= cfg.layers; ++i) {
      layers_.emplace_back(store, "layer" + std::to_string(i),
                           ParamGroup::EncoderMgAndAbove, cfg.dim, cfg.heads,
                           cfg.dim * cfg.ffn_mult, cfg.dropout, rng);
    }
    head_ = Linear<T>::make(store, "head", ParamGroup::ClassifierHead, cfg.dim,
                            cfg.classes, rng);
  }

  const EncoderConfig& config() const { return cfg_; }

  /// Embeddings and layers 1..m_g form the lower group; layers above m_g
  /// are the part of f_{m_g} inside the encoder.
  void assign_groups(std::size_t m_g) {
    token_->group = ParamGroup::EncoderBelowMg;
    position_->group = ParamGroup::EncoderBelowMg;
    for (std::size_t i = 1; i <= layers_.size(); ++i) {
      layers_[i - 1].set_group(i <= m_g ? ParamGroup::EncoderBelowMg
                                        : ParamGroup::EncoderMgAndAbove);
    }
  }

  /// h^(0): token plus learned position embeddings.
  ContextualEmbedding<T> embed(Graph<T>& g,
                               const std::vector<const TokenSequence*>& batch) const {
    if (batch.empty()) throw std::invalid_argument("embed: empty batch");
    const std::size_t l = cfg_.max_len;
    std::vector<std::size_t> ids;
    ids.reserve(batch.size() * l);
    Tensor<T> mask({batch.size(), l});
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto& seq = *batch[i];
      if (seq.ids.size() != l || seq.mask.size() != l) {
        throw ShapeError("embed: sequence length " +
                         std::to_string(seq.ids.size()) + " != max_len " +
                         std::to_string(l));
      }
      for (std::size_t j = 0; j < l; ++j) {
        if (seq.ids[j] >= cfg_.vocab) {
          throw std::out_of_range("embed: token id " +
                                  std::to_string(seq.ids[j]) +
                                  " outside vocabulary of " +
                                  std::to_string(cfg_.vocab));
        }
        ids.push_back(seq.ids[j]);
        mask[i * l + j] = seq.mask[j] ? T(1) : T(0);
      }
    }
    Var<T> tok = ops::reshape(ops::gather_rows(g.param(*token_), ids),
                              {batch.size(), l, cfg_.dim});
    Var<T> h = ops::add(tok, g.param(*position_));
    return {0, h, std::move(mask)};
  }

  /// Applies layers m+1 .. target to h^(m).
  template <typename Rng>
  ContextualEmbedding<T> forward_layers(Graph<T>& g, const ContextualEmbedding<T>& h,
                                        std::size_t target, bool train,
                                        Rng& rng) const {
    if (target <= h.layer || target > layers_.size()) {
      throw std::invalid_argument("forward_layers: cannot map layer " +
                                  std::to_string(h.layer) + " to layer " +
                                  std::to_string(target));
    }
    Var<T> x = h.matrix;
    for (std::size_t i = h.layer + 1; i <= target; ++i)
      x = layers_[i - 1](g, x, h.mask, train, rng);
    return {target, x, h.mask};
  }

  /// Pooled sentence vector of the last layer, [B, D].
  Var<T> sentence(Graph<T>& g, const ContextualEmbedding<T>& h) const {
    return masked_mean_pool(g, h.matrix, h.mask);
  }

  /// Class probabilities from pooled sentence vectors, [B, C].
  Var<T> head(Graph<T>& g, Var<T> pooled) const {
    return ops::softmax(head_(g, pooled), -1);
  }

  Var<T> classify(Graph<T>& g, const ContextualEmbedding<T>& h) const {
    if (h.layer != layers_.size()) {
      throw std::invalid_argument("classify: expects layer " +
                                  std::to_string(layers_.size()) + ", got " +
                                  std::to_string(h.layer));
    }
    return head(g, sentence(g, h));
  }

  std::size_t num_layers() const { return layers_.size(); }
  const TransformerLayer<T>& layer(std::size_t i) const { return layers_.at(i - 1); }
  Parameter<T>& head_weight() const { return *head_.weight; }
  Parameter<T>& head_bias() const { return *head_.bias; }

 private:
  EncoderConfig cfg_;
  Parameter<T>* token_ = nullptr;
  Parameter<T>* position_ = nullptr;
  std::vector<TransformerLayer<T>> layers_;
  Linear<T> head_;
};

}  // namespace oommix
