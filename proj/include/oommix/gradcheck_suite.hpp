#pragma once

#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "oommix/corpus.hpp"
#include "oommix/gradcheck.hpp"
#include "oommix/oommix.hpp"
#include "oommix/ops.hpp"

namespace oommix {

struct GradCheckRow {
  std::string name;
  double max_rel_error = 0;
  std::size_t instances = 0;
  std::size_t entries = 0;
};

namespace detail {

struct CheckCase {
  std::string name;
  std::function<GradCheckResult(Rng&)> run;
};

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + std::min(hi - lo, static_cast<std::size_t>(uniform01(rng) *
                                                         static_cast<double>(hi - lo + 1)));
}

inline Tensor<double> normal_tensor(const Shape& s, Rng& rng, double mean = 0.0,
                                    double sd = 1.0) {
  std::normal_distribution<double> nd(mean, sd);
  Tensor<double> t(s);
  for (auto& v : t.data) v = nd(rng);
  return t;
}

inline Tensor<double> uniform_tensor(const Shape& s, Rng& rng, double lo, double hi) {
  Tensor<double> t(s);
  for (auto& v : t.data) v = lo + (hi - lo) * uniform01(rng);
  return t;
}

/// Scalar probe mean(x * w) with fixed random weights.
struct Probe {
  Tensor<double> w;
  Var<double> operator()(Graph<double>& g, Var<double> x) const {
    return ops::mean_all(ops::mul(x, g.constant(w)));
  }
};

inline Probe probe_for(const Shape& s, Rng& rng) { return {normal_tensor(s, rng)}; }

/// Parameters registered in a local store for one instance.
struct Inputs {
  ParamStore<double> store;
  std::vector<Parameter<double>*> list;
  Parameter<double>& add(Tensor<double> t) {
    auto& p = store.add("x" + std::to_string(list.size()), ParamGroup::ClassifierHead,
                        std::move(t));
    list.push_back(&p);
    return p;
  }
};

inline Shape random_shape(Rng& rng, std::size_t rank_lo, std::size_t rank_hi,
                          std::size_t dim_hi = 4) {
  Shape s(pick(rng, rank_lo, rank_hi));
  for (auto& d : s) d = pick(rng, 1, dim_hi);
  return s;
}

inline Tensor<double> padding_mask(std::size_t b, std::size_t l, Rng& rng) {
  Tensor<double> m({b, l}, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t len = pick(rng, 1, l);
    for (std::size_t j = 0; j < len; ++j) m[i * l + j] = 1.0;
  }
  return m;
}

inline std::vector<CheckCase> primitive_cases() {
  std::vector<CheckCase> cases;
  auto elementwise = [&](const std::string& name, double lo, double hi,
                         Var<double> (*f)(Var<double>)) {
    cases.push_back({name, [=](Rng& rng) {
                       Inputs in;
                       Shape s = random_shape(rng, 1, 3);
                       auto& x = in.add(uniform_tensor(s, rng, lo, hi));
                       Probe pr = probe_for(s, rng);
                       return grad_check<double>(
                           [&](Graph<double>& g) { return pr(g, f(g.param(x))); }, in.list);
                     }});
  };
  elementwise("exp", -2, 2, &ops::exp<double>);
  elementwise("log", 0.2, 3, &ops::log<double>);
  elementwise("sigmoid", -4, 4, &ops::sigmoid<double>);
  elementwise("gelu", -3, 3, &ops::gelu<double>);

  auto binary = [&](const std::string& name, Var<double> (*f)(Var<double>, Var<double>)) {
    cases.push_back({name, [=](Rng& rng) {
                       Inputs in;
                       Shape sa = random_shape(rng, 1, 3);
                       Shape sb = sa;
                       // Broadcast a suffix or a size-1 axis half of the time.
                       if (uniform01(rng) < 0.5) {
                         if (sb.size() > 1 && uniform01(rng) < 0.5) {
                           sb.erase(sb.begin());
                         } else {
                           sb[pick(rng, 0, sb.size() - 1)] = 1;
                         }
                       }
                       auto& a = in.add(normal_tensor(sa, rng));
                       auto& b = in.add(normal_tensor(sb, rng));
                       Probe pr = probe_for(sa, rng);
                       return grad_check<double>(
                           [&](Graph<double>& g) { return pr(g, f(g.param(a), g.param(b))); },
                           in.list);
                     }});
  };
  binary("add", &ops::add<double>);
  binary("sub", &ops::sub<double>);
  binary("mul", &ops::mul<double>);

  cases.push_back({"combine", [](Rng& rng) {
                     Inputs in;
                     Shape s = random_shape(rng, 1, 3);
                     auto& x = in.add(normal_tensor(s, rng));
                     auto& y = in.add(normal_tensor(s, rng));
                     const double a = uniform01(rng) * 4 - 2, b = uniform01(rng) * 4 - 2;
                     Probe pr = probe_for(s, rng);
                     return grad_check<double>(
                         [&](Graph<double>& g) {
                           return pr(g, ops::affine(ops::combine(a, g.param(x), b, g.param(y)),
                                                    0.5, 0.25));
                         },
                         in.list);
                   }});

  cases.push_back({"matmul", [](Rng& rng) {
                     Inputs in;
                     const bool ta = uniform01(rng) < 0.5, tb = uniform01(rng) < 0.5;
                     const bool batched = uniform01(rng) < 0.5;
                     const std::size_t n = pick(rng, 1, 4), k = pick(rng, 1, 4),
                                       m = pick(rng, 1, 4), bt = pick(rng, 1, 3);
                     Shape sa = ta ? Shape{k, n} : Shape{n, k};
                     Shape sb = tb ? Shape{m, k} : Shape{k, m};
                     if (batched) {
                       sa.insert(sa.begin(), bt);
                       if (uniform01(rng) < 0.5) sb.insert(sb.begin(), bt);
                     }
                     auto& a = in.add(normal_tensor(sa, rng));
                     auto& b = in.add(normal_tensor(sb, rng));
                     Shape so = batched ? Shape{bt, n, m} : Shape{n, m};
                     Probe pr = probe_for(so, rng);
                     return grad_check<double>(
                         [&](Graph<double>& g) {
                           return pr(g, ops::matmul(g.param(a), g.param(b), ta, tb));
                         },
                         in.list);
                   }});

  cases.push_back({"softmax", [](Rng& rng) {
                     Inputs in;
                     Shape s = random_shape(rng, 1, 3);
                     const auto axis = static_cast<std::ptrdiff_t>(pick(rng, 0, s.size() - 1));
                     auto& x = in.add(normal_tensor(s, rng));
                     Probe pr = probe_for(s, rng);
                     return grad_check<double>(
                         [&](Graph<double>& g) { return pr(g, ops::softmax(g.param(x), axis)); },
                         in.list);
                   }});

  cases.push_back({"layer_norm", [](Rng& rng) {
                     Inputs in;
                     Shape s = random_shape(rng, 1, 2);
                     s.push_back(pick(rng, 2, 8));
                     auto& x = in.add(normal_tensor(s, rng));
                     auto& gain = in.add(normal_tensor({s.back()}, rng, 1.0, 0.3));
                     auto& bias = in.add(normal_tensor({s.back()}, rng));
                     Probe pr = probe_for(s, rng);
                     return grad_check<double>(
                         [&](Graph<double>& g) {
                           return pr(g, ops::layer_norm(g.param(x), g.param(gain),
                                                        g.param(bias)));
                         },
                         in.list);
                   }});

  auto reduction = [&](const std::string& name, bool use_mean) {
    cases.push_back({name, [=](Rng& rng) {
                       Inputs in;
                       Shape s = random_shape(rng, 1, 3);
                       const std::size_t axis = pick(rng, 0, s.size() - 1);
                       const bool keep = uniform01(rng) < 0.5;
                       auto& x = in.add(normal_tensor(s, rng));
                       Shape so = s;
                       if (keep) so[axis] = 1;
                       else so.erase(so.begin() + static_cast<std::ptrdiff_t>(axis));
                       if (so.empty()) so = {1};
                       Probe pr = probe_for(so, rng);
                       const auto ax = static_cast<std::ptrdiff_t>(axis);
                       return grad_check<double>(
                           [&](Graph<double>& g) {
                             Var<double> y = use_mean ? ops::mean(g.param(x), ax, keep)
                                                      : ops::sum(g.param(x), ax, keep);
                             return pr(g, ops::reshape(y, so));
                           },
                           in.list);
                     }});
  };
  reduction("sum", false);
  reduction("mean", true);

  cases.push_back({"concat", [](Rng& rng) {
                     Inputs in;
                     Shape s = random_shape(rng, 1, 3);
                     const std::size_t axis = pick(rng, 0, s.size() - 1);
                     const std::size_t parts = pick(rng, 2, 3);
                     std::vector<Parameter<double>*> xs;
                     Shape so = s;
                     so[axis] = 0;
                     for (std::size_t i = 0; i < parts; ++i) {
                       Shape si = s;
                       si[axis] = pick(rng, 1, 3);
                       so[axis] += si[axis];
                       xs.push_back(&in.add(normal_tensor(si, rng)));
                     }
                     Probe pr = probe_for(so, rng);
                     return grad_check<double>(
                         [&](Graph<double>& g) {
                           std::vector<Var<double>> vs;
                           for (auto* p : xs) vs.push_back(g.param(*p));
                           return pr(g, ops::concat(vs, static_cast<std::ptrdiff_t>(axis)));
                         },
                         in.list);
                   }});

  cases.push_back({"slice", [](Rng& rng) {
                     Inputs in;
                     Shape s = random_shape(rng, 1, 3);
                     const std::size_t axis = pick(rng, 0, s.size() - 1);
                     s[axis] = pick(rng, 2, 5);
                     const std::size_t b = pick(rng, 0, s[axis] - 1);
                     const std::size_t e = pick(rng, b + 1, s[axis]);
                     auto& x = in.add(normal_tensor(s, rng));
                     Shape so = s;
                     so[axis] = e - b;
                     Probe pr = probe_for(so, rng);
                     return grad_check<double>(
                         [&](Graph<double>& g) {
                           return pr(g, ops::slice(g.param(x), static_cast<std::ptrdiff_t>(axis),
                                                   b, e));
                         },
                         in.list);
                   }});

  cases.push_back({"reshape_permute", [](Rng& rng) {
                     Inputs in;
                     Shape s = random_shape(rng, 2, 4);
                     auto& x = in.add(normal_tensor(s, rng));
                     std::vector<std::size_t> perm(s.size());
                     std::iota(perm.begin(), perm.end(), std::size_t{0});
                     seeded_shuffle(perm, rng);
                     Shape sp(s.size());
                     for (std::size_t i = 0; i < s.size(); ++i) sp[i] = s[perm[i]];
                     Probe pr = probe_for({numel(s)}, rng);
                     return grad_check<double>(
                         [&](Graph<double>& g) {
                           return pr(g, ops::reshape(ops::permute(g.param(x), perm),
                                                     {numel(s)}));
                         },
                         in.list);
                   }});

  cases.push_back({"gather_rows", [](Rng& rng) {
                     Inputs in;
                     const std::size_t n = pick(rng, 1, 5), d = pick(rng, 1, 4),
                                       m = pick(rng, 1, 6);
                     auto& table = in.add(normal_tensor({n, d}, rng));
                     std::vector<std::size_t> ids(m);
                     for (auto& id : ids) id = pick(rng, 0, n - 1);
                     Probe pr = probe_for({m, d}, rng);
                     return grad_check<double>(
                         [&](Graph<double>& g) {
                           return pr(g, ops::gather_rows(g.param(table), ids));
                         },
                         in.list);
                   }});

  cases.push_back({"masked_fill", [](Rng& rng) {
                     Inputs in;
                     Shape s = random_shape(rng, 1, 3);
                     auto& x = in.add(normal_tensor(s, rng));
                     Tensor<double> mask(s);
                     for (auto& v : mask.data) v = uniform01(rng) < 0.3 ? 1.0 : 0.0;
                     Probe pr = probe_for(s, rng);
                     return grad_check<double>(
                         [&](Graph<double>& g) {
                           return pr(g, ops::masked_fill(g.param(x), mask, -3.0));
                         },
                         in.list);
                   }});

  cases.push_back({"dropout", [](Rng& rng) {
                     Inputs in;
                     Shape s = random_shape(rng, 1, 3);
                     auto& x = in.add(normal_tensor(s, rng));
                     const double p = 0.1 + 0.5 * uniform01(rng);
                     const std::uint64_t seed = rng();
                     Probe pr = probe_for(s, rng);
                     return grad_check<double>(
                         [&](Graph<double>& g) {
                           Rng mask_rng(seed);  // same mask on every evaluation
                           return pr(g, ops::dropout(g.param(x), p, mask_rng, true));
                         },
                         in.list);
                   }});

  cases.push_back({"kl_div", [](Rng& rng) {
                     Inputs in;
                     const std::size_t b = pick(rng, 1, 4), c = pick(rng, 2, 5);
                     auto& zp = in.add(normal_tensor({b, c}, rng));
                     auto& zt = in.add(normal_tensor({b, c}, rng));
                     return grad_check<double>(
                         [&](Graph<double>& g) {
                           return ops::kl_div(ops::softmax(g.param(zp), -1),
                                              ops::softmax(g.param(zt), -1));
                         },
                         in.list);
                   }});

  cases.push_back({"bce", [](Rng& rng) {
                     Inputs in;
                     const std::size_t b = pick(rng, 1, 6);
                     auto& z = in.add(normal_tensor({b, 1}, rng));
                     std::vector<double> labels(b);
                     for (auto& y : labels) y = uniform01(rng) < 0.5 ? 0.0 : 1.0;
                     return grad_check<double>(
                         [&](Graph<double>& g) {
                           return ops::bce(ops::sigmoid(g.param(z)), labels);
                         },
                         in.list);
                   }});
  return cases;
}

/// Redraws every parameter from N(0, sd) so gradients sit well above
/// finite-difference roundoff.
template <typename T>
std::vector<Parameter<T>*> randomize(ParamStore<T>& store, Rng& rng, double sd = 0.5) {
  std::vector<Parameter<T>*> all;
  std::normal_distribution<double> nd(0.0, sd);
  for (std::size_t i = 0; i < store.size(); ++i) {
    for (auto& v : store[i].value.data) v = static_cast<T>(nd(rng));
    all.push_back(&store[i]);
  }
  return all;
}

inline EncoderConfig tiny_encoder_config(Rng& rng) {
  EncoderConfig cfg;
  cfg.layers = 2;
  cfg.heads = pick(rng, 1, 2);
  cfg.dim = 4 * cfg.heads;
  cfg.max_len = pick(rng, 3, 5);
  cfg.vocab = 12;
  cfg.classes = pick(rng, 2, 3);
  cfg.dropout = 0.0;
  cfg.ffn_mult = 2;
  return cfg;
}

/// One composed-block instance in precision T. Every random draw happens in
/// double from streams derived from the instance seed, so the double and
/// extended builds of the same seed describe the same function.
template <typename T>
struct BlockInstance {
  ParamStore<T> inputs;
  std::shared_ptr<void> owner;  // layer, head or model the closure refers to
  std::vector<Parameter<T>*> params;
  std::function<Var<T>(Graph<T>&)> build;

  Parameter<T>& input(const Tensor<double>& t) {
    return inputs.add("x" + std::to_string(inputs.size()), ParamGroup::ClassifierHead,
                      t.template cast<T>());
  }
  void collect(ParamStore<T>& store, Rng& rng) {
    params = randomize(store, rng);
    for (std::size_t i = 0; i < inputs.size(); ++i) params.push_back(&inputs[i]);
  }
};

template <typename T>
Var<T> probe(Graph<T>& g, Var<T> x, const Tensor<double>& w) {
  return ops::mean_all(ops::mul(x, g.constant(w.template cast<T>())));
}

template <typename T>
BlockInstance<T> transformer_layer_block(std::uint64_t seed) {
  Rng rng = make_rng(seed, Stream::Analysis, 0), init = make_rng(seed, Stream::Init);
  BlockInstance<T> bi;
  const auto cfg = tiny_encoder_config(rng);
  auto store = std::make_shared<std::pair<ParamStore<T>, std::unique_ptr<TransformerLayer<T>>>>();
  store->second = std::make_unique<TransformerLayer<T>>(
      store->first, "t", ParamGroup::EncoderBelowMg, cfg.dim, cfg.heads, cfg.dim * cfg.ffn_mult,
      0.0, init);
  const std::size_t b = pick(rng, 1, 3), l = cfg.max_len;
  auto& x = bi.input(normal_tensor({b, l, cfg.dim}, rng));
  const auto mask = padding_mask(b, l, rng).template cast<T>();
  const auto w = normal_tensor({b, l, cfg.dim}, rng);
  bi.collect(store->first, rng);
  const auto* layer = store->second.get();
  bi.owner = store;
  bi.build = [layer, &x, mask, w](Graph<T>& g) {
    Rng unused(0);
    return probe(g, (*layer)(g, g.param(x), mask, false, unused), w);
  };
  return bi;
}

template <typename T>
BlockInstance<T> generator_block(std::uint64_t seed) {
  Rng rng = make_rng(seed, Stream::Analysis, 0), init = make_rng(seed, Stream::Init);
  BlockInstance<T> bi;
  const auto cfg = tiny_encoder_config(rng);
  auto store = std::make_shared<std::pair<ParamStore<T>, std::unique_ptr<Generator<T>>>>();
  store->second = std::make_unique<Generator<T>>(store->first, cfg, cfg.dim, init);
  const std::size_t b = pick(rng, 1, 3), l = cfg.max_len;
  auto& h1 = bi.input(normal_tensor({b, l, cfg.dim}, rng));
  auto& h2 = bi.input(normal_tensor({b, l, cfg.dim}, rng));
  const auto m1 = padding_mask(b, l, rng).template cast<T>();
  const auto m2 = padding_mask(b, l, rng).template cast<T>();
  const auto gamma = uniform_tensor({b, 1}, rng, 0, 1).template cast<T>();
  const auto w = normal_tensor({b, 1}, rng);
  bi.collect(store->first, rng);
  const auto* gen = store->second.get();
  bi.owner = store;
  bi.build = [gen, &h1, &h2, m1, m2, gamma, w](Graph<T>& g) {
    Rng unused(0);
    auto [alpha, delta] = gen->interval(g, ContextualEmbedding<T>{1, g.param(h1), m1},
                                        ContextualEmbedding<T>{1, g.param(h2), m2}, false,
                                        unused);
    // lambda = alpha + gamma * delta
    return probe(g, ops::add(alpha, ops::mul(delta, g.constant(gamma))), w);
  };
  return bi;
}

template <typename T>
BlockInstance<T> discriminator_block(std::uint64_t seed) {
  Rng rng = make_rng(seed, Stream::Analysis, 0), init = make_rng(seed, Stream::Init);
  BlockInstance<T> bi;
  const auto cfg = tiny_encoder_config(rng);
  auto store = std::make_shared<std::pair<ParamStore<T>, std::unique_ptr<Discriminator<T>>>>();
  store->second = std::make_unique<Discriminator<T>>(store->first, cfg, cfg.dim, init);
  const std::size_t b = pick(rng, 1, 3), l = cfg.max_len;
  auto& h = bi.input(normal_tensor({b, l, cfg.dim}, rng));
  const auto mask = padding_mask(b, l, rng).template cast<T>();
  const auto w = normal_tensor({b, 1}, rng);
  bi.collect(store->first, rng);
  const auto* disc = store->second.get();
  bi.owner = store;
  bi.build = [disc, &h, mask, w](Graph<T>& g) {
    Rng unused(0);
    return probe(g, disc->score(g, ContextualEmbedding<T>{2, g.param(h), mask}, false, unused),
                 w);
  };
  return bi;
}

/// Loss `which` (0 classification, 1 generated, 2 discrimination) of a tiny
/// model with m_g = 1 and m_d = 2, evaluated without dropout.
template <typename T>
BlockInstance<T> loss_block(std::uint64_t seed, int which) {
  Rng rng = make_rng(seed, Stream::Analysis, 0);
  BlockInstance<T> bi;
  ModelConfig mc;
  mc.encoder = tiny_encoder_config(rng);
  mc.m_g = 1;
  mc.m_d = 2;
  struct State {
    Model<T> model;
    std::vector<TokenSequence> seqs;
    Batch batch;
    std::vector<std::size_t> perm;
  };
  auto st = std::make_shared<State>(State{Model<T>(mc, seed), {}, {}, {}});
  const std::size_t b = pick(rng, 2, 4), l = mc.encoder.max_len;
  st->seqs.resize(b);
  for (auto& s : st->seqs) {
    s.length = pick(rng, 1, l);
    s.ids.assign(l, kPadId);
    s.mask.assign(l, 0);
    for (std::size_t j = 0; j < s.length; ++j) {
      s.ids[j] = static_cast<std::uint32_t>(pick(rng, 1, mc.encoder.vocab - 1));
      s.mask[j] = 1;
    }
    st->batch.tokens.push_back(&s);
    st->batch.labels.push_back(pick(rng, 0, mc.encoder.classes - 1));
  }
  st->perm.resize(b);
  std::iota(st->perm.begin(), st->perm.end(), std::size_t{0});
  seeded_shuffle(st->perm, rng);
  const std::uint64_t mix_seed = rng();
  bi.collect(st->model.params(), rng);
  State* s = st.get();
  bi.owner = st;
  bi.build = [s, mix_seed, which](Graph<T>& g) {
    Rng dropout(0), mix(mix_seed);
    MixOptions opt;
    opt.train = false;
    auto r = compute_losses(g, s->model, s->batch, s->perm, T(1), dropout, mix, opt);
    return which == 0 ? r.l_c : which == 1 ? r.l_g : r.l_d;
  };
  return bi;
}

/// Analytic gradients in 64-bit against central differences evaluated in
/// extended precision, so the oracle's own roundoff stays far below the
/// tolerance even for entries whose true gradient is tiny or exactly zero.
template <typename Make>
GradCheckResult check_block(Rng& rng, Make make, std::size_t entries) {
  const std::uint64_t seed = rng();
  auto lo = make(seed, static_cast<double*>(nullptr));
  auto hi = make(seed, static_cast<long double*>(nullptr));
  return grad_check_ref<double, long double>(lo.build, lo.params, hi.build, hi.params,
                                             1e-5L, entries);
}

inline std::vector<CheckCase> block_cases() {
  std::vector<CheckCase> cases;
  constexpr std::size_t kEntries = 6;
  auto add = [&](const std::string& name, auto make) {
    cases.push_back({name, [make](Rng& rng) { return check_block(rng, make, kEntries); }});
  };
  add("transformer_layer",
      []<typename T>(std::uint64_t s, T*) { return transformer_layer_block<T>(s); });
  add("generator_head", []<typename T>(std::uint64_t s, T*) { return generator_block<T>(s); });
  add("discriminator_head",
      []<typename T>(std::uint64_t s, T*) { return discriminator_block<T>(s); });
  add("loss_classification",
      []<typename T>(std::uint64_t s, T*) { return loss_block<T>(s, 0); });
  add("loss_generated", []<typename T>(std::uint64_t s, T*) { return loss_block<T>(s, 1); });
  add("loss_discrimination",
      []<typename T>(std::uint64_t s, T*) { return loss_block<T>(s, 2); });
  return cases;
}

}  // namespace detail

/// Finite-difference checks of every primitive and composed block with
/// `instances` random shapes and seeds each. Gradients under test are 64-bit.
inline std::vector<GradCheckRow> run_gradcheck_suite(std::size_t instances = 20,
                                                     std::uint64_t seed = 1) {
  std::vector<GradCheckRow> rows;
  auto cases = detail::primitive_cases();
  auto blocks = detail::block_cases();
  cases.insert(cases.end(), blocks.begin(), blocks.end());
  for (std::size_t c = 0; c < cases.size(); ++c) {
    GradCheckRow row{cases[c].name, 0.0, 0, 0};
    for (std::size_t i = 0; i < instances; ++i) {
      Rng rng = make_rng(seed, Stream::Analysis, (c << 16) | i);
      const auto r = cases[c].run(rng);
      row.max_rel_error = std::max(row.max_rel_error, r.max_rel_error);
      row.entries += r.checked;
      ++row.instances;
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace oommix
