#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "oommix/config.hpp"
#include "oommix/corpus.hpp"
#include "oommix/trainer.hpp"

namespace oommix {

struct PreparedData {
  DatasetSplit raw;
  Vocabulary vocab;
  EncodedSplit encoded;
};

/// Splits off round(fraction * n_c) examples of every class as validation.
inline std::pair<std::vector<LabeledExample>, std::vector<LabeledExample>>
stratified_holdout(const std::vector<LabeledExample>& xs, double fraction,
                   std::uint64_t seed) {
  if (fraction < 0.0 || fraction >= 1.0) {
    throw std::invalid_argument("validation fraction must lie in [0, 1)");
  }
  const std::size_t classes = class_count(xs);
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < xs.size(); ++i) by_class[xs[i].label].push_back(i);
  Rng rng = make_rng(seed, Stream::Data, 0x484f);
  std::vector<bool> held(xs.size(), false);
  for (auto& idx : by_class) {
    seeded_shuffle(idx, rng);
    const auto k = static_cast<std::size_t>(
        std::llround(fraction * static_cast<double>(idx.size())));
    for (std::size_t j = 0; j < k; ++j) held[idx[j]] = true;
  }
  std::vector<LabeledExample> rest, holdout;
  for (std::size_t i = 0; i < xs.size(); ++i) (held[i] ? holdout : rest).push_back(xs[i]);
  return {rest, holdout};
}

/// Loads or synthesizes the dataset, subsamples, augments and encodes it.
inline PreparedData prepare_data(const RunConfig& rc) {
  PreparedData p;
  const auto& d = rc.data;
  if (d.source == "synthetic") {
    p.raw = make_synthetic(rc.synth, rc.seed);
  } else {
    if (d.train_csv.empty()) throw ConfigError("data.train_csv is required for csv data");
    p.raw.train = load_csv(d.train_csv, d.schema);
    if (!d.test_csv.empty()) p.raw.test = load_csv(d.test_csv, d.schema);
    if (!d.valid_csv.empty()) {
      p.raw.valid = load_csv(d.valid_csv, d.schema);
    } else {
      auto [rest, holdout] = stratified_holdout(p.raw.train, d.valid_fraction, rc.seed);
      p.raw.train = std::move(rest);
      p.raw.valid = std::move(holdout);
    }
    p.raw.classes = std::max({class_count(p.raw.train), class_count(p.raw.valid),
                              class_count(p.raw.test)});
  }
  if (d.train_size > 0) {
    p.raw.train = stratified_sample(p.raw.train, d.train_size, rc.seed, p.raw.classes);
  }
  p.vocab = build_vocab(p.raw.train, rc.model.encoder.vocab);
  if (d.eda) {
    std::vector<std::string> pool(p.vocab.tokens().begin() + 2, p.vocab.tokens().end());
    Rng rng = make_rng(rc.seed, Stream::Augment);
    const std::size_t n = p.raw.train.size();
    for (std::size_t c = 0; c < d.eda_copies; ++c)
      for (std::size_t i = 0; i < n; ++i)
        p.raw.train.push_back(
            {eda_augment(p.raw.train[i].text, rng, d.eda_cfg, pool), p.raw.train[i].label});
  }
  p.encoded = encode(p.raw, p.vocab, rc.model.encoder.max_len);
  return p;
}

/// Model configuration sized to the prepared vocabulary and class count.
inline ModelConfig model_config_for(const RunConfig& rc, const Vocabulary& vocab,
                                    std::size_t classes) {
  ModelConfig mc = rc.model;
  mc.encoder.vocab = vocab.size();
  mc.encoder.classes = classes;
  return mc;
}

}  // namespace oommix
