#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "oommix/encoder.hpp"
#include "oommix/rng.hpp"

namespace oommix {

struct LabeledExample {
  std::string text;
  std::size_t label = 0;

  bool operator==(const LabeledExample&) const = default;
};

/// Fisher-Yates with the library's own index draw, so orders are stable
/// across standard library implementations.
template <typename V>
void seeded_shuffle(std::vector<V>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(v[i - 1], v[std::min(j, i - 1)]);
  }
}

inline std::size_t class_count(const std::vector<LabeledExample>& xs) {
  std::size_t c = 0;
  for (const auto& x : xs) c = std::max(c, x.label + 1);
  return c;
}

// ---------------------------------------------------------------------------
// CSV

/// Parses RFC 4180 style CSV (quoted fields, doubled quotes, embedded
/// newlines). Each record carries the 1-based line it starts on.
struct CsvRecord {
  std::size_t line = 0;
  std::vector<std::string> fields;
};

inline std::vector<CsvRecord> parse_csv(std::istream& in) {
  std::vector<CsvRecord> rows;
  std::string field;
  CsvRecord rec;
  bool in_quotes = false, field_started = false, any = false;
  std::size_t line = 1;
  rec.line = 1;
  char ch;
  auto end_field = [&] {
    rec.fields.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_record = [&] {
    if (any) {
      end_field();
      rows.push_back(std::move(rec));
    }
    rec = CsvRecord{};
    rec.line = line;
    any = false;
  };
  while (in.get(ch)) {
    if (in_quotes) {
      if (ch == '"') {
        if (in.peek() == '"') {
          in.get(ch);
          field += '"';
        } else {
          in_quotes = false;
        }
      } else {
        if (ch == '\n') ++line;
        field += ch;
      }
      continue;
    }
    switch (ch) {
      case '"':
        if (field_started && !field.empty()) {
          throw std::runtime_error("csv line " + std::to_string(rec.line) +
                                   ": stray quote inside unquoted field");
        }
        in_quotes = true;
        field_started = any = true;
        break;
      case ',':
        any = true;
        end_field();
        break;
      case '\r':
        break;
      case '\n':
        ++line;
        end_record();
        break;
      default:
        field += ch;
        field_started = any = true;
    }
  }
  if (in_quotes) {
    throw std::runtime_error("csv line " + std::to_string(rec.line) +
                             ": unterminated quoted field");
  }
  end_record();
  return rows;
}

inline std::string csv_quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

struct CsvSchema {
  std::size_t label_column = 0;
  std::vector<std::size_t> text_columns{1};
};

/// Labeled examples from a benchmark-style CSV: 1-based labels, text
/// columns joined with one space.
inline std::vector<LabeledExample> load_csv(std::istream& in,
                                            const CsvSchema& schema = {}) {
  std::vector<LabeledExample> out;
  for (auto& rec : parse_csv(in)) {
    auto fail = [&](const std::string& m) {
      throw std::runtime_error("csv line " + std::to_string(rec.line) + ": " + m);
    };
    std::size_t need = schema.label_column;
    for (auto c : schema.text_columns) need = std::max(need, c);
    if (rec.fields.size() <= need) {
      fail("expected at least " + std::to_string(need + 1) + " fields, found " +
           std::to_string(rec.fields.size()));
    }
    const std::string& ls = rec.fields[schema.label_column];
    std::size_t pos = 0;
    long long label = 0;
    try {
      label = std::stoll(ls, &pos);
    } catch (const std::exception&) {
      fail("label '" + ls + "' is not an integer");
    }
    if (pos != ls.size()) fail("label '" + ls + "' is not an integer");
    if (label < 1) fail("labels are 1-based, found " + ls);
    LabeledExample ex;
    ex.label = static_cast<std::size_t>(label - 1);
    for (std::size_t i = 0; i < schema.text_columns.size(); ++i) {
      if (i) ex.text += ' ';
      ex.text += rec.fields[schema.text_columns[i]];
    }
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::vector<LabeledExample> load_csv(const std::string& path,
                                            const CsvSchema& schema = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return load_csv(in, schema);
}

/// Inverse of load_csv for one text column.
inline std::string to_csv(const std::vector<LabeledExample>& xs) {
  std::string out;
  for (const auto& x : xs) {
    out += csv_quote(std::to_string(x.label + 1));
    out += ',';
    out += csv_quote(x.text);
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary and tokenization

inline constexpr std::uint32_t kPadId = 0;
inline constexpr std::uint32_t kUnkId = 1;

/// Lowercased words, split on whitespace and ASCII punctuation.
inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isspace(c) || (c < 128 && std::ispunct(c))) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += static_cast<char>(c < 128 ? std::tolower(c) : c);
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

class Vocabulary {
 public:
  Vocabulary() : tokens_{"<pad>", "<unk>"} {}

  /// From an explicit token list whose first two entries are pad and unk.
  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < 2) throw std::invalid_argument("vocabulary lacks specials");
    for (std::uint32_t i = 2; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], i).second) {
        throw std::invalid_argument("duplicate vocabulary token " + tokens_[i]);
      }
    }
  }

  std::uint32_t id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnkId : it->second;
  }
  bool contains(const std::string& word) const { return index_.count(word) != 0; }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(std::uint32_t id) const { return tokens_.at(id); }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::uint32_t> index_;
};

/// Top max_size - 2 words by frequency, ties broken lexicographically.
inline Vocabulary build_vocab(const std::vector<LabeledExample>& xs,
                              std::size_t max_size) {
  if (max_size < 3) throw std::invalid_argument("vocabulary size must be >= 3");
  std::map<std::string, std::size_t> freq;
  for (const auto& x : xs)
    for (auto& w : split_words(x.text)) ++freq[w];
  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens{"<pad>", "<unk>"};
  for (std::size_t i = 0; i < ranked.size() && tokens.size() < max_size; ++i)
    tokens.push_back(ranked[i].first);
  return Vocabulary(std::move(tokens));
}

/// Truncates or pads to max_len. Text without words becomes a single unk.
inline TokenSequence tokenize(const std::string& text, const Vocabulary& vocab,
                              std::size_t max_len) {
  TokenSequence seq;
  seq.ids.assign(max_len, kPadId);
  seq.mask.assign(max_len, 0);
  auto words = split_words(text);
  if (words.empty()) {
    seq.ids[0] = kUnkId;
    seq.mask[0] = 1;
    seq.length = 1;
    return seq;
  }
  seq.length = std::min(words.size(), max_len);
  for (std::size_t i = 0; i < seq.length; ++i) {
    seq.ids[i] = vocab.id(words[i]);
    seq.mask[i] = 1;
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Sampling and batching

/// n examples with per-class quotas floor(n/C) or ceil(n/C) (the extra
/// examples go to the lowest class indices). Result keeps input order.
inline std::vector<LabeledExample> stratified_sample(
    const std::vector<LabeledExample>& xs, std::size_t n, std::uint64_t seed,
    std::size_t classes = 0) {
  if (n > xs.size()) {
    throw std::invalid_argument("stratified_sample: requested " + std::to_string(n) +
                                " of " + std::to_string(xs.size()) + " examples");
  }
  if (classes == 0) classes = class_count(xs);
  if (classes == 0) return {};
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < xs.size(); ++i) by_class.at(xs[i].label).push_back(i);
  Rng rng = make_rng(seed, Stream::Data, 0x5354);
  std::vector<std::size_t> chosen;
  for (std::size_t c = 0; c < classes; ++c) {
    const std::size_t quota = n / classes + (c < n % classes ? 1 : 0);
    if (by_class[c].size() < quota) {
      throw std::invalid_argument("stratified_sample: class " + std::to_string(c) +
                                  " has " + std::to_string(by_class[c].size()) +
                                  " examples, quota " + std::to_string(quota));
    }
    seeded_shuffle(by_class[c], rng);
    chosen.insert(chosen.end(), by_class[c].begin(),
                  by_class[c].begin() + static_cast<std::ptrdiff_t>(quota));
  }
  std::sort(chosen.begin(), chosen.end());
  std::vector<LabeledExample> out;
  out.reserve(chosen.size());
  for (auto i : chosen) out.push_back(xs[i]);
  return out;
}

/// Index batches for one epoch. Order depends only on (seed, epoch).
inline std::vector<std::vector<std::size_t>> batch_iter(std::size_t n,
                                                        std::size_t batch_size,
                                                        std::uint64_t seed,
                                                        std::uint64_t epoch,
                                                        bool drop_last) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(seed, Stream::Data, epoch + 1);
  seeded_shuffle(order, rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n; i += batch_size) {
    const std::size_t end = std::min(n, i + batch_size);
    if (end - i < batch_size && drop_last) break;
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

// ---------------------------------------------------------------------------
// Augmentation

struct EdaConfig {
  double p_insert = 0.1;
  double p_delete = 0.1;
  double p_swap = 0.1;
};

/// Word-level random deletion, insertion and swap. Inserted words come from
/// `pool` (the sentence's own words when empty). Never returns empty text
/// for non-empty input; single-word text is returned unchanged.
inline std::string eda_augment(const std::string& text, Rng& rng,
                               const EdaConfig& cfg,
                               const std::vector<std::string>& pool = {}) {
  for (double p : {cfg.p_insert, cfg.p_delete, cfg.p_swap}) {
    if (p < 0.0 || p > 1.0) throw std::invalid_argument("eda: probability outside [0, 1]");
  }
  std::vector<std::string> words;
  {
    std::istringstream is(text);
    std::string w;
    while (is >> w) words.push_back(w);
  }
  const std::size_t n = words.size();
  if (n <= 1) return text;
  if (cfg.p_insert == 0.0 && cfg.p_delete == 0.0 && cfg.p_swap == 0.0) return text;

  auto draw = [&](std::size_t bound) {
    return std::min(bound - 1,
                    static_cast<std::size_t>(uniform01(rng) * static_cast<double>(bound)));
  };

  std::vector<std::string> kept;
  for (auto& w : words)
    if (uniform01(rng) >= cfg.p_delete) kept.push_back(w);
  if (kept.empty()) kept.push_back(words[draw(n)]);

  const auto inserts = static_cast<std::size_t>(std::ceil(cfg.p_insert * static_cast<double>(n)));
  const auto& source = pool.empty() ? words : pool;
  for (std::size_t i = 0; i < inserts; ++i) {
    const std::string& w = source[draw(source.size())];
    const std::size_t at = draw(kept.size() + 1);
    kept.insert(kept.begin() + static_cast<std::ptrdiff_t>(at), w);
  }

  const auto swaps = static_cast<std::size_t>(std::ceil(cfg.p_swap * static_cast<double>(n)));
  if (kept.size() > 1) {
    for (std::size_t i = 0; i < swaps; ++i)
      std::swap(kept[draw(kept.size())], kept[draw(kept.size())]);
  }

  std::string out;
  for (std::size_t i = 0; i < kept.size(); ++i) {
    if (i) out += ' ';
    out += kept[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic task

/// Class-conditional keyword mixtures: each word is, with probability q, one
/// of the `keywords` words of the example's class, otherwise one of `vocab`
/// distractors. Lengths are uniform in [ceil(length/2), length].
struct SynthConfig {
  std::size_t classes = 4;
  std::size_t keywords = 5;
  double q = 0.3;
  std::size_t vocab = 200;
  std::size_t length = 16;
  std::size_t train = 2000;
  std::size_t valid = 400;
  std::size_t test = 1000;
  double noise = 0.0;  // label flip rate on train and valid

  void validate() const {
    if (classes < 2) throw std::invalid_argument("synth.classes must be >= 2");
    if (keywords < 1) throw std::invalid_argument("synth.keywords must be >= 1");
    if (q < 0.0 || q > 1.0) throw std::invalid_argument("synth.q outside [0, 1]");
    if (vocab < 1) throw std::invalid_argument("synth.vocab must be >= 1");
    if (length < 1) throw std::invalid_argument("synth.length must be >= 1");
    if (noise < 0.0 || noise > 1.0) throw std::invalid_argument("synth.noise outside [0, 1]");
  }
};

struct DatasetSplit {
  std::vector<LabeledExample> train, valid, test;
  std::size_t classes = 0;
};

inline DatasetSplit make_synthetic(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng = make_rng(seed, Stream::Data, 0x53594e);
  auto draw = [&](std::size_t bound) {
    return std::min(bound - 1,
                    static_cast<std::size_t>(uniform01(rng) * static_cast<double>(bound)));
  };
  auto make = [&](std::size_t count, bool noisy) {
    std::vector<std::size_t> labels(count);
    for (std::size_t i = 0; i < count; ++i) labels[i] = i % cfg.classes;
    seeded_shuffle(labels, rng);
    std::vector<LabeledExample> xs;
    xs.reserve(count);
    const std::size_t lo = (cfg.length + 1) / 2;
    for (auto y : labels) {
      const std::size_t len = lo + draw(cfg.length - lo + 1);
      std::string text;
      for (std::size_t j = 0; j < len; ++j) {
        if (j) text += ' ';
        if (uniform01(rng) < cfg.q) {
          text += "c" + std::to_string(y) + "k" + std::to_string(draw(cfg.keywords));
        } else {
          text += "w" + std::to_string(draw(cfg.vocab));
        }
      }
      std::size_t label = y;
      if (noisy && uniform01(rng) < cfg.noise) {
        label = (y + 1 + draw(cfg.classes - 1)) % cfg.classes;
      }
      xs.push_back({std::move(text), label});
    }
    return xs;
  };
  DatasetSplit split;
  split.classes = cfg.classes;
  split.train = make(cfg.train, true);
  split.valid = make(cfg.valid, true);
  split.test = make(cfg.test, false);
  return split;
}

// ---------------------------------------------------------------------------
// Encoded data

struct EncodedExample {
  TokenSequence tokens;
  std::size_t label = 0;
};

struct EncodedSplit {
  std::vector<EncodedExample> train, valid, test;
  std::size_t classes = 0;
};

inline std::vector<EncodedExample> encode(const std::vector<LabeledExample>& xs,
                                          const Vocabulary& vocab,
                                          std::size_t max_len) {
  std::vector<EncodedExample> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back({tokenize(x.text, vocab, max_len), x.label});
  return out;
}

inline EncodedSplit encode(const DatasetSplit& split, const Vocabulary& vocab,
                           std::size_t max_len) {
  return {encode(split.train, vocab, max_len), encode(split.valid, vocab, max_len),
          encode(split.test, vocab, max_len), split.classes};
}

}  // namespace oommix
