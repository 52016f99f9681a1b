#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "oommix/baselines.hpp"
#include "oommix/corpus.hpp"
#include "oommix/oommix.hpp"
#include "oommix/rng.hpp"

namespace oommix {

struct TrainConfig {
  double lr_encoder = 3e-4;
  double lr_head = 1e-3;
  std::size_t batch = 12;
  std::size_t warmup_steps = 1000;
  std::size_t eval_every = 200;
  std::size_t patience = 10;
  std::size_t max_steps = 20000;
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping
  std::size_t eval_batch = 64;
  std::uint64_t seed = 1;

  // Weight e on L_D and its adjustment rule.
  double e_init = 1.0;
  bool e_adjust = true;
  std::size_t e_window = 50;
  double e_threshold = 0.6;
  double e_factor = 1.5;
  double e_max = 8.0;

  void validate() const {
    auto fail = [](const std::string& m) {
      throw std::invalid_argument("train config: " + m);
    };
    if (!(lr_encoder > 0) || !(lr_head > 0)) fail("learning rates must be positive");
    if (batch == 0) fail("batch must be positive");
    if (eval_every == 0) fail("eval_every must be positive");
    if (patience < 1) fail("patience must be >= 1");
    if (max_steps == 0) fail("max_steps must be positive");
    if (e_init < 0) fail("e must be non-negative");
    if (e_window == 0) fail("e window must be positive");
  }
};

// ---------------------------------------------------------------------------
// Adam

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  std::size_t step = 0;

  explicit AdamState(const ParamStore<T>& params) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      m.emplace_back(params[i].value.size(), T(0));
      v.emplace_back(params[i].value.size(), T(0));
    }
  }
};

/// One bias-corrected Adam update; `lr_for` maps a parameter to its rate.
template <typename T, typename LrFor>
void adam_step(ParamStore<T>& params, AdamState<T>& state, LrFor&& lr_for,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  if (state.m.size() != params.size()) {
    throw std::invalid_argument("adam: state does not match parameters");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& par = params[p];
    const double lr = lr_for(par);
    auto& m = state.m[p];
    auto& v = state.v[p];
    const auto& g = par.value.grad;
    if (g.size() != m.size()) throw std::invalid_argument("adam: missing gradient for " + par.name);
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double gi = g[i];
      const double mi = beta1 * m[i] + (1.0 - beta1) * gi;
      const double vi = beta2 * v[i] + (1.0 - beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / c1, vhat = vi / c2;
      par.value.data[i] =
          static_cast<T>(par.value.data[i] - lr * mhat / (std::sqrt(vhat) + eps));
    }
  }
}

/// Linear warm-up to base_lr over `warmup` steps, constant afterwards.
inline double lr_schedule(std::size_t step, std::size_t warmup, double base_lr) {
  if (step < 1) throw std::invalid_argument("lr_schedule: steps start at 1");
  if (warmup == 0) return base_lr;
  return base_lr * std::min(1.0, static_cast<double>(step) / static_cast<double>(warmup));
}

inline bool is_encoder_group(ParamGroup g) {
  return g == ParamGroup::EncoderBelowMg || g == ParamGroup::EncoderMgAndAbove;
}

/// Scales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(ParamStore<T>& params, double max_norm) {
  double sq = 0;
  for (std::size_t p = 0; p < params.size(); ++p)
    for (T g : params[p].value.grad) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (std::size_t p = 0; p < params.size(); ++p)
      for (T& g : params[p].value.grad) g *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Evaluation

/// Index of the largest entry, lowest index on ties.
template <typename It>
std::size_t argmax(It begin, It end) {
  std::size_t best = 0, i = 0;
  for (It it = begin; it != end; ++it, ++i)
    if (*it > *(begin + static_cast<std::ptrdiff_t>(best))) best = i;
  return best;
}

/// Class probabilities for a set of examples, evaluation mode.
template <typename T>
std::vector<std::vector<double>> predict(const Model<T>& model,
                                         const std::vector<EncodedExample>& xs,
                                         std::size_t batch = 64) {
  std::vector<std::vector<double>> out;
  out.reserve(xs.size());
  Rng unused = make_rng(0, Stream::Dropout);
  const std::size_t c = model.classes();
  for (std::size_t i = 0; i < xs.size(); i += batch) {
    std::vector<const TokenSequence*> toks;
    for (std::size_t j = i; j < std::min(xs.size(), i + batch); ++j)
      toks.push_back(&xs[j].tokens);
    Graph<T> g;
    auto h = model.encoder().forward_layers(g, model.encoder().embed(g, toks),
                                            model.layers(), false, unused);
    const auto& probs = model.encoder().classify(g, h).value().data;
    for (std::size_t r = 0; r < toks.size(); ++r)
      out.emplace_back(probs.begin() + static_cast<std::ptrdiff_t>(r * c),
                       probs.begin() + static_cast<std::ptrdiff_t>((r + 1) * c));
  }
  return out;
}

/// Fraction of argmax-correct predictions (ties to the lowest class).
template <typename T>
double evaluate(const Model<T>& model, const std::vector<EncodedExample>& xs,
                std::size_t batch = 64) {
  if (xs.empty()) throw std::invalid_argument("evaluate: empty split");
  auto probs = predict(model, xs, batch);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < xs.size(); ++i)
    correct += argmax(probs[i].begin(), probs[i].end()) == xs[i].label;
  return static_cast<double>(correct) / static_cast<double>(xs.size());
}

// ---------------------------------------------------------------------------
// Training loop

/// Running-mean rule for the weight e: every `window` steps, if the mean
/// L_D over the last window exceeds `threshold`, e grows by `factor` up to
/// `max`.
class EWeightSchedule {
 public:
  EWeightSchedule(double e, bool enabled, std::size_t window, double threshold,
                  double factor, double max)
      : e_(e), enabled_(enabled), window_(window), threshold_(threshold),
        factor_(factor), max_(max) {}

  double value() const { return e_; }

  void observe(double l_d, std::size_t step) {
    recent_.push_back(l_d);
    if (recent_.size() > window_) recent_.pop_front();
    if (!enabled_ || step % window_ != 0 || recent_.size() < window_) return;
    const double mean =
        std::accumulate(recent_.begin(), recent_.end(), 0.0) / static_cast<double>(window_);
    if (mean > threshold_) e_ = std::min(max_, e_ * factor_);
  }

  double running_mean() const {
    if (recent_.empty()) return 0.0;
    return std::accumulate(recent_.begin(), recent_.end(), 0.0) /
           static_cast<double>(recent_.size());
  }

 private:
  double e_;
  bool enabled_;
  std::size_t window_;
  double threshold_, factor_, max_;
  std::deque<double> recent_;
};

struct EvalRecord {
  std::size_t step = 0;
  double val_acc = 0;
  double l_c = 0, l_g = 0, l_d = 0, e = 0;  // means since previous evaluation
};

struct LambdaLogRecord {
  std::size_t step = 0;
  double alpha = 0, delta = 0, gamma = 0, lambda = 0;
  double l_c = 0, l_g = 0, l_d = 0, e = 0;
  std::vector<double> mixed_label;
};

struct TrainReport {
  std::vector<EvalRecord> evals;
  std::size_t best_step = 0;
  double best_val_acc = -1.0;
  double test_acc = 0.0;
  std::size_t steps = 0;
  bool early_stopped = false;
  std::vector<LossBundle> losses;  // one per step
  std::vector<LambdaLogRecord> lambda_log;
};

/// Hooks for streaming output while training.
struct TrainObserver {
  std::function<void(const EvalRecord&)> on_eval;
  std::function<void(const LambdaLogRecord&)> on_mix;
};

/// Fine-tunes `model` on `data` with the chosen mixup strategy, restores the
/// best validation checkpoint and reports test accuracy there.
template <typename T>
TrainReport train(Model<T>& model, const EncodedSplit& data,
                  const MixStrategy& strategy, const TrainConfig& cfg,
                  const TrainObserver& observer = {}) {
  cfg.validate();
  strategy.validate();
  if (data.train.empty()) throw std::invalid_argument("train: empty training split");
  if (data.valid.empty()) throw std::invalid_argument("train: empty validation split");
  if (strategy.mixes() && cfg.batch < 2) {
    throw std::invalid_argument("train: mixup needs batch >= 2");
  }
  const bool drop_last = strategy.mixes();
  if (drop_last && data.train.size() < cfg.batch) {
    throw std::invalid_argument("train: fewer training examples than one batch");
  }

  auto& params = model.params();
  AdamState<T> adam(params);
  Rng pairing = make_rng(cfg.seed, Stream::Pairing);
  Rng dropout = make_rng(cfg.seed, Stream::Dropout);
  Rng mixing = make_rng(cfg.seed, Stream::Mixing);
  EWeightSchedule eweight(cfg.e_init, cfg.e_adjust, cfg.e_window, cfg.e_threshold,
                          cfg.e_factor, cfg.e_max);
  const bool has_ld = strategy.kind == MixStrategy::Kind::OomMix &&
                      strategy.use_discriminator;

  TrainReport report;
  std::vector<std::vector<T>> best = params.snapshot();
  std::size_t bad_evals = 0;
  LossBundle window_sum;
  std::size_t window_count = 0;

  auto run_eval = [&](std::size_t step) {
    EvalRecord rec;
    rec.step = step;
    rec.val_acc = evaluate(model, data.valid, cfg.eval_batch);
    if (window_count) {
      rec.l_c = window_sum.l_c / static_cast<double>(window_count);
      rec.l_g = window_sum.l_g / static_cast<double>(window_count);
      rec.l_d = window_sum.l_d / static_cast<double>(window_count);
    }
    rec.e = eweight.value();
    window_sum = {};
    window_count = 0;
    report.evals.push_back(rec);
    if (observer.on_eval) observer.on_eval(rec);
    if (rec.val_acc > report.best_val_acc) {
      report.best_val_acc = rec.val_acc;
      report.best_step = step;
      best = params.snapshot();
      bad_evals = 0;
    } else {
      ++bad_evals;
    }
  };

  std::size_t step = 0;
  bool stop = false;
  for (std::uint64_t epoch = 0; !stop; ++epoch) {
    auto batches = batch_iter(data.train.size(), cfg.batch, cfg.seed, epoch, drop_last);
    for (const auto& idx : batches) {
      ++step;
      Batch batch;
      for (auto i : idx) {
        batch.tokens.push_back(&data.train[i].tokens);
        batch.labels.push_back(data.train[i].label);
      }
      std::vector<std::size_t> perm(idx.size());
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      seeded_shuffle(perm, pairing);

      const double e = has_ld ? eweight.value() : 0.0;
      Graph<T> g;
      auto fr = strategy_dispatch(g, model, strategy, batch, perm, e, dropout, mixing, true);
      const auto& lb = fr.bundle;
      if (!std::isfinite(lb.l_c) || !std::isfinite(lb.l_g) || !std::isfinite(lb.l_d)) {
        throw std::runtime_error("training diverged at step " + std::to_string(step) +
                                 ": l_c=" + std::to_string(lb.l_c) +
                                 " l_g=" + std::to_string(lb.l_g) +
                                 " l_d=" + std::to_string(lb.l_d));
      }
      params.zero_grad();
      apply_gradients(g, fr);
      clip_grad_norm(params, cfg.clip_norm);
      const double lr_enc = lr_schedule(step, cfg.warmup_steps, cfg.lr_encoder);
      const double lr_head = lr_schedule(step, cfg.warmup_steps, cfg.lr_head);
      adam_step(
          params, adam,
          [&](const Parameter<T>& p) { return is_encoder_group(p.group) ? lr_enc : lr_head; },
          cfg.beta1, cfg.beta2, cfg.epsilon);

      report.losses.push_back(lb);
      window_sum.l_c += lb.l_c;
      window_sum.l_g += lb.l_g;
      window_sum.l_d += lb.l_d;
      ++window_count;
      if (strategy.mixes()) {
        for (const auto& m : fr.mixes) {
          LambdaLogRecord r{step, m.alpha, m.delta, m.gamma, m.lambda,
                            lb.l_c, lb.l_g, lb.l_d, lb.e, m.mixed_label};
          if (observer.on_mix) observer.on_mix(r);
          report.lambda_log.push_back(std::move(r));
        }
      }
      if (has_ld) eweight.observe(lb.l_d, step);

      if (step % cfg.eval_every == 0) {
        run_eval(step);
        if (bad_evals >= cfg.patience) {
          report.early_stopped = true;
          stop = true;
        }
      }
      if (step >= cfg.max_steps) stop = true;
      if (stop) break;
    }
    if (batches.empty()) throw std::invalid_argument("train: no batches in an epoch");
  }
  if (report.evals.empty() || report.evals.back().step != step) run_eval(step);
  report.steps = step;
  params.restore(best);
  report.test_acc = data.test.empty() ? 0.0 : evaluate(model, data.test, cfg.eval_batch);
  return report;
}

}  // namespace oommix
