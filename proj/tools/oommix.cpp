#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "oommix/analysis.hpp"
#include "oommix/artifacts.hpp"
#include "oommix/checkpoint.hpp"
#include "oommix/config.hpp"
#include "oommix/gradcheck_suite.hpp"
#include "oommix/io.hpp"
#include "oommix/pipeline.hpp"
#include "oommix/trainer.hpp"

namespace fs = std::filesystem;
using namespace oommix;

namespace {

constexpr int kOk = 0, kUsage = 1, kRuntime = 2, kGradcheck = 3;
constexpr double kGradcheckThreshold = 1e-4;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::vector<std::string> sets;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  bool force = false;
  std::string checkpoint;
};

/// Config file, then --set assignments in order, then --seed.
Config resolve(const Options& o, const std::map<std::string, std::string>* base = nullptr) {
  Config c;
  if (base) {
    for (const auto& [k, v] : *base) c.set(k, v);
  }
  if (!o.config.empty()) c.load_file(o.config);
  for (const auto& s : o.sets) c.assign(s);
  if (o.seed) c.set("seed", std::to_string(*o.seed));
  return c;
}

/// Destination paths for a verb; refuses existing files unless forced.
class Outputs {
 public:
  Outputs(const Options& o, std::initializer_list<std::string> names) : dir_(o.out) {
    for (const auto& n : names) {
      const fs::path p = dir_ / n;
      if (fs::exists(p) && !o.force) {
        throw UsageError(p.string() + " already exists (pass --force to overwrite)");
      }
    }
  }
  void write(const std::string& name, const std::string& content) const {
    atomic_write(dir_ / name, content);
    std::cerr << "wrote " << (dir_ / name).string() << "\n";
  }

 private:
  fs::path dir_;
};

fs::path checkpoint_path(const Options& o) {
  const fs::path p =
      o.checkpoint.empty() ? fs::path(o.out) / "model.ckpt" : fs::path(o.checkpoint);
  if (!fs::exists(p)) throw UsageError("checkpoint not found: " + p.string());
  return p;
}

ModelConfig checked_model_config(const RunConfig& rc, const PreparedData& data) {
  ModelConfig mc = model_config_for(rc, data.vocab, data.encoded.classes);
  try {
    mc.validate(false);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return mc;
}

int run_train(const Options& o) {
  const Config cfg = resolve(o);
  const RunConfig rc = to_run_config(cfg);
  Outputs out(o, {"report.json", "model.ckpt", "lambda_log.csv", "metrics.jsonl", "config.txt"});
  const PreparedData data = prepare_data(rc);
  Model<float> model(checked_model_config(rc, data), rc.seed);
  std::cerr << "train: " << data.encoded.train.size() << " train, "
            << data.encoded.valid.size() << " valid, " << data.encoded.test.size()
            << " test, vocab " << data.vocab.size() << ", strategy "
            << cfg.str("mix.strategy") << "\n";
  TrainObserver obs;
  obs.on_eval = [](const EvalRecord& r) {
    std::cerr << "step " << r.step << " val_acc " << fmt(r.val_acc) << " l_c " << fmt(r.l_c)
              << " l_g " << fmt(r.l_g) << " l_d " << fmt(r.l_d) << " e " << fmt(r.e) << "\n";
  };
  const TrainReport report = train(model, data.encoded, rc.mix, rc.train, obs);

  auto j = report_json(report);
  j["strategy"] = cfg.str("mix.strategy");
  j["seed"] = rc.seed;
  if (!report.lambda_log.empty()) {
    j["median_lambda"] = {median_lambda(report.lambda_log, 0),
                          median_lambda(report.lambda_log, 1)};
  }
  out.write("model.ckpt", serialize_checkpoint(model, data.vocab, cfg.values()));
  out.write("lambda_log.csv", lambda_log_csv(report.lambda_log));
  out.write("metrics.jsonl", metrics_jsonl(report.evals));
  out.write("config.txt", cfg.dump());
  out.write("report.json", j.dump(2) + "\n");
  std::cout << "best_val_acc " << fmt(report.best_val_acc) << " test_acc "
            << fmt(report.test_acc) << " steps " << report.steps << "\n";
  return kOk;
}

int run_eval(const Options& o) {
  const auto ckpt_path = checkpoint_path(o);
  Outputs out(o, {"eval.json"});
  const auto ckpt = load_checkpoint<float>(ckpt_path);
  const RunConfig rc = to_run_config(resolve(o, &ckpt.settings));
  const PreparedData data = prepare_data(rc);
  const std::size_t max_len = ckpt.model.config().encoder.max_len;
  const auto valid = encode(data.raw.valid, ckpt.vocab, max_len);
  const auto test = encode(data.raw.test, ckpt.vocab, max_len);
  nlohmann::json j;
  j["checkpoint"] = ckpt_path.string();
  j["valid_acc"] = evaluate(ckpt.model, valid, rc.train.eval_batch);
  j["test_acc"] = test.empty() ? 0.0 : evaluate(ckpt.model, test, rc.train.eval_batch);
  out.write("eval.json", j.dump(2) + "\n");
  std::cout << "valid_acc " << fmt(j["valid_acc"]) << " test_acc " << fmt(j["test_acc"])
            << "\n";
  return kOk;
}

int run_gradcheck(const Options& o) {
  const Config cfg = resolve(o);
  Outputs out(o, {"gradcheck.csv"});
  const auto rows = run_gradcheck_suite(20, cfg.count("seed"));
  std::string csv = "name,instances,entries,max_rel_error,status\n";
  bool ok = true;
  std::printf("%-22s %9s %8s %14s\n", "check", "instances", "entries", "max_rel_error");
  for (const auto& r : rows) {
    const bool pass = r.max_rel_error < kGradcheckThreshold;
    ok = ok && pass;
    std::printf("%-22s %9zu %8zu %14.3e %s\n", r.name.c_str(), r.instances, r.entries,
                r.max_rel_error, pass ? "ok" : "FAIL");
    csv += r.name + "," + std::to_string(r.instances) + "," + std::to_string(r.entries) + "," +
           fmt(r.max_rel_error) + "," + (pass ? "ok" : "fail") + "\n";
  }
  out.write("gradcheck.csv", csv);
  return ok ? kOk : kGradcheck;
}

std::size_t sweep_threads() {
  if (const char* env = std::getenv("OOMMIX_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*env == '\0' || *end != '\0' || v < 1) {
      throw UsageError("OOMMIX_THREADS must be a positive integer");
    }
    return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

int run_sweep(const Options& o) {
  const RunConfig rc = to_run_config(resolve(o));
  Outputs out(o, {"sweep.csv"});
  if (rc.sweep.m_g.empty() || rc.sweep.m_d.empty()) throw ConfigError("sweep ranges are empty");
  const std::size_t threads = sweep_threads();
  const PreparedData data = prepare_data(rc);
  const auto grid =
      layer_sweep(rc, data, rc.sweep.m_g, rc.sweep.m_d, rc.sweep.seeds, rc.sweep.allow_equal,
                  threads, [](const std::string& w) { std::cerr << "warning: " << w << "\n"; });
  out.write("sweep.csv", sweep_csv(grid));
  for (const auto& c : grid) {
    std::cout << "m_g " << c.m_g << " m_d " << c.m_d << " ";
    if (c.skipped) std::cout << "skipped\n";
    else std::cout << fmt(c.mean) << " +- " << fmt(c.stddev) << "\n";
  }
  return kOk;
}

int run_analyze(const Options& o) {
  const fs::path log_path = fs::path(o.out) / "lambda_log.csv";
  const fs::path ckpt_path =
      o.checkpoint.empty() ? fs::path(o.out) / "model.ckpt" : fs::path(o.checkpoint);
  const bool have_log = fs::exists(log_path), have_ckpt = fs::exists(ckpt_path);
  if (!have_log && !have_ckpt) {
    throw UsageError("analyze needs " + log_path.string() + " or a checkpoint");
  }
  Outputs out(o, {"histogram.csv", "embeddings.csv", "projection.csv", "analysis.json"});
  nlohmann::json summary;

  if (have_log) {
    const auto log = parse_lambda_log(read_file(log_path));
    if (log.empty()) {
      std::cerr << "analyze: lambda log is empty (strategy does not mix); no histogram\n";
    } else {
      const Config cfg = resolve(o);
      const auto h = lambda_histogram(log, cfg.count("analysis.bins"));
      out.write("histogram.csv", histogram_csv(h));
      summary["lambda"] = {{"records", log.size()},
                           {"midpoint_step", h.midpoint},
                           {"phase_records", h.totals}};
      for (std::size_t p = 0; p < 2; ++p) {
        if (h.totals[p]) summary["lambda"]["median_phase" + std::to_string(p + 1)] =
            median_lambda(log, p);
      }
    }
  }

  if (have_ckpt) {
    const auto ckpt = load_checkpoint<float>(ckpt_path);
    const RunConfig rc = to_run_config(resolve(o, &ckpt.settings));
    const auto& a = rc.analysis;
    const PreparedData data = prepare_data(rc);
    const std::size_t max_len = ckpt.model.config().encoder.max_len;
    const auto& raw = a.split == "train" ? data.raw.train
                      : a.split == "test" ? data.raw.test
                                          : data.raw.valid;
    auto xs = encode(raw, ckpt.vocab, max_len);
    if (a.max_points && xs.size() > a.max_points) {
      Rng rng = make_rng(rc.seed, Stream::Analysis, 1);
      seeded_shuffle(xs, rng);
      xs.resize(a.max_points);
    }
    const auto pts = dump_embeddings(ckpt.model, xs, a.pairs, rc.seed, rc.train.eval_batch);
    out.write("embeddings.csv", embeddings_csv(pts));

    PointSet actual, all;
    for (const auto& p : pts) {
      all.push_back(p.v);
      if (!p.generated) actual.push_back(p.v);
    }
    const auto iso = isomap(all, a.isomap_k, a.isomap_dim);
    out.write("projection.csv", projection_csv(pts, iso));
    summary["embeddings"] = {{"split", a.split},
                             {"actual", actual.size()},
                             {"generated", pts.size() - actual.size()},
                             {"pca_coverage_actual", pca_variance_coverage(actual, a.pca_target)},
                             {"pca_coverage_all", pca_variance_coverage(all, a.pca_target)},
                             {"pca_target", a.pca_target},
                             {"isomap_k", a.isomap_k},
                             {"isomap_dropped", iso.dropped}};
  }
  out.write("analysis.json", summary.dump(2) + "\n");
  return kOk;
}

int run_synth(const Options& o) {
  const RunConfig rc = to_run_config(resolve(o));
  Outputs out(o, {"train.csv", "valid.csv", "test.csv"});
  const auto ds = make_synthetic(rc.synth, rc.seed);
  out.write("train.csv", to_csv(ds.train));
  out.write("valid.csv", to_csv(ds.valid));
  out.write("test.csv", to_csv(ds.test));
  return kOk;
}

int run_plots(const Options& o) {
  const fs::path dir(o.out);
  const bool hist = fs::exists(dir / "histogram.csv"), sweep = fs::exists(dir / "sweep.csv"),
             proj = fs::exists(dir / "projection.csv"),
             metrics = fs::exists(dir / "metrics.jsonl");
  if (!hist && !sweep && !proj && !metrics) {
    throw UsageError("emit-plots found no histogram.csv, sweep.csv, projection.csv or "
                     "metrics.jsonl in " + dir.string());
  }
  Outputs out(o, {"lambda_histogram.svg", "sweep.svg", "projection_xy.svg", "projection_xz.svg",
                  "projection_yz.svg", "training.svg"});

  if (hist) {
    const Table t = parse_table(read_file(dir / "histogram.csv"));
    std::vector<std::vector<svg::Bar>> series(2);
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
      const auto p = static_cast<std::size_t>(t.number(i, "phase"));
      if (p < 1 || p > 2) throw std::runtime_error("histogram.csv: phase must be 1 or 2");
      series[p - 1].push_back({t.number(i, "bin_low"), t.number(i, "bin_high"),
                               t.number(i, "count")});
    }
    out.write("lambda_histogram.svg",
              svg::histogram({"first half", "second half"}, series,
                             "Mixing coefficients by training phase", "lambda"));
  }
  if (sweep) {
    const Table t = parse_table(read_file(dir / "sweep.csv"));
    std::map<std::size_t, svg::Series> by_mg;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
      if (t.rows[i][t.column("status")] != "ok") continue;
      const auto mg = static_cast<std::size_t>(t.number(i, "m_g"));
      auto& s = by_mg[mg];
      s.name = "m_g = " + std::to_string(mg);
      s.x.push_back(t.number(i, "m_d"));
      s.y.push_back(t.number(i, "mean"));
      s.err.push_back(t.number(i, "std"));
    }
    std::vector<svg::Series> series;
    for (auto& [mg, s] : by_mg) series.push_back(std::move(s));
    out.write("sweep.svg", svg::line_chart(series, "Test accuracy by layer placement",
                                           "discriminator layer m_d", "test accuracy"));
  }
  if (proj) {
    const Table t = parse_table(read_file(dir / "projection.csv"));
    const std::size_t tag = t.column("tag");
    const char* axes[] = {"x", "y", "z"};
    for (auto [a, b] : {std::pair{0, 1}, std::pair{0, 2}, std::pair{1, 2}}) {
      std::vector<svg::Point> pts;
      for (std::size_t i = 0; i < t.rows.size(); ++i) {
        const bool generated = t.rows[i][tag] == "generated";
        pts.push_back({t.number(i, axes[a]), t.number(i, axes[b]),
                       generated ? -1 : static_cast<int>(t.number(i, "class")), false});
      }
      const std::string name = std::string("projection_") + axes[a] + axes[b] + ".svg";
      out.write(name, svg::scatter(pts, "Isomap projection (black: generated)", axes[a],
                                   axes[b]));
    }
  }
  if (metrics) {
    const auto evals = parse_metrics_jsonl(read_file(dir / "metrics.jsonl"));
    svg::Series ld{"L_D", {}, {}, {}}, acc{"validation accuracy", {}, {}, {}};
    for (const auto& r : evals) {
      ld.x.push_back(static_cast<double>(r.step));
      ld.y.push_back(r.l_d);
      acc.x.push_back(static_cast<double>(r.step));
      acc.y.push_back(r.val_acc);
    }
    out.write("training.svg", svg::line_chart({ld, acc}, "Discriminator loss and accuracy",
                                              "step", "value"));
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Out-of-manifold mixup lab"};
  app.fallthrough();
  app.require_subcommand(1, 1);
  Options o;
  app.add_option("--config", o.config, "config file of key=value lines");
  app.add_option("--set", o.sets, "override one key (key=value), repeatable")
      ->expected(1)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  app.add_option("--out", o.out, "output directory")->capture_default_str();
  app.add_option("--seed", o.seed, "shorthand for --set seed=N");
  app.add_flag("--force", o.force, "overwrite existing artifacts");
  app.add_option("--checkpoint", o.checkpoint,
                 "checkpoint for eval and analyze (default OUT/model.ckpt)");

  struct Verb {
    const char* name;
    const char* help;
    int (*run)(const Options&);
  };
  const Verb verbs[] = {
      {"train", "fine-tune and write report, checkpoint and lambda log", run_train},
      {"eval", "evaluate a checkpoint on its validation and test splits", run_eval},
      {"gradcheck", "finite-difference check of every primitive and block", run_gradcheck},
      {"sweep-layers", "accuracy grid over generator/discriminator layers", run_sweep},
      {"analyze", "lambda histograms, embedding dump, Isomap and PCA", run_analyze},
      {"synth-data", "write the synthetic dataset as CSV", run_synth},
      {"emit-plots", "render SVG figures from earlier CSV outputs", run_plots},
  };
  for (const auto& v : verbs) app.add_subcommand(v.name, v.help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kUsage;
  }

  try {
    for (const auto& v : verbs)
      if (app.got_subcommand(v.name)) return v.run(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
