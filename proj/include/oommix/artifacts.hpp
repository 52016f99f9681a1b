#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "oommix/analysis.hpp"
#include "oommix/io.hpp"
#include "oommix/trainer.hpp"

namespace oommix {

/// Comma-separated table with a header row. Fields are not quoted; every
/// table written here is numeric or uses plain tags.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw std::runtime_error("table has no column '" + name + "'");
  }
  double number(std::size_t row, const std::string& name) const {
    const auto& s = rows.at(row).at(column(name));
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || *end != '\0') {
      throw std::runtime_error("row " + std::to_string(row + 1) + ", column " + name +
                               ": not a number: '" + s + "'");
    }
    return v;
  }
};

inline Table parse_table(const std::string& text) {
  Table t;
  std::istringstream in(text);
  std::string line;
  auto split = [](const std::string& l) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream ls(l);
    while (std::getline(ls, field, ',')) out.push_back(field);
    if (!l.empty() && l.back() == ',') out.emplace_back();
    return out;
  };
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (t.header.empty()) {
      t.header = split(line);
      continue;
    }
    auto row = split(line);
    if (row.size() != t.header.size()) {
      throw std::runtime_error("table row " + std::to_string(t.rows.size() + 1) + " has " +
                               std::to_string(row.size()) + " fields, expected " +
                               std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(row));
  }
  if (t.header.empty()) throw std::runtime_error("table is empty");
  return t;
}

// ---------------------------------------------------------------------------
// Training artifacts

inline nlohmann::json to_json(const EvalRecord& r) {
  return {{"step", r.step}, {"val_acc", r.val_acc}, {"l_c", r.l_c},
          {"l_g", r.l_g},   {"l_d", r.l_d},         {"e", r.e}};
}

/// One JSON object per evaluation.
inline std::string metrics_jsonl(const std::vector<EvalRecord>& evals) {
  std::string out;
  for (const auto& r : evals) out += to_json(r).dump() + "\n";
  return out;
}

inline std::vector<EvalRecord> parse_metrics_jsonl(const std::string& text) {
  std::vector<EvalRecord> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    out.push_back({j.at("step"), j.at("val_acc"), j.at("l_c"), j.at("l_g"), j.at("l_d"),
                   j.at("e")});
  }
  return out;
}

inline std::string lambda_log_csv(const std::vector<LambdaLogRecord>& log) {
  std::string out = "step,alpha,delta,gamma,lambda,l_c,l_g,l_d,e\n";
  for (const auto& r : log) {
    out += std::to_string(r.step);
    for (double v : {r.alpha, r.delta, r.gamma, r.lambda, r.l_c, r.l_g, r.l_d, r.e})
      out += "," + fmt(v);
    out += "\n";
  }
  return out;
}

/// Reads a log written by lambda_log_csv. Mixed labels are not stored.
inline std::vector<LambdaLogRecord> parse_lambda_log(const std::string& text) {
  const Table t = parse_table(text);
  std::vector<LambdaLogRecord> log;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    LambdaLogRecord r;
    r.step = static_cast<std::size_t>(t.number(i, "step"));
    r.alpha = t.number(i, "alpha");
    r.delta = t.number(i, "delta");
    r.gamma = t.number(i, "gamma");
    r.lambda = t.number(i, "lambda");
    r.l_c = t.number(i, "l_c");
    r.l_g = t.number(i, "l_g");
    r.l_d = t.number(i, "l_d");
    r.e = t.number(i, "e");
    log.push_back(r);
  }
  return log;
}

inline nlohmann::json report_json(const TrainReport& r) {
  nlohmann::json evals = nlohmann::json::array();
  for (const auto& e : r.evals) evals.push_back(to_json(e));
  return {{"steps", r.steps},
          {"best_step", r.best_step},
          {"best_val_acc", r.best_val_acc},
          {"test_acc", r.test_acc},
          {"early_stopped", r.early_stopped},
          {"mix_records", r.lambda_log.size()},
          {"evals", std::move(evals)}};
}

// ---------------------------------------------------------------------------
// Analysis artifacts

inline std::string histogram_csv(const LambdaHistogram& h) {
  std::string out = "phase,bin_low,bin_high,count\n";
  for (std::size_t p = 0; p < h.counts.size(); ++p)
    for (std::size_t b = 0; b < h.counts[p].size(); ++b)
      out += std::to_string(p + 1) + "," + fmt(h.edges[b]) + "," + fmt(h.edges[b + 1]) + "," +
             std::to_string(h.counts[p][b]) + "\n";
  return out;
}

inline const char* point_tag(const EmbeddingPoint& p) {
  return p.generated ? "generated" : "actual";
}

inline std::string embeddings_csv(const std::vector<EmbeddingPoint>& pts) {
  std::string out = "tag,class";
  const std::size_t d = pts.empty() ? 0 : pts[0].v.size();
  for (std::size_t j = 0; j < d; ++j) out += ",v" + std::to_string(j + 1);
  out += "\n";
  for (const auto& p : pts) {
    out += std::string(point_tag(p)) + "," + std::to_string(p.cls);
    for (double v : p.v) out += "," + fmt(v);
    out += "\n";
  }
  return out;
}

inline std::vector<EmbeddingPoint> parse_embeddings(const std::string& text) {
  const Table t = parse_table(text);
  const std::size_t tag = t.column("tag"), cls = t.column("class");
  std::vector<EmbeddingPoint> pts;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    EmbeddingPoint p;
    p.generated = t.rows[i][tag] == "generated";
    p.cls = static_cast<std::size_t>(t.number(i, "class"));
    for (std::size_t j = 0; j < t.header.size(); ++j)
      if (j != tag && j != cls) p.v.push_back(t.number(i, t.header[j]));
    pts.push_back(std::move(p));
  }
  return pts;
}

/// Isomap coordinates of the kept points; columns beyond the projection
/// dimension are written as 0.
inline std::string projection_csv(const std::vector<EmbeddingPoint>& pts,
                                  const IsomapResult& iso) {
  std::string out = "tag,class,x,y,z\n";
  for (std::size_t r = 0; r < iso.kept.size(); ++r) {
    const auto& p = pts[iso.kept[r]];
    out += std::string(point_tag(p)) + "," + std::to_string(p.cls);
    for (Eigen::Index c = 0; c < 3; ++c)
      out += "," + fmt(c < iso.coords.cols() ? iso.coords(static_cast<Eigen::Index>(r), c) : 0.0);
    out += "\n";
  }
  return out;
}

inline std::string sweep_csv(const std::vector<SweepCell>& grid) {
  std::string out = "m_g,m_d,status,mean,std,accuracies\n";
  for (const auto& c : grid) {
    std::string accs;
    for (std::size_t i = 0; i < c.test_acc.size(); ++i)
      accs += (i ? ";" : "") + fmt(c.test_acc[i]);
    out += std::to_string(c.m_g) + "," + std::to_string(c.m_d) + "," +
           (c.skipped ? "skipped" : "ok") + "," + fmt(c.mean) + "," + fmt(c.stddev) + "," +
           accs + "\n";
  }
  return out;
}

}  // namespace oommix
