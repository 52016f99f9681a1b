#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace oommix {

/// Writes `content` to a sibling temp file and renames it over `path`.
inline void atomic_write(const std::filesystem::path& path, const std::string& content) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Shortest decimal text that round-trips a double.
inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  std::string s(buf);
  for (int prec = 1; prec < 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) return buf;
  }
  return s;
}

// ---------------------------------------------------------------------------
// SVG

namespace svg {

struct Frame {
  double width = 640, height = 400;
  double left = 60, right = 20, top = 40, bottom = 50;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;

  double px(double x) const {
    return left + (x - x0) / (x1 - x0) * (width - left - right);
  }
  double py(double y) const {
    return height - bottom - (y - y0) / (y1 - y0) * (height - top - bottom);
  }
};

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string num(double v) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(2) << v;
  return ss.str();
}

/// Axis tick text: plain notation, four significant digits.
inline std::string tick(double v) {
  char buf[32];
  if (std::abs(v) >= 1e4) std::snprintf(buf, sizeof buf, "%.0f", v);
  else std::snprintf(buf, sizeof buf, "%.4g", std::abs(v) < 1e-12 ? 0.0 : v);
  return buf;
}

inline const std::vector<std::string>& palette() {
  static const std::vector<std::string> p = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                             "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
                                             "#bcbd22", "#17becf"};
  return p;
}

inline std::string open(const Frame& f, const std::string& title) {
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(f.width)
    << "\" height=\"" << num(f.height) << "\" viewBox=\"0 0 " << num(f.width) << " "
    << num(f.height) << "\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << num(f.width / 2) << "\" y=\"22\" text-anchor=\"middle\" "
    << "font-family=\"sans-serif\" font-size=\"15\">" << escape(title) << "</text>\n";
  return s.str();
}

inline std::string axes(const Frame& f, const std::string& xlabel, const std::string& ylabel,
                        int ticks = 5) {
  std::ostringstream s;
  const double bx = f.px(f.x0), by = f.py(f.y0);
  s << "<line x1=\"" << num(bx) << "\" y1=\"" << num(by) << "\" x2=\"" << num(f.px(f.x1))
    << "\" y2=\"" << num(by) << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << num(bx) << "\" y1=\"" << num(by) << "\" x2=\"" << num(bx)
    << "\" y2=\"" << num(f.py(f.y1)) << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= ticks; ++i) {
    const double xv = f.x0 + (f.x1 - f.x0) * i / ticks;
    const double yv = f.y0 + (f.y1 - f.y0) * i / ticks;
    s << "<text x=\"" << num(f.px(xv)) << "\" y=\"" << num(by + 16)
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">"
      << tick(xv) << "</text>\n";
    s << "<text x=\"" << num(bx - 6) << "\" y=\"" << num(f.py(yv) + 4)
      << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
      << tick(yv) << "</text>\n";
  }
  s << "<text x=\"" << num((f.px(f.x0) + f.px(f.x1)) / 2) << "\" y=\"" << num(f.height - 10)
    << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
    << escape(xlabel) << "</text>\n";
  s << "<text x=\"14\" y=\"" << num((f.py(f.y0) + f.py(f.y1)) / 2)
    << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" "
    << "transform=\"rotate(-90 14 " << num((f.py(f.y0) + f.py(f.y1)) / 2) << ")\">"
    << escape(ylabel) << "</text>\n";
  return s.str();
}

struct Bar {
  double low, high, count;
};

/// Overlaid bar series sharing one x range, e.g. the two training phases.
inline std::string histogram(const std::vector<std::string>& names,
                             const std::vector<std::vector<Bar>>& series,
                             const std::string& title, const std::string& xlabel) {
  Frame f;
  f.width = 760;
  f.right = 140;
  double ymax = 1;
  for (const auto& s : series)
    for (const auto& b : s) ymax = std::max(ymax, b.count);
  f.y1 = ymax * 1.05;
  std::string out = open(f, title) + axes(f, xlabel, "count");
  const auto& pal = palette();
  const double n = static_cast<double>(std::max<std::size_t>(1, series.size()));
  for (std::size_t k = 0; k < series.size(); ++k) {
    for (const auto& b : series[k]) {
      const double w = (b.high - b.low) / n;
      const double x = b.low + w * static_cast<double>(k);
      std::ostringstream s;
      s << "<rect x=\"" << num(f.px(x)) << "\" y=\"" << num(f.py(b.count)) << "\" width=\""
        << num(f.px(x + w) - f.px(x)) << "\" height=\"" << num(f.py(0) - f.py(b.count))
        << "\" fill=\"" << pal[k % pal.size()] << "\"/>\n";
      out += s.str();
    }
    std::ostringstream s;
    s << "<text x=\"" << num(f.width - f.right + 8) << "\" y=\"" << num(f.top + 14 * (k + 1))
      << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\""
      << pal[k % pal.size()] << "\">" << escape(k < names.size() ? names[k] : "") << "</text>\n";
    out += s.str();
  }
  return out + "</svg>\n";
}

struct Series {
  std::string name;
  std::vector<double> x, y, err;  // err may be empty
};

inline std::string line_chart(const std::vector<Series>& series, const std::string& title,
                              const std::string& xlabel, const std::string& ylabel) {
  Frame f;
  f.width = 760;
  f.right = 140;
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      const double e = s.err.empty() ? 0.0 : s.err[i];
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i] - e);
      ymax = std::max(ymax, s.y[i] + e);
    }
  if (!std::isfinite(xmin)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (xmax == xmin) xmin -= 0.5, xmax += 0.5;
  if (ymax == ymin) ymin -= 0.5, ymax += 0.5;
  const double pad = 0.05 * (ymax - ymin);
  f.x0 = xmin, f.x1 = xmax, f.y0 = ymin - pad, f.y1 = ymax + pad;
  std::string out = open(f, title) + axes(f, xlabel, ylabel);
  const auto& pal = palette();
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const auto& c = pal[k % pal.size()];
    std::ostringstream o;
    o << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      o << num(f.px(s.x[i])) << "," << num(f.py(s.y[i])) << " ";
    o << "\"/>\n";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      o << "<circle cx=\"" << num(f.px(s.x[i])) << "\" cy=\"" << num(f.py(s.y[i]))
        << "\" r=\"3\" fill=\"" << c << "\"/>\n";
      if (!s.err.empty()) {
        o << "<line x1=\"" << num(f.px(s.x[i])) << "\" y1=\"" << num(f.py(s.y[i] - s.err[i]))
          << "\" x2=\"" << num(f.px(s.x[i])) << "\" y2=\"" << num(f.py(s.y[i] + s.err[i]))
          << "\" stroke=\"" << c << "\"/>\n";
      }
    }
    o << "<text x=\"" << num(f.width - f.right + 8) << "\" y=\"" << num(f.top + 14 * (k + 1))
      << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"" << c
      << "\">" << escape(s.name) << "</text>\n";
    out += o.str();
  }
  return out + "</svg>\n";
}

struct Point {
  double x, y;
  int group;    // colour index; negative draws black
  bool hollow;  // ring marker
};

inline std::string scatter(const std::vector<Point>& pts, const std::string& title,
                           const std::string& xlabel, const std::string& ylabel) {
  Frame f;
  f.width = f.height = 560;
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (const auto& p : pts) {
    xmin = std::min(xmin, p.x), xmax = std::max(xmax, p.x);
    ymin = std::min(ymin, p.y), ymax = std::max(ymax, p.y);
  }
  if (!std::isfinite(xmin)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (xmax == xmin) xmin -= 0.5, xmax += 0.5;
  if (ymax == ymin) ymin -= 0.5, ymax += 0.5;
  f.x0 = xmin, f.x1 = xmax, f.y0 = ymin, f.y1 = ymax;
  std::string out = open(f, title) + axes(f, xlabel, ylabel);
  const auto& pal = palette();
  std::ostringstream o;
  for (const auto& p : pts) {
    const std::string c =
        p.group < 0 ? "black" : pal[static_cast<std::size_t>(p.group) % pal.size()];
    o << "<circle cx=\"" << num(f.px(p.x)) << "\" cy=\"" << num(f.py(p.y)) << "\" r=\"2.5\" "
      << (p.hollow ? "fill=\"none\" stroke=\"" + c + "\"" : "fill=\"" + c + "\"") << "/>\n";
  }
  return out + o.str() + "</svg>\n";
}

}  // namespace svg
}  // namespace oommix
