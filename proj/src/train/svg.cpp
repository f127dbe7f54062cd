#include "refseg/train/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>
#include <stdexcept>

namespace refseg::train {
namespace {

constexpr const char* kPalette[] = {"#4878a8", "#d1495b", "#3e9651",
                                    "#e1a01c", "#8063a8", "#56a3a6"};
constexpr std::size_t kPaletteSize = sizeof(kPalette) / sizeof(kPalette[0]);

std::string esc(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string px(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string fixed3(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  return buf;
}

void open_svg(std::string& s, double w, double h) {
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + px(w) +
       "\" height=\"" + px(h) + "\" viewBox=\"0 0 " + px(w) + " " + px(h) +
       "\" font-family=\"monospace\">\n";
  s += "<rect x=\"0\" y=\"0\" width=\"" + px(w) + "\" height=\"" + px(h) +
       "\" fill=\"#ffffff\"/>\n";
}

void add_title(std::string& s, const std::string& title, double w) {
  s += "<text x=\"" + px(w / 2) +
       "\" y=\"24\" font-size=\"15\" text-anchor=\"middle\">" + esc(title) +
       "</text>\n";
}

void add_line(std::string& s, double x1, double y1, double x2, double y2,
              const char* color, double width) {
  s += "<line x1=\"" + px(x1) + "\" y1=\"" + px(y1) + "\" x2=\"" + px(x2) +
       "\" y2=\"" + px(y2) + "\" stroke=\"" + color + "\" stroke-width=\"" +
       px(width) + "\"/>\n";
}

void add_text(std::string& s, double x, double y, const std::string& t,
              int size, const char* anchor, const std::string& extra = "") {
  s += "<text x=\"" + px(x) + "\" y=\"" + px(y) + "\" font-size=\"" +
       std::to_string(size) + "\" text-anchor=\"" + anchor + "\"" + extra +
       ">" + esc(t) + "</text>\n";
}

// Horizontal gridlines + y-axis tick labels over [lo, hi] with 5 intervals.
void add_y_axis(std::string& s, double left, double right, double top,
                double plot_h, double lo, double hi) {
  for (int i = 0; i <= 5; ++i) {
    const double v = lo + (hi - lo) * i / 5.0;
    const double y = top + plot_h * (1.0 - double(i) / 5.0);
    add_line(s, left, y, right, y, i == 0 ? "#444444" : "#dddddd", 1.0);
    add_text(s, left - 8, y + 4, fixed3(v), 11, "end");
  }
  add_line(s, left, top, left, top + plot_h, "#444444", 1.0);
}

}  // namespace

std::string bar_chart_svg(const std::string& title,
                          const std::vector<std::string>& labels,
                          const std::vector<double>& values) {
  if (labels.empty()) throw std::invalid_argument("bar_chart_svg: no bars");
  if (labels.size() != values.size())
    throw std::invalid_argument("bar_chart_svg: labels/values size mismatch");

  const double left = 70, right_pad = 25, top = 50, bottom = 95;
  const double slot = 90, plot_h = 260;
  const double plot_w = slot * double(labels.size());
  const double w = std::max(360.0, left + plot_w + right_pad);
  const double h = top + plot_h + bottom;

  double vmax = 0.0;
  for (double v : values) {
    if (!std::isfinite(v) || v < 0.0)
      throw std::invalid_argument("bar_chart_svg: values must be finite and >= 0");
    vmax = std::max(vmax, v);
  }
  vmax = vmax > 0.0 ? vmax * 1.05 : 1.0;

  std::string s;
  open_svg(s, w, h);
  add_title(s, title, w);
  add_y_axis(s, left, left + plot_w, top, plot_h, 0.0, vmax);

  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double cx = left + slot * (double(i) + 0.5);
    const double bh = plot_h * values[i] / vmax;
    const double x0 = cx - 27.0, y0 = top + plot_h - bh;
    s += "<rect x=\"" + px(x0) + "\" y=\"" + px(y0) + "\" width=\"54\" height=\"" +
         px(bh) + "\" fill=\"" + kPalette[0] + "\"/>\n";
    char val[32];
    std::snprintf(val, sizeof(val), "%.4f", values[i]);
    add_text(s, cx, y0 - 6, val, 11, "middle");
    const double ly = top + plot_h + 16;
    add_text(s, cx, ly, labels[i], 10, "end",
             " transform=\"rotate(-30 " + px(cx) + " " + px(ly) + ")\"");
  }
  s += "</svg>\n";
  return s;
}

std::string line_chart_svg(const std::string& title,
                           const std::vector<Series>& series) {
  if (series.empty()) throw std::invalid_argument("line_chart_svg: no series");
  double xlo = std::numeric_limits<double>::infinity(), xhi = -xlo;
  double ylo = xlo, yhi = -xlo;
  std::set<double> xticks;
  for (const auto& sr : series) {
    if (sr.x.empty() || sr.x.size() != sr.y.size())
      throw std::invalid_argument("line_chart_svg: bad series '" + sr.label + "'");
    for (std::size_t i = 0; i < sr.x.size(); ++i) {
      if (!std::isfinite(sr.x[i]) || !std::isfinite(sr.y[i]))
        throw std::invalid_argument("line_chart_svg: non-finite point");
      xlo = std::min(xlo, sr.x[i]); xhi = std::max(xhi, sr.x[i]);
      ylo = std::min(ylo, sr.y[i]); yhi = std::max(yhi, sr.y[i]);
      xticks.insert(sr.x[i]);
    }
  }
  if (xlo == xhi) { xlo -= 1.0; xhi += 1.0; }
  if (ylo == yhi) {
    const double pad = std::max(0.01, std::abs(ylo) * 0.05);
    ylo -= pad; yhi += pad;
  } else {
    const double pad = (yhi - ylo) * 0.05;
    ylo -= pad; yhi += pad;
  }

  const double left = 70, top = 50, plot_w = 440, plot_h = 260;
  const double legend_w = 170, bottom = 60;
  const double w = left + plot_w + 20 + legend_w;
  const double h = top + plot_h + bottom;
  const auto x_px = [&](double v) { return left + plot_w * (v - xlo) / (xhi - xlo); };
  const auto y_px = [&](double v) { return top + plot_h * (1.0 - (v - ylo) / (yhi - ylo)); };

  std::string s;
  open_svg(s, w, h);
  add_title(s, title, w);
  add_y_axis(s, left, left + plot_w, top, plot_h, ylo, yhi);
  add_line(s, left, top + plot_h, left + plot_w, top + plot_h, "#444444", 1.0);

  // x ticks at the distinct data positions when few, else 6 even stops
  std::vector<double> stops(xticks.begin(), xticks.end());
  if (stops.size() > 10) {
    stops.clear();
    for (int i = 0; i <= 5; ++i) stops.push_back(xlo + (xhi - xlo) * i / 5.0);
  }
  for (double v : stops) {
    const double x = x_px(v);
    add_line(s, x, top + plot_h, x, top + plot_h + 5, "#444444", 1.0);
    add_text(s, x, top + plot_h + 20, num(v), 11, "middle");
  }

  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* color = kPalette[k % kPaletteSize];
    std::string pts;
    for (std::size_t i = 0; i < series[k].x.size(); ++i) {
      if (!pts.empty()) pts += " ";
      pts += px(x_px(series[k].x[i])) + "," + px(y_px(series[k].y[i]));
    }
    s += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + color +
         "\" stroke-width=\"2\"/>\n";
    for (std::size_t i = 0; i < series[k].x.size(); ++i)
      s += "<circle cx=\"" + px(x_px(series[k].x[i])) + "\" cy=\"" +
           px(y_px(series[k].y[i])) + "\" r=\"3\" fill=\"" + color + "\"/>\n";
    const double ly = top + 14.0 + 18.0 * double(k);
    s += "<rect x=\"" + px(left + plot_w + 28) + "\" y=\"" + px(ly - 9) +
         "\" width=\"12\" height=\"12\" fill=\"" + color + "\"/>\n";
    add_text(s, left + plot_w + 46, ly + 1, series[k].label, 11, "start");
  }
  s += "</svg>\n";
  return s;
}

}  // namespace refseg::train
