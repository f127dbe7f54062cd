#pragma once
// Tiny deterministic SVG chart emitter (axes, bars, polylines, text).
// Output is a pure function of the inputs: fixed layout, fixed palette,
// fixed number formatting.

#include <string>
#include <vector>

namespace refseg::train {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;  // same length as x
};

// Vertical bar chart, one bar per label/value pair, y axis from 0.
// Throws std::invalid_argument on empty input or mismatched sizes.
std::string bar_chart_svg(const std::string& title,
                          const std::vector<std::string>& labels,
                          const std::vector<double>& values);

// Line chart with one polyline + markers per series and a legend.
// Throws std::invalid_argument on empty input or mismatched series.
std::string line_chart_svg(const std::string& title,
                           const std::vector<Series>& series);

}  // namespace refseg::train
