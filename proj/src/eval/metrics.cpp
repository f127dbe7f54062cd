#include "refseg/eval/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

namespace refseg::eval {

namespace {

// half-pixel-centre source coordinate with edge clamping; returns the two
// taps and the weight of the second one
void resize_taps(std::size_t in_n, std::size_t out_n, std::size_t o,
                 std::size_t& i0, std::size_t& i1, double& w1) {
  const double src = (double(o) + 0.5) * double(in_n) / double(out_n) - 0.5;
  if (src <= 0.0) {
    i0 = i1 = 0;
    w1 = 0.0;
  } else if (src >= double(in_n - 1)) {
    i0 = i1 = in_n - 1;
    w1 = 0.0;
  } else {
    i0 = std::size_t(src);
    i1 = i0 + 1;
    w1 = src - double(i0);
  }
}

}  // namespace

template <typename T>
std::vector<std::uint8_t> binarize(std::span<const T> probs, std::size_t src,
                                   std::size_t dst, double threshold) {
  if (src == 0 || dst == 0)
    throw std::invalid_argument("binarize: resolutions must be positive");
  if (probs.size() != src * src)
    throw std::invalid_argument("binarize: expected " +
                                std::to_string(src * src) + " values, got " +
                                std::to_string(probs.size()));
  if (!(threshold > 0.0) || !(threshold < 1.0))
    throw std::invalid_argument("binarize: threshold must lie in (0, 1)");

  std::vector<std::uint8_t> out(dst * dst);
  if (src == dst) {
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = double(probs[i]) > threshold ? 1 : 0;
    return out;
  }
  for (std::size_t r = 0; r < dst; ++r) {
    std::size_t r0, r1;
    double wr1;
    resize_taps(src, dst, r, r0, r1, wr1);
    for (std::size_t c = 0; c < dst; ++c) {
      std::size_t c0, c1;
      double wc1;
      resize_taps(src, dst, c, c0, c1, wc1);
      const double v =
          (1.0 - wr1) * ((1.0 - wc1) * double(probs[r0 * src + c0]) +
                         wc1 * double(probs[r0 * src + c1])) +
          wr1 * ((1.0 - wc1) * double(probs[r1 * src + c0]) +
                 wc1 * double(probs[r1 * src + c1]));
      out[r * dst + c] = v > threshold ? 1 : 0;
    }
  }
  return out;
}

template std::vector<std::uint8_t> binarize<float>(std::span<const float>,
                                                   std::size_t, std::size_t,
                                                   double);
template std::vector<std::uint8_t> binarize<double>(std::span<const double>,
                                                    std::size_t, std::size_t,
                                                    double);

double iou(std::span<const std::uint8_t> pred,
           std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size())
    throw std::invalid_argument("iou: mask sizes differ (" +
                                std::to_string(pred.size()) + " vs " +
                                std::to_string(gt.size()) + ")");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] > 1 || gt[i] > 1)
      throw std::invalid_argument("iou: masks must be binary");
    inter += pred[i] & gt[i];
    uni += pred[i] | gt[i];
  }
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

double precision_at(std::span<const double> per_sample_iou, double threshold) {
  if (per_sample_iou.empty())
    throw std::invalid_argument("precision_at: no samples");
  std::size_t hits = 0;
  for (double v : per_sample_iou) hits += v > threshold;
  return double(hits) / double(per_sample_iou.size());
}

EvalReport make_report(std::vector<double> per_sample_iou) {
  EvalReport r;
  r.sample_count = per_sample_iou.size();
  r.miou = per_sample_iou.empty()
               ? 0.0
               : std::accumulate(per_sample_iou.begin(), per_sample_iou.end(),
                                 0.0) /
                     double(per_sample_iou.size());
  for (std::size_t i = 0; i < kPrecisionThresholds.size(); ++i)
    r.precision[i] = per_sample_iou.empty()
                         ? 0.0
                         : precision_at(per_sample_iou,
                                        kPrecisionThresholds[i]);
  r.per_sample_iou = std::move(per_sample_iou);
  return r;
}

std::string csv_header() {
  return "split,miou,pr50,pr60,pr70,pr80,pr90,sample_count";
}

std::string csv_row(const EvalReport& report, std::string_view split) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f,%.6f,%.6f,%.6f", report.miou,
                report.precision[0], report.precision[1], report.precision[2],
                report.precision[3], report.precision[4]);
  return std::string(split) + "," + buf + "," +
         std::to_string(report.sample_count);
}

}  // namespace refseg::eval
