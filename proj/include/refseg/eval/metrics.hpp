#pragma once
// Segmentation metrics: probability-map binarization, intersection-over-union,
// precision at IoU thresholds, and the per-split evaluation report.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace refseg::eval {

inline constexpr double kBinarizeThreshold = 0.35;
inline constexpr std::array<double, 5> kPrecisionThresholds{0.5, 0.6, 0.7,
                                                            0.8, 0.9};

// Thresholds a src x src probability map into a dst x dst binary mask.
// When resolutions differ the map is first bilinearly resized to the ground
// truth resolution (half-pixel centres, edge clamped — the decoder's own
// upsampling convention).  A pixel is foreground iff prob > threshold
// (strictly), so a uniform map at exactly the threshold stays empty.
template <typename T>
std::vector<std::uint8_t> binarize(std::span<const T> probs, std::size_t src,
                                   std::size_t dst,
                                   double threshold = kBinarizeThreshold);

// |pred AND gt| / |pred OR gt|; two empty masks count as a perfect 1.0.
// Throws std::invalid_argument on size mismatch or non-binary values.
double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);

// Fraction of samples whose IoU strictly exceeds the threshold.
// Throws std::invalid_argument on an empty list.
double precision_at(std::span<const double> per_sample_iou, double threshold);

struct EvalReport {
  double miou = 0.0;
  std::array<double, 5> precision{};  // at kPrecisionThresholds
  std::vector<double> per_sample_iou;
  std::size_t sample_count = 0;
};

// miou = arithmetic mean of the per-sample IoUs; precision is non-increasing
// across the thresholds by construction.
EvalReport make_report(std::vector<double> per_sample_iou);

// Flat CSV serialization: split, miou, pr50..pr90, sample_count.
std::string csv_header();
std::string csv_row(const EvalReport& report, std::string_view split);

}  // namespace refseg::eval
