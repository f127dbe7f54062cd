// Metrics against brute-force pixel-loop oracles, the strict threshold
// conventions, and the CSV report shape.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <random>
#include <sstream>
#include <vector>

#include "refseg/eval/metrics.hpp"

using namespace refseg::eval;

namespace {

// independent oracle: count loop written without reusing any library code
double iou_oracle(const std::vector<std::uint8_t>& a,
                  const std::vector<std::uint8_t>& b) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == 1 && b[i] == 1) ++inter;
    if (a[i] == 1 || b[i] == 1) ++uni;
  }
  if (uni == 0) return 1.0;
  return double(inter) / double(uni);
}

std::vector<std::uint8_t> random_mask(std::mt19937_64& gen, std::size_t n,
                                      double density) {
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<std::uint8_t> m(n);
  for (auto& v : m) v = u(gen) < density;
  return m;
}

}  // namespace

TEST_CASE("binarize uses a strict threshold and exact boundaries") {
  const std::vector<double> at_threshold(16, 0.35);
  CHECK(binarize<double>(at_threshold, 4, 4) ==
        std::vector<std::uint8_t>(16, 0));
  const std::vector<double> above(16, 0.5);
  CHECK(binarize<double>(above, 4, 4) == std::vector<std::uint8_t>(16, 1));
  std::vector<double> checker(16);
  for (std::size_t i = 0; i < 16; ++i)
    checker[i] = ((i / 4) + i) % 2 ? 0.9 : 0.2;
  const auto mask = binarize<double>(checker, 4, 4);
  for (std::size_t i = 0; i < 16; ++i)
    CHECK(mask[i] == (((i / 4) + i) % 2 ? 1 : 0));

  CHECK_THROWS_AS((void)binarize<double>(checker, 5, 5), std::invalid_argument);
  CHECK_THROWS_AS((void)binarize<double>(checker, 4, 4, 1.0),
                  std::invalid_argument);
}

TEST_CASE("binarize upsamples to the ground-truth resolution first") {
  // 2x2 -> 4x4 with half-pixel centres: corner output pixels copy the source
  // corners; interior pixels mix 3:1, e.g. 0.75*0.9 + 0.25*0.1 = 0.7 > 0.35
  // while 0.25*0.9 + 0.75*0.1 = 0.3 stays below.
  const std::vector<double> src{0.9, 0.1, 0.1, 0.1};
  const auto mask = binarize<double>(src, 2, 4);
  CHECK(mask == std::vector<std::uint8_t>{1, 1, 0, 0,  //
                                          1, 1, 0, 0,  //
                                          0, 0, 0, 0,  //
                                          0, 0, 0, 0});
  // identity when resolutions already match
  const auto same = binarize<double>(src, 2, 2);
  CHECK(same == std::vector<std::uint8_t>{1, 0, 0, 0});
}

TEST_CASE("iou: hand values, totality, and validation") {
  const std::vector<std::uint8_t> empty(64, 0);
  std::vector<std::uint8_t> full(64, 1);
  CHECK(iou(empty, empty) == 1.0);  // total by definition
  CHECK(iou(full, full) == 1.0);
  CHECK(iou(full, empty) == 0.0);

  // pred = left half, gt = full frame at 64x64 -> 2048/4096
  std::vector<std::uint8_t> half(64 * 64, 0), frame(64 * 64, 1);
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 32; ++x) half[y * 64 + x] = 1;
  CHECK(iou(half, frame) == 0.5);
  CHECK(iou(frame, half) == 0.5);  // symmetry

  std::vector<std::uint8_t> other(63, 0);
  CHECK_THROWS_AS((void)iou(other, empty), std::invalid_argument);
  std::vector<std::uint8_t> bad(64, 2);
  CHECK_THROWS_AS((void)iou(bad, full), std::invalid_argument);
}

TEST_CASE("iou matches the pixel-loop oracle on 100 random pairs") {
  std::mt19937_64 gen(31);
  std::uniform_real_distribution<double> dens(0.0, 1.0);
  for (int it = 0; it < 100; ++it) {
    const auto a = random_mask(gen, 1024, dens(gen));
    const auto b = random_mask(gen, 1024, dens(gen));
    CHECK(iou(a, b) == iou_oracle(a, b));  // exact, both are integer ratios
    CHECK(iou(a, b) == iou(b, a));
  }
}

TEST_CASE("precision_at counts strictly and rejects empty input") {
  const std::vector<double> ious{0.6, 0.4, 0.9};
  CHECK(precision_at(ious, 0.5) == doctest::Approx(2.0 / 3.0));
  CHECK(precision_at(ious, 0.9) == 0.0);   // 0.9 is not > 0.9
  CHECK(precision_at(ious, 0.89) == doctest::Approx(1.0 / 3.0));
  CHECK_THROWS_AS((void)precision_at({}, 0.5), std::invalid_argument);
}

TEST_CASE("report: mean, monotone precision, CSV layout") {
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> ious(257);
  for (auto& v : ious) v = u(gen);
  const EvalReport r = make_report(ious);
  CHECK(r.sample_count == 257);
  double mean = 0;
  for (double v : ious) mean += v;
  mean /= double(ious.size());
  CHECK(r.miou == doctest::Approx(mean).epsilon(1e-12));
  for (std::size_t i = 1; i < r.precision.size(); ++i)
    CHECK(r.precision[i] <= r.precision[i - 1]);
  for (double p : r.precision) {
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
  }

  // brute-force each precision value
  for (std::size_t i = 0; i < kPrecisionThresholds.size(); ++i) {
    std::size_t hits = 0;
    for (double v : ious) hits += v > kPrecisionThresholds[i];
    CHECK(r.precision[i] == double(hits) / double(ious.size()));
  }

  CHECK(csv_header() == "split,miou,pr50,pr60,pr70,pr80,pr90,sample_count");
  const std::string row = csv_row(r, "val");
  CHECK(row.rfind("val,", 0) == 0);
  CHECK(std::count(row.begin(), row.end(), ',') == 7);
  CHECK(row.substr(row.size() - 4) == ",257");

  const EvalReport perfect = make_report(std::vector<double>(3, 1.0));
  for (double p : perfect.precision) CHECK(p == 1.0);
  CHECK(perfect.miou == 1.0);
}
