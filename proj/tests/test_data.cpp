// Synthetic dataset: vocabulary round-trips, analytic raster oracles, scene
// invariants (disjointness, unique reference), stratified balance,
// determinism, and the on-disk format.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <vector>

#include "refseg/data/dataset.hpp"
#include "refseg/data/scene.hpp"
#include "refseg/data/vocab.hpp"

using namespace refseg::data;
namespace fs = std::filesystem;

namespace {

std::size_t popcount(const std::vector<std::uint8_t>& mask) {
  std::size_t n = 0;
  for (auto v : mask) n += v;
  return n;
}

// every templated expression, both families
std::vector<ExpressionSpec> all_template_expressions() {
  std::vector<ExpressionSpec> out;
  for (std::size_t k = 0; k < kKindCount; ++k)
    for (std::size_t c = 0; c < kColorCount; ++c)
      out.push_back({Kind(k), Color(c), std::nullopt, Kind::circle, Color::red});
  for (std::size_t k = 0; k < kKindCount; ++k)
    for (int r = 0; r < 4; ++r)
      for (std::size_t lk = 0; lk < kKindCount; ++lk)
        for (std::size_t lc = 0; lc < kColorCount; ++lc)
          out.push_back({Kind(k), std::nullopt, Relation(r), Kind(lk), Color(lc)});
  return out;
}

bool same_expression(const ExpressionSpec& a, const ExpressionSpec& b) {
  return a.words() == b.words();
}

std::vector<std::uint8_t> read_file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// relative path -> file bytes for a whole tree
std::map<std::string, std::vector<std::uint8_t>> snapshot_tree(const fs::path& root) {
  std::map<std::string, std::vector<std::uint8_t>> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file())
      out[fs::relative(e.path(), root).generic_string()] = read_file_bytes(e.path());
  return out;
}

fs::path fresh_dir(const char* tag) {
  auto p = fs::temp_directory_path() / (std::string("refseg_data_test_") + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("vocabulary ids are fixed and bijective") {
  const Vocabulary v;
  CHECK(v.size() == 18);
  CHECK(Vocabulary::pad == 0);
  CHECK(Vocabulary::sos == 1);
  CHECK(Vocabulary::eos == 2);
  CHECK(v.id("the") == 3);
  CHECK(v.id("red") == 4);
  CHECK(v.id("orange") == 9);
  CHECK(v.id("circle") == 10);
  CHECK(v.id("triangle") == 12);
  CHECK(v.id("of") == 17);
  for (std::int32_t id = 3; id < 18; ++id) CHECK(v.id(v.word(id)) == id);
  CHECK_THROWS_AS((void)v.id("mauve"), std::invalid_argument);
  CHECK_THROWS_AS((void)v.word(0), std::invalid_argument);
  CHECK_THROWS_AS((void)v.word(18), std::invalid_argument);
}

TEST_CASE("tokenize frames, pads, and rejects") {
  const Vocabulary v;
  const auto t = v.tokenize("the red circle", 12);
  CHECK(t == std::vector<std::int32_t>{1, 3, 4, 10, 2, 0, 0, 0, 0, 0, 0, 0});
  CHECK(v.tokenize("", 5) == std::vector<std::int32_t>{1, 2, 0, 0, 0});
  CHECK(v.tokenize("left of", 4) == std::vector<std::int32_t>{1, 13, 17, 2});
  CHECK_THROWS_AS((void)v.tokenize("the pink circle", 12), std::invalid_argument);
  CHECK_THROWS_AS((void)v.tokenize("the red circle", 4), std::invalid_argument);
}

TEST_CASE("detokenize round-trips every template expression") {
  const Vocabulary v;
  const auto exprs = all_template_expressions();
  CHECK(exprs.size() == 18 + 216);
  for (const auto& e : exprs) {
    const std::string words = e.words();
    CHECK(v.detokenize(v.tokenize(words, 12)) == words);
    CHECK(same_expression(parse_expression(words), e));
  }
  CHECK_THROWS_AS((void)v.detokenize(std::vector<std::int32_t>{3, 4}),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)v.detokenize(std::vector<std::int32_t>{1, 3}),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)v.detokenize(std::vector<std::int32_t>{1, 2, 3}),
                  std::invalid_argument);
  CHECK_THROWS_AS(parse_expression("the red"), std::invalid_argument);
  CHECK_THROWS_AS(parse_expression("blue circle"), std::invalid_argument);
}

TEST_CASE("raster oracles: circle area, square count, triangle closed form") {
  for (int r = 2; r <= 12; ++r) {
    const Shape s{Kind::circle, Color::red, 20, 20, r};
    const auto count = double(popcount(rasterize(s, 44)));
    CHECK(std::fabs(count - std::numbers::pi * r * r) <= 4.0 * r);
  }
  for (int side = 1; side <= 15; ++side) {
    const Shape s{Kind::square, Color::red, 20, 20, side};
    CHECK(popcount(rasterize(s, 44)) == std::size_t(side) * side);
  }
  // inclusive-edge isosceles triangle rasters to exactly 2s^2 + 2s + 1 pixels
  for (int hw = 1; hw <= 10; ++hw) {
    const Shape s{Kind::triangle, Color::red, 20, 20, hw};
    CHECK(popcount(rasterize(s, 44)) == std::size_t(2 * hw * hw + 2 * hw + 1));
  }
}

TEST_CASE("rasters are symmetric and fill their bounding boxes tightly") {
  const int frame = 40;
  for (const Shape s : {Shape{Kind::circle, Color::red, 19, 21, 7},
                        Shape{Kind::triangle, Color::red, 20, 18, 6},
                        Shape{Kind::square, Color::red, 17, 23, 9}}) {
    const auto m = rasterize(s, frame);
    int min_x = frame, max_x = -1, min_y = frame, max_y = -1;
    for (int y = 0; y < frame; ++y)
      for (int x = 0; x < frame; ++x)
        if (m[std::size_t(y) * frame + x]) {
          min_x = std::min(min_x, x);
          max_x = std::max(max_x, x);
          min_y = std::min(min_y, y);
          max_y = std::max(max_y, y);
        }
    const Box b = bounding_box(s);
    CHECK(min_x == b.x0);
    CHECK(max_x == b.x1);
    CHECK(min_y == b.y0);
    CHECK(max_y == b.y1);
    if (s.kind != Kind::square) {  // mirror symmetry about the center column
      for (int y = 0; y < frame; ++y)
        for (int dx = 0; dx <= s.size; ++dx)
          CHECK(m[std::size_t(y) * frame + (s.cx - dx)] ==
                m[std::size_t(y) * frame + (s.cx + dx)]);
    }
  }
}

TEST_CASE("box gaps and frame containment") {
  const Box a{10, 10, 19, 19};
  CHECK(boxes_gap_at_least(a, Box{22, 10, 30, 19}, 2));   // 2 empty columns
  CHECK(!boxes_gap_at_least(a, Box{21, 10, 30, 19}, 2));  // only 1
  CHECK(boxes_gap_at_least(a, Box{21, 10, 30, 19}, 1));
  CHECK(boxes_gap_at_least(a, Box{0, 25, 63, 30}, 2));    // vertical gap wins
  CHECK(!boxes_gap_at_least(a, Box{15, 15, 25, 25}, 0));  // overlapping
  CHECK(inside_frame(a, 20));
  CHECK(!inside_frame(a, 19));
  CHECK(!inside_frame(Box{-1, 0, 5, 5}, 20));
}

TEST_CASE("relations: dominant axis, margin, exclusivity") {
  auto at = [](int x, int y) { return Shape{Kind::circle, Color::red, x, y, 4}; };
  const Shape b = at(30, 30);
  CHECK(relation_holds(Relation::right_of, at(40, 30), b));
  CHECK(relation_holds(Relation::left_of, at(20, 33), b));
  CHECK(relation_holds(Relation::above, at(28, 20), b));
  CHECK(relation_holds(Relation::below, at(33, 40), b));
  // margin: |displacement| must reach 6
  CHECK(!relation_holds(Relation::right_of, at(35, 30), b));
  CHECK(relation_holds(Relation::right_of, at(36, 30), b));
  // dominance must be strict: a diagonal pair has no relation
  for (int r = 0; r < 4; ++r)
    CHECK(!relation_holds(Relation(r), at(38, 38), b));
  // at most one relation holds for any displacement
  for (int dx = -10; dx <= 10; ++dx)
    for (int dy = -10; dy <= 10; ++dy) {
      int holds = 0;
      for (int r = 0; r < 4; ++r)
        holds += relation_holds(Relation(r), at(30 + dx, 30 + dy), b);
      CHECK(holds <= 1);
      if (dx == 0 && dy == 0) CHECK(holds == 0);  // nothing relates to itself
    }
}

TEST_CASE("resolver: attribute matches, landmark uniqueness, relation scope") {
  Scene scene;
  scene.shapes = {
      Shape{Kind::circle, Color::red, 15, 32, 5},     // 0
      Shape{Kind::circle, Color::blue, 48, 32, 5},    // 1
      Shape{Kind::square, Color::red, 32, 10, 8},     // 2
      Shape{Kind::circle, Color::red, 15, 52, 5},     // 3 (second red circle)
  };
  const ExpressionSpec red_circle{Kind::circle, Color::red, std::nullopt,
                                  Kind::circle, Color::red};
  CHECK(resolve(scene, red_circle) == std::vector<std::size_t>{0, 3});
  const ExpressionSpec red_square{Kind::square, Color::red, std::nullopt,
                                  Kind::circle, Color::red};
  CHECK(resolve(scene, red_square) == std::vector<std::size_t>{2});

  // "the circle left of the blue circle": both red circles qualify on kind,
  // but only index 0 and 3 are left of it; both are -> ambiguous (2 hits)
  const ExpressionSpec left_of_blue{Kind::circle, std::nullopt,
                                    Relation::left_of, Kind::circle,
                                    Color::blue};
  CHECK(resolve(scene, left_of_blue) == std::vector<std::size_t>{0, 3});

  // "the square above the blue circle"
  const ExpressionSpec square_above{Kind::square, std::nullopt, Relation::above,
                                    Kind::circle, Color::blue};
  CHECK(resolve(scene, square_above) == std::vector<std::size_t>{2});

  // ambiguous landmark ("the ... of the red circle") -> no referent at all
  const ExpressionSpec amb_landmark{Kind::square, std::nullopt, Relation::above,
                                    Kind::circle, Color::red};
  CHECK(resolve(scene, amb_landmark).empty());
  // absent landmark
  const ExpressionSpec no_landmark{Kind::square, std::nullopt, Relation::above,
                                   Kind::triangle, Color::yellow};
  CHECK(resolve(scene, no_landmark).empty());
}

TEST_CASE("generated samples satisfy every scene invariant") {
  GenConfig cfg;
  cfg.n = 64;
  cfg.seed = 7;
  const Vocabulary vocab;
  for (std::uint64_t id = 0; id < cfg.n; ++id) {
    const Sample s = generate_sample(cfg, id);
    REQUIRE(s.scene.shapes.size() >= 2);
    REQUIRE(s.scene.shapes.size() <= 4);
    CHECK(s.target_index == 0);

    // uniqueness re-checked through the public resolver
    CHECK(resolve(s.scene, s.expression) ==
          std::vector<std::size_t>{s.target_index});

    // geometry: inside frame, pairwise gaps, disjoint masks
    std::vector<std::vector<std::uint8_t>> masks;
    for (const Shape& sh : s.scene.shapes) {
      CHECK(inside_frame(bounding_box(sh), cfg.resolution));
      masks.push_back(rasterize(sh, cfg.resolution));
    }
    for (std::size_t i = 0; i < masks.size(); ++i)
      for (std::size_t j = i + 1; j < masks.size(); ++j) {
        CHECK(boxes_gap_at_least(bounding_box(s.scene.shapes[i]),
                                 bounding_box(s.scene.shapes[j]), 2));
        for (std::size_t p = 0; p < masks[i].size(); ++p)
          CHECK(masks[i][p] + masks[j][p] <= 1);
      }

    // ground truth is exactly the target's raster, with enough foreground
    CHECK(s.gt == masks[s.target_index]);
    CHECK(popcount(s.gt) >= 16);

    // image equals an independent re-render; target pixels show its color
    CHECK(s.image == render(s.scene.shapes, cfg.resolution));
    const auto fill = palette(s.scene.shapes[s.target_index].color);
    for (std::size_t p = 0; p < s.gt.size(); ++p)
      if (s.gt[p]) {
        CHECK(s.image[p * 3] == fill[0]);
        CHECK(s.image[p * 3 + 1] == fill[1]);
        CHECK(s.image[p * 3 + 2] == fill[2]);
      }

    // tokens frame the expression; maskable lists exactly the word positions
    CHECK(s.tokens == vocab.tokenize(s.expression.words(), cfg.max_text_len));
    CHECK(s.tokens[0] == Vocabulary::sos);
    CHECK(s.tokens[s.valid_len - 1] == Vocabulary::eos);
    CHECK(s.maskable.size() == s.valid_len - 2);
    for (std::size_t i = 0; i < s.maskable.size(); ++i)
      CHECK(s.maskable[i] == std::int32_t(i + 1));
  }
}

TEST_CASE("target identity and family are stratified by sample id") {
  GenConfig cfg;
  cfg.n = 72;
  cfg.seed = 3;
  std::map<std::pair<Kind, Color>, int> combos;
  for (std::uint64_t id = 0; id < 72; ++id) {
    const Sample s = generate_sample(cfg, id);
    CHECK(s.expression.is_attribute() == (id % 2 == 0));
    const Shape& t = s.scene.shapes[s.target_index];
    ++combos[{t.kind, t.color}];
  }
  // 72 samples = 2 families x 2 full passes over all 18 (kind, color) combos
  CHECK(combos.size() == 18);
  for (const auto& [combo, count] : combos) CHECK(count == 4);
}

TEST_CASE("generation is a pure function of (n, seed)") {
  GenConfig cfg;
  cfg.n = 24;
  cfg.seed = 123;
  const Dataset a = generate_dataset(cfg);
  const Dataset b = generate_dataset(cfg);
  REQUIRE(a.train.size() == b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].image == b.train[i].image);
    CHECK(a.train[i].gt == b.train[i].gt);
    CHECK(a.train[i].tokens == b.train[i].tokens);
  }
  GenConfig other = cfg;
  other.seed = 124;
  const Dataset c = generate_dataset(other);
  bool differs = false;
  for (std::size_t i = 0; i < a.train.size(); ++i)
    differs |= a.train[i].image != c.train[i].image;
  CHECK(differs);
}

TEST_CASE("split sizes follow round(n * fraction)") {
  CHECK(split_counts(1000, 0.8, 0.1) == std::array<std::size_t, 3>{800, 100, 100});
  CHECK(split_counts(50, 0.8, 0.1) == std::array<std::size_t, 3>{40, 5, 5});
  CHECK(split_counts(25, 0.8, 0.1) == std::array<std::size_t, 3>{20, 3, 2});
  GenConfig cfg;
  cfg.n = 50;
  cfg.seed = 5;
  const Dataset ds = generate_dataset(cfg);
  CHECK(ds.train.size() == 40);
  CHECK(ds.val.size() == 5);
  CHECK(ds.test.size() == 5);
  CHECK(ds.train.front().id == 0);
  CHECK(ds.val.front().id == 40);
  CHECK(ds.test.back().id == 49);
}

TEST_CASE("config validation and the unsatisfiable-scene error") {
  GenConfig cfg;
  cfg.n = 5;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.n = 100;
  cfg.train_fraction = 0.9;  // sums to 1.1
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.train_fraction = 0.8;
  cfg.max_text_len = 8;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.max_text_len = 12;
  CHECK_NOTHROW(cfg.validate());

  // a 12 px frame can hold one shape but never two with a 2 px gap
  GenConfig tiny = cfg;
  tiny.resolution = 12;
  CHECK_THROWS_AS((void)generate_sample(tiny, 0), std::runtime_error);
}

TEST_CASE("run-length encoding: convention, round-trip, rejects") {
  CHECK(rle_encode({0, 0, 0, 0}) == std::vector<std::int64_t>{4});
  CHECK(rle_encode({1, 1, 1, 1}) == std::vector<std::int64_t>{0, 4});
  CHECK(rle_encode({0, 1, 1, 0}) == std::vector<std::int64_t>{1, 2, 1});
  CHECK(rle_decode({1, 2, 1}, 4) == std::vector<std::uint8_t>{0, 1, 1, 0});

  std::mt19937_64 gen(17);
  for (int it = 0; it < 50; ++it) {
    std::vector<std::uint8_t> mask(193);
    for (auto& v : mask) v = gen() % 3 == 0;
    CHECK(rle_decode(rle_encode(mask), mask.size()) == mask);
  }
  CHECK_THROWS_AS((void)rle_decode({1, 2}, 4), std::invalid_argument);   // short
  CHECK_THROWS_AS((void)rle_decode({1, 0, 3}, 4), std::invalid_argument);  // 0 mid-run
  CHECK_THROWS_AS((void)rle_decode({-1, 5}, 4), std::invalid_argument);
  CHECK_THROWS_AS((void)rle_encode({0, 2}), std::invalid_argument);
}

TEST_CASE("ppm files round-trip with an exact header") {
  const auto dir = fresh_dir("ppm");
  std::vector<std::uint8_t> rgb(4 * 3 * 3);
  for (std::size_t i = 0; i < rgb.size(); ++i) rgb[i] = std::uint8_t(i * 7);
  write_ppm(dir / "x.ppm", 4, 3, rgb);

  const auto bytes = read_file_bytes(dir / "x.ppm");
  const std::string header = "P6\n4 3\n255\n";
  REQUIRE(bytes.size() == header.size() + rgb.size());
  CHECK(std::equal(header.begin(), header.end(), bytes.begin()));

  int w = 0, h = 0;
  CHECK(read_ppm(dir / "x.ppm", w, h) == rgb);
  CHECK(w == 4);
  CHECK(h == 3);

  std::ofstream(dir / "bad.ppm", std::ios::binary) << "P6\n4 3\n255\nxx";
  CHECK_THROWS_AS((void)read_ppm(dir / "bad.ppm", w, h), std::runtime_error);
  CHECK_THROWS_AS((void)write_ppm(dir / "y.ppm", 2, 2, rgb), std::invalid_argument);
}

TEST_CASE("dataset directory round-trips and is byte-stable") {
  GenConfig cfg;
  cfg.n = 20;
  cfg.seed = 9;
  const Dataset ds = generate_dataset(cfg);

  const auto dir_a = fresh_dir("a");
  const auto dir_b = fresh_dir("b");
  write_dataset(ds, dir_a);
  write_dataset(generate_dataset(cfg), dir_b);

  // identical (n, seed) twice -> bitwise-identical directory trees
  const auto tree_a = snapshot_tree(dir_a);
  const auto tree_b = snapshot_tree(dir_b);
  REQUIRE(tree_a.size() == tree_b.size());
  CHECK(tree_a.size() == 3 * 2 + cfg.n);  // per split: annotations + meta
  for (const auto& [rel, bytes] : tree_a) {
    REQUIRE(tree_b.count(rel) == 1);
    CHECK(bytes == tree_b.at(rel));
  }

  // full field-level round-trip through read_split
  const auto back = read_split(dir_a / "val");
  REQUIRE(back.size() == ds.val.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    const Sample& w = ds.val[i];
    const Sample& r = back[i];
    CHECK(r.id == w.id);
    CHECK(r.target_index == w.target_index);
    CHECK(r.tokens == w.tokens);
    CHECK(r.valid_len == w.valid_len);
    CHECK(r.maskable == w.maskable);
    CHECK(r.image == w.image);
    CHECK(r.gt == w.gt);
    CHECK(r.scene.seed == w.scene.seed);
    CHECK(same_expression(r.expression, w.expression));
    REQUIRE(r.scene.shapes.size() == w.scene.shapes.size());
    for (std::size_t j = 0; j < r.scene.shapes.size(); ++j) {
      CHECK(r.scene.shapes[j].kind == w.scene.shapes[j].kind);
      CHECK(r.scene.shapes[j].color == w.scene.shapes[j].color);
      CHECK(r.scene.shapes[j].cx == w.scene.shapes[j].cx);
      CHECK(r.scene.shapes[j].cy == w.scene.shapes[j].cy);
      CHECK(r.scene.shapes[j].size == w.scene.shapes[j].size);
    }
  }
  CHECK_THROWS_AS((void)read_split(dir_a / "nope"), std::runtime_error);
}

TEST_CASE("class balance is exact over full stratification cycles") {
  GenConfig cfg;
  cfg.n = 360;  // 10 full 36-sample cycles
  cfg.seed = 21;
  const Dataset ds = generate_dataset(cfg);
  std::map<Kind, int> kinds;
  std::map<Color, int> colors;
  int attribute = 0;
  auto tally = [&](const std::vector<Sample>& split) {
    for (const Sample& s : split) {
      const Shape& t = s.scene.shapes[s.target_index];
      ++kinds[t.kind];
      ++colors[t.color];
      attribute += s.expression.is_attribute();
    }
  };
  tally(ds.train);
  tally(ds.val);
  tally(ds.test);
  for (const auto& [k, n] : kinds) CHECK(n == 120);   // n / 3
  for (const auto& [c, n] : colors) CHECK(n == 60);   // n / 6
  CHECK(attribute == 180);                            // half of each cycle
  for (const Sample& s : ds.train) CHECK(popcount(s.gt) >= 16);
}
