#include "refseg/data/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "refseg/core/rng.hpp"

namespace refseg::data {

using core::Rng;
using nlohmann::json;

// ============================================================ configuration

void GenConfig::validate() const {
  if (n < 10) throw std::invalid_argument("dataset: n must be at least 10");
  if (resolution < 8)
    throw std::invalid_argument("dataset: resolution must be at least 8");
  if (max_text_len < 9)
    throw std::invalid_argument(
        "dataset: max_text_len must be at least 9 (longest template needs 9 "
        "tokens)");
  const double sum = train_fraction + val_fraction + test_fraction;
  if (train_fraction < 0 || val_fraction < 0 || test_fraction < 0 ||
      std::fabs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("dataset: split fractions must sum to 1");
}

std::array<std::size_t, 3> split_counts(std::size_t n, double train_fraction,
                                        double val_fraction) {
  const auto train = std::size_t(std::llround(double(n) * train_fraction));
  const auto val = std::size_t(std::llround(double(n) * val_fraction));
  if (train + val > n)
    throw std::invalid_argument("dataset: split fractions leave no test data");
  return {train, val, n - train - val};
}

// ============================================================ scene building

namespace {

constexpr int kBoxGap = 2;        // empty pixels required between shapes
constexpr int kPlacementTries = 40;
constexpr int kSceneAttempts = 100;
constexpr std::size_t kComboCount = kKindCount * kColorCount;

int draw_size(Rng& rng, Kind k) {
  switch (k) {
    case Kind::circle: return 4 + int(rng.bounded(5));    // radius 4..8
    case Kind::square: return 6 + int(rng.bounded(8));    // side 6..13
    case Kind::triangle: return 4 + int(rng.bounded(5));  // half-width 4..8
  }
  throw std::invalid_argument("draw_size: bad Kind");
}

// uniform combo excluding one; kind = combo % 3, color = combo / 3
std::size_t draw_combo_except(Rng& rng, std::size_t banned) {
  std::size_t c = rng.bounded(kComboCount - 1);
  if (c >= banned) ++c;
  return c;
}

bool placement_ok(const Shape& s, int frame, const std::vector<Shape>& placed) {
  const Box b = bounding_box(s);
  if (!inside_frame(b, frame)) return false;
  for (const Shape& p : placed)
    if (!boxes_gap_at_least(b, bounding_box(p), kBoxGap)) return false;
  return true;
}

// draws a center admissible for the size's bounding box; the caller still
// checks gaps (and any relation constraint) and may retry
Shape draw_shape_at_random(Rng& rng, Kind kind, Color color, int size,
                           int frame) {
  Box at_origin = bounding_box(Shape{kind, color, 0, 0, size});
  const int lo_x = -at_origin.x0, hi_x = frame - 1 - at_origin.x1;
  const int lo_y = -at_origin.y0, hi_y = frame - 1 - at_origin.y1;
  if (hi_x < lo_x || hi_y < lo_y)
    return Shape{kind, color, -1, -1, size};  // cannot fit; placement_ok fails
  Shape s{kind, color, 0, 0, size};
  s.cx = lo_x + int(rng.bounded(std::uint64_t(hi_x - lo_x + 1)));
  s.cy = lo_y + int(rng.bounded(std::uint64_t(hi_y - lo_y + 1)));
  return s;
}

// appends a shape subject to placement (and an optional per-shape veto);
// false when no admissible position was found
template <typename Veto>
bool try_place(Rng& rng, std::vector<Shape>& shapes, Kind kind, Color color,
               int frame, Veto veto) {
  const int size = draw_size(rng, kind);
  for (int i = 0; i < kPlacementTries; ++i) {
    Shape s = draw_shape_at_random(rng, kind, color, size, frame);
    if (!placement_ok(s, frame, shapes)) continue;
    if (veto(s)) continue;
    shapes.push_back(s);
    return true;
  }
  return false;
}

bool no_veto(const Shape&) { return false; }

// One full scene attempt for the given template family and target identity.
// Returns true and fills `scene`/`expr` on success; the target is index 0.
bool try_build_scene(Rng& rng, const GenConfig& cfg, bool attribute_family,
                     Kind tkind, Color tcolor, Scene& scene,
                     ExpressionSpec& expr) {
  scene.shapes.clear();
  const int frame = cfg.resolution;
  const std::size_t tcombo =
      std::size_t(tcolor) * kKindCount + std::size_t(tkind);

  if (attribute_family) {
    if (!try_place(rng, scene.shapes, tkind, tcolor, frame, no_veto))
      return false;
    const std::size_t extras = 1 + rng.bounded(3);  // scene size 2..4
    for (std::size_t i = 0; i < extras; ++i) {
      const std::size_t c = draw_combo_except(rng, tcombo);
      if (!try_place(rng, scene.shapes, Kind(c % kKindCount),
                     Color(c / kKindCount), frame, no_veto))
        return false;
    }
    expr = ExpressionSpec{tkind, tcolor, std::nullopt, Kind::circle,
                          Color::red};
  } else {
    const auto rel = Relation(rng.bounded(4));
    const std::size_t lcombo = draw_combo_except(rng, tcombo);
    const Kind lkind = Kind(lcombo % kKindCount);
    const Color lcolor = Color(lcombo / kKindCount);

    // target goes first (index 0), then the landmark
    if (!try_place(rng, scene.shapes, tkind, tcolor, frame, no_veto))
      return false;
    const Shape& target = scene.shapes[0];
    auto landmark_veto = [&](const Shape& lm) {
      return !relation_holds(rel, target, lm);
    };
    if (!try_place(rng, scene.shapes, lkind, lcolor, frame, landmark_veto))
      return false;
    const Shape& landmark = scene.shapes[1];

    const std::size_t extras = rng.bounded(3);  // scene size 2..4
    for (std::size_t i = 0; i < extras; ++i) {
      const std::size_t c = draw_combo_except(rng, lcombo);
      const Kind dkind = Kind(c % kKindCount);
      // a distractor of the target's kind must not satisfy the relation too
      auto veto = [&](const Shape& d) {
        return dkind == tkind && relation_holds(rel, d, landmark);
      };
      if (!try_place(rng, scene.shapes, dkind, Color(c / kKindCount), frame,
                     veto))
        return false;
    }
    expr = ExpressionSpec{tkind, std::nullopt, rel, lkind, lcolor};
  }
  return resolve(scene, expr) == std::vector<std::size_t>{0};
}

}  // namespace

Sample generate_sample(const GenConfig& cfg, std::uint64_t id) {
  cfg.validate();
  if (id >= cfg.n)
    throw std::invalid_argument("generate_sample: id out of range");
  Rng rng(core::derive_seed(cfg.seed, id));
  const bool attribute_family = id % 2 == 0;
  const std::size_t combo = std::size_t((id / 2) % kComboCount);
  const Kind tkind = Kind(combo % kKindCount);
  const Color tcolor = Color(combo / kKindCount);

  Sample s;
  s.id = id;
  s.scene.seed = core::derive_seed(cfg.seed, id);
  bool built = false;
  for (int attempt = 0; attempt < kSceneAttempts && !built; ++attempt)
    built = try_build_scene(rng, cfg, attribute_family, tkind, tcolor, s.scene,
                            s.expression);
  if (!built)
    throw std::runtime_error("dataset: no admissible scene for sample " +
                             std::to_string(id) + " after " +
                             std::to_string(kSceneAttempts) + " attempts");
  s.target_index = 0;

  const Vocabulary vocab;
  s.tokens = vocab.tokenize(s.expression.words(), cfg.max_text_len);
  s.valid_len = s.tokens.size();
  while (s.valid_len > 0 && s.tokens[s.valid_len - 1] == Vocabulary::pad)
    --s.valid_len;
  for (std::size_t i = 1; i + 1 < s.valid_len; ++i)
    s.maskable.push_back(std::int32_t(i));

  s.image = render(s.scene.shapes, cfg.resolution);
  s.gt = rasterize(s.scene.shapes[s.target_index], cfg.resolution);
  const auto fg = std::size_t(std::count(s.gt.begin(), s.gt.end(), 1));
  if (fg < 16)
    throw std::runtime_error("dataset: ground truth of sample " +
                             std::to_string(id) + " has only " +
                             std::to_string(fg) + " foreground pixels");
  return s;
}

Dataset generate_dataset(const GenConfig& cfg) {
  cfg.validate();
  const auto counts =
      split_counts(cfg.n, cfg.train_fraction, cfg.val_fraction);
  Dataset ds;
  ds.config = cfg;
  ds.train.reserve(counts[0]);
  ds.val.reserve(counts[1]);
  ds.test.reserve(counts[2]);
  for (std::uint64_t id = 0; id < cfg.n; ++id) {
    Sample s = generate_sample(cfg, id);
    if (id < counts[0])
      ds.train.push_back(std::move(s));
    else if (id < counts[0] + counts[1])
      ds.val.push_back(std::move(s));
    else
      ds.test.push_back(std::move(s));
  }
  return ds;
}

// ============================================================ serialization

std::vector<std::int64_t> rle_encode(const std::vector<std::uint8_t>& mask) {
  std::vector<std::int64_t> runs;
  std::uint8_t current = 0;  // background first
  std::int64_t length = 0;
  for (std::uint8_t px : mask) {
    if (px > 1) throw std::invalid_argument("rle_encode: mask must be binary");
    if (px == current) {
      ++length;
    } else {
      runs.push_back(length);
      current = px;
      length = 1;
    }
  }
  runs.push_back(length);
  return runs;
}

std::vector<std::uint8_t> rle_decode(const std::vector<std::int64_t>& runs,
                                     std::size_t pixels) {
  std::vector<std::uint8_t> mask;
  mask.reserve(pixels);
  std::uint8_t current = 0;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    if (runs[i] < 0 || (runs[i] == 0 && i != 0))
      throw std::invalid_argument("rle_decode: bad run length");
    mask.insert(mask.end(), std::size_t(runs[i]), current);
    current ^= 1;
  }
  if (mask.size() != pixels)
    throw std::invalid_argument("rle_decode: runs cover " +
                                std::to_string(mask.size()) + " pixels, want " +
                                std::to_string(pixels));
  return mask;
}

void write_ppm(const std::filesystem::path& path, int width, int height,
               const std::vector<std::uint8_t>& rgb) {
  if (rgb.size() != std::size_t(width) * height * 3)
    throw std::invalid_argument("write_ppm: pixel buffer size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_ppm: cannot open " + path.string());
  out << "P6\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(rgb.data()),
            std::streamsize(rgb.size()));
  if (!out) throw std::runtime_error("write_ppm: write failed for " + path.string());
}

std::vector<std::uint8_t> read_ppm(const std::filesystem::path& path,
                                   int& width, int& height) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_ppm: cannot open " + path.string());
  std::string magic;
  int maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (!in || magic != "P6" || width <= 0 || height <= 0 || maxval != 255)
    throw std::runtime_error("read_ppm: unsupported header in " + path.string());
  in.get();  // single whitespace after maxval
  std::vector<std::uint8_t> rgb(std::size_t(width) * height * 3);
  in.read(reinterpret_cast<char*>(rgb.data()), std::streamsize(rgb.size()));
  if (in.gcount() != std::streamsize(rgb.size()))
    throw std::runtime_error("read_ppm: truncated pixel data in " + path.string());
  return rgb;
}

namespace {

std::string image_name(std::uint64_t id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06llu.ppm", (unsigned long long)id);
  return buf;
}

json sample_record(const Sample& s) {
  json shapes = json::array();
  for (const Shape& sh : s.scene.shapes)
    shapes.push_back({{"kind", to_string(sh.kind)},
                      {"color", to_string(sh.color)},
                      {"x", sh.cx},
                      {"y", sh.cy},
                      {"size", sh.size}});
  return json{{"id", s.id},
              {"expression", s.expression.words()},
              {"target", s.target_index},
              {"tokens", s.tokens},
              {"shapes", std::move(shapes)},
              {"rle", rle_encode(s.gt)}};
}

void write_split(const Dataset& ds, const std::vector<Sample>& samples,
                 const std::filesystem::path& dir, const char* split_name) {
  std::filesystem::create_directories(dir / "images");

  std::ofstream ann(dir / "annotations.jsonl");
  if (!ann)
    throw std::runtime_error("write_dataset: cannot open " +
                             (dir / "annotations.jsonl").string());
  for (const Sample& s : samples) {
    ann << sample_record(s).dump() << '\n';
    write_ppm(dir / "images" / image_name(s.id), ds.config.resolution,
              ds.config.resolution, s.image);
  }

  json vocab_map;
  const Vocabulary vocab;
  vocab_map["<pad>"] = Vocabulary::pad;
  vocab_map["<sos>"] = Vocabulary::sos;
  vocab_map["<eos>"] = Vocabulary::eos;
  for (std::int32_t id = 3; std::size_t(id) < vocab.size(); ++id)
    vocab_map[vocab.word(id)] = id;
  json palette_map;
  for (std::size_t c = 0; c < kColorCount; ++c)
    palette_map[to_string(Color(c))] = palette(Color(c));
  json meta{{"n", ds.config.n},
            {"seed", ds.config.seed},
            {"resolution", ds.config.resolution},
            {"max_text_len", ds.config.max_text_len},
            {"fractions",
             {ds.config.train_fraction, ds.config.val_fraction,
              ds.config.test_fraction}},
            {"split", split_name},
            {"count", samples.size()},
            {"vocab", std::move(vocab_map)},
            {"palette", std::move(palette_map)},
            {"background", kBackground}};
  std::ofstream mf(dir / "meta.json");
  if (!mf)
    throw std::runtime_error("write_dataset: cannot open " +
                             (dir / "meta.json").string());
  mf << meta.dump(2) << '\n';
}

}  // namespace

void write_dataset(const Dataset& ds, const std::filesystem::path& root) {
  write_split(ds, ds.train, root / "train", "train");
  write_split(ds, ds.val, root / "val", "val");
  write_split(ds, ds.test, root / "test", "test");
}

std::vector<Sample> read_split(const std::filesystem::path& split_dir) {
  std::ifstream mf(split_dir / "meta.json");
  if (!mf)
    throw std::runtime_error("read_split: cannot open " +
                             (split_dir / "meta.json").string());
  const json meta = json::parse(mf);
  const int resolution = meta.at("resolution").get<int>();
  const auto seed = meta.at("seed").get<std::uint64_t>();
  const auto pixels = std::size_t(resolution) * std::size_t(resolution);

  std::ifstream ann(split_dir / "annotations.jsonl");
  if (!ann)
    throw std::runtime_error("read_split: cannot open " +
                             (split_dir / "annotations.jsonl").string());
  std::vector<Sample> out;
  std::string line;
  while (std::getline(ann, line)) {
    if (line.empty()) continue;
    const json rec = json::parse(line);
    Sample s;
    s.id = rec.at("id").get<std::uint64_t>();
    s.target_index = rec.at("target").get<std::size_t>();
    s.tokens = rec.at("tokens").get<std::vector<std::int32_t>>();
    s.valid_len = s.tokens.size();
    while (s.valid_len > 0 && s.tokens[s.valid_len - 1] == Vocabulary::pad)
      --s.valid_len;
    for (std::size_t i = 1; i + 1 < s.valid_len; ++i)
      s.maskable.push_back(std::int32_t(i));
    s.expression = parse_expression(rec.at("expression").get<std::string>());
    for (const json& sh : rec.at("shapes"))
      s.scene.shapes.push_back(
          Shape{kind_from_string(sh.at("kind").get<std::string>()),
                color_from_string(sh.at("color").get<std::string>()),
                sh.at("x").get<int>(), sh.at("y").get<int>(),
                sh.at("size").get<int>()});
    s.scene.seed = core::derive_seed(seed, s.id);
    s.gt = rle_decode(rec.at("rle").get<std::vector<std::int64_t>>(), pixels);
    int w = 0, h = 0;
    s.image = read_ppm(split_dir / "images" / image_name(s.id), w, h);
    if (w != resolution || h != resolution)
      throw std::runtime_error("read_split: image resolution mismatch for " +
                               image_name(s.id));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace refseg::data
