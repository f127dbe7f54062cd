#pragma once
// Deterministic synthetic referring-segmentation dataset.
//
// Every sample is a scene of 2-4 disjoint colored shapes, a templated
// referring expression that provably identifies exactly one of them, and the
// exact raster of that shape as ground truth.  Generation is a pure function
// of (n, seed, config): sample i is produced from a seed derived from
// (seed, i), so the content of each sample is independent of generation
// order and of the split boundaries.
//
// On disk, a dataset is one directory per split with
//   images/NNNNNN.ppm      binary portable pixmaps (P6)
//   annotations.jsonl      one JSON record per line (ids, tokens, target, RLE)
//   meta.json              generation config, vocabulary, palette
// Mask run-length encoding is row-major with alternating run lengths,
// starting with a (possibly zero-length) background run.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "refseg/data/scene.hpp"
#include "refseg/data/vocab.hpp"

namespace refseg::data {

struct GenConfig {
  std::size_t n = 1000;
  std::uint64_t seed = 0;
  int resolution = 64;
  std::size_t max_text_len = 12;
  double train_fraction = 0.8;
  double val_fraction = 0.1;
  double test_fraction = 0.1;

  void validate() const;  // throws std::invalid_argument
};

struct Sample {
  std::uint64_t id = 0;
  Scene scene;
  ExpressionSpec expression;
  std::size_t target_index = 0;
  std::vector<std::int32_t> tokens;     // padded to max_text_len
  std::size_t valid_len = 0;            // tokens before the first PAD
  std::vector<std::int32_t> maskable;   // word positions (no SOS/EOS/PAD)
  std::vector<std::uint8_t> image;      // resolution^2 * 3, interleaved RGB
  std::vector<std::uint8_t> gt;         // resolution^2, values in {0,1}
};

struct Dataset {
  GenConfig config;
  std::vector<Sample> train, val, test;
};

// Exact split sizes: round(n * fraction) for train and val, remainder test.
std::array<std::size_t, 3> split_counts(std::size_t n, double train_fraction,
                                        double val_fraction);

// Builds sample `id` of the run identified by `cfg.seed`.  Throws
// std::runtime_error when no admissible scene is found within 100 attempts.
Sample generate_sample(const GenConfig& cfg, std::uint64_t id);

Dataset generate_dataset(const GenConfig& cfg);

// ---- serialization ---------------------------------------------------------

// Alternating background/foreground run lengths, starting with background.
std::vector<std::int64_t> rle_encode(const std::vector<std::uint8_t>& mask);
std::vector<std::uint8_t> rle_decode(const std::vector<std::int64_t>& runs,
                                     std::size_t pixels);

void write_ppm(const std::filesystem::path& path, int width, int height,
               const std::vector<std::uint8_t>& rgb);
std::vector<std::uint8_t> read_ppm(const std::filesystem::path& path,
                                   int& width, int& height);

// Writes <root>/{train,val,test}/{images/, annotations.jsonl, meta.json}.
void write_dataset(const Dataset& ds, const std::filesystem::path& root);

// Reads one split directory written by write_dataset; the result matches the
// generated samples field for field (annotations carry the scene geometry).
std::vector<Sample> read_split(const std::filesystem::path& split_dir);

}  // namespace refseg::data
