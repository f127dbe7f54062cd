#pragma once
// Run configuration: a flat key-value text format with dotted section keys.
// Every key is validated against the fixed schema before any compute; unknown
// or duplicate keys are rejected.  The canonical serialization (fixed key
// order, shortest round-trip numerals) doubles as the checkpoint-embedded
// config and the input of the config hash.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "refseg/data/dataset.hpp"
#include "refseg/distill/distill.hpp"
#include "refseg/model/config.hpp"

namespace refseg::train {

struct OptimizerConfig {
  double lr = 3e-3;
  double weight_decay = 0.0005;
  std::size_t batch_size = 16;
  std::size_t epochs = 30;
  // < 0 selects the default of 10% of epochs (rounded)
  std::int64_t warmup_epochs = -1;
};

struct DatasetConfig {
  std::size_t n = 1000;
  std::uint64_t seed = 0;
  int resolution = 64;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "run";
  model::ModelConfig model;
  distill::DistillConfig distill;
  OptimizerConfig optimizer;
  DatasetConfig dataset;

  std::size_t warmup_epochs_resolved() const;
  data::GenConfig gen_config() const;  // 0.8 / 0.1 / 0.1 splits
  void validate() const;               // throws std::invalid_argument
};

RunConfig parse_run_config(std::istream& in);
RunConfig parse_run_config_file(const std::filesystem::path& path);
RunConfig parse_run_config_text(const std::string& text);

// Canonical text: every key, fixed order, values that re-parse exactly.
std::string serialize_run_config(const RunConfig& cfg);
std::uint64_t config_hash(const RunConfig& cfg);

}  // namespace refseg::train
