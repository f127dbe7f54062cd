#pragma once
// Ablation grids.  A flat text spec names some run-config keys as axes; the
// grid is the Cartesian product of their values (file order, last axis
// fastest).  Every cell is trained `seeds` times with run seed = base seed +
// repeat, over one shared dataset, so cells differ only in the keys under
// study.  The driver writes metrics.csv (one row per cell), grid_meta.json,
// report.svg, and one chart per multi-valued axis.
//
// Grid file syntax ('#' starts a comment):
//   name  = branches
//   seeds = 3
//   base.optimizer.epochs = 10        # any run-config key
//   axis.lmvsd.enabled    = false, true
//   axis.vmlsd.enabled    = false, true

#include <cstdint>
#include <filesystem>
#include <istream>
#include <string>
#include <utility>
#include <vector>

#include "refseg/train/run_config.hpp"

namespace refseg::train {

struct AxisSpec {
  std::string key;                  // run-config key, e.g. "lmvsd.alpha"
  std::vector<std::string> values;  // distinct, config-file syntax
};

struct GridSpec {
  std::string name = "grid";
  std::size_t seeds = 3;  // repeats per cell
  std::vector<std::pair<std::string, std::string>> base;  // config overrides
  std::vector<AxisSpec> axes;

  void validate() const;  // throws std::invalid_argument
};

GridSpec parse_grid(std::istream& in);
GridSpec parse_grid_file(const std::filesystem::path& path);
GridSpec parse_grid_text(const std::string& text);

struct CellResult {
  std::string label;  // "key1=v1,key2=v2" in axis order; "base" for no axes
  std::vector<std::pair<std::string, std::string>> assignments;
  RunConfig config;                // first-repeat config (seed = base seed)
  std::size_t parameter_count = 0;  // trainable scalars, closed form
  std::vector<double> final_miou;   // one entry per finished repeat

  double mean_miou() const;
  double min_miou() const;
  double max_miou() const;
};

struct AblationResult {
  GridSpec grid;
  std::uint64_t base_seed = 0;
  std::vector<CellResult> cells;
};

// Product expansion only: every cell's config is defaults + base overrides +
// axis assignments, run through the config parser, so an incompatible
// combination fails here with the cell named.  No training happens.
std::vector<CellResult> expand_grid(const GridSpec& grid);

// Trains every cell repeat into out_dir/cell<i>_<label>/seed<k>/ and writes
// the grid reports into out_dir.  `parallel` > 1 trains that many cells
// concurrently (cells are independent; each run stays single-threaded).
AblationResult run_ablation(const GridSpec& grid,
                            const std::filesystem::path& out_dir,
                            std::size_t parallel = 1, bool verbose = false);

}  // namespace refseg::train
