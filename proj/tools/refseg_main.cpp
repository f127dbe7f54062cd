// Command-line entry point: dataset generation, training, evaluation, and
// ablation grids over the referring-expression segmentation models.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>

#if defined(__GLIBC__) || defined(__linux__)
#include <malloc.h>
#endif

#include <CLI11.hpp>

#include "refseg/data/dataset.hpp"
#include "refseg/eval/metrics.hpp"
#include "refseg/train/ablation.hpp"
#include "refseg/train/trainer.hpp"

namespace {

int cmd_gen_data(std::size_t n, std::uint64_t seed, const std::string& out,
                 int resolution) {
  refseg::data::GenConfig cfg;
  cfg.n = n;
  cfg.seed = seed;
  cfg.resolution = resolution;
  cfg.validate();
  const refseg::data::Dataset ds = refseg::data::generate_dataset(cfg);
  refseg::data::write_dataset(ds, out);
  std::printf("wrote %zu train / %zu val / %zu test samples to %s\n",
              ds.train.size(), ds.val.size(), ds.test.size(), out.c_str());
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out) {
  const refseg::train::RunConfig cfg =
      refseg::train::parse_run_config_file(config_path);
  const auto outcome = refseg::train::train_run(cfg, out, /*verbose=*/true);
  std::printf("checkpoint: %s\n", outcome.checkpoint.string().c_str());
  if (!outcome.epochs.empty())
    std::printf("final val mIoU: %.4f\n", outcome.epochs.back().val.miou);
  return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& split) {
  const auto st = refseg::train::load_checkpoint(checkpoint_path);
  const refseg::data::Dataset ds =
      refseg::data::generate_dataset(st->config.gen_config());
  const std::vector<refseg::data::Sample>* samples = nullptr;
  if (split == "train") samples = &ds.train;
  else if (split == "val") samples = &ds.val;
  else if (split == "test") samples = &ds.test;
  else throw std::runtime_error("unknown split '" + split + "'");
  if (samples->empty())
    throw std::runtime_error("split '" + split + "' is empty");
  const auto report = refseg::train::evaluate_samples(*st, *samples);
  std::printf("%s\n", refseg::eval::csv_header().c_str());
  std::printf("%s\n", refseg::eval::csv_row(report, split).c_str());
  return 0;
}

int cmd_ablate(const std::string& grid_path, const std::string& out,
               std::size_t parallel) {
  const auto grid = refseg::train::parse_grid_file(grid_path);
  const auto res =
      refseg::train::run_ablation(grid, out, parallel, /*verbose=*/true);
  std::printf("wrote %zu cells to %s\n", res.cells.size(), out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__) && defined(M_MMAP_THRESHOLD)
  // the per-step tape allocates and frees large blocks; without this glibc
  // serves them via mmap/munmap and the kernel churn dominates training time
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"referring-expression segmentation workbench"};
  app.require_subcommand(1);

  std::size_t n = 1000;
  std::uint64_t seed = 0;
  int resolution = 64;
  std::string out_dir, config_path, checkpoint_path, split, grid_path;
  std::size_t parallel = 1;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--n", n, "number of samples")->required();
  gen->add_option("--seed", seed, "generation seed")->required();
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--resolution", resolution, "image edge in pixels")
      ->capture_default_str();

  auto* train = app.add_subcommand("train", "train one run from a config file");
  train->add_option("--config", config_path, "run config file")->required();
  train->add_option("--out", out_dir,
                    "output directory (defaults to the config's output_dir)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")
      ->required();
  eval->add_option("--split", split, "train, val, or test")->required();

  auto* ablate = app.add_subcommand("ablate", "run an ablation grid");
  ablate->add_option("--grid", grid_path, "grid spec file")->required();
  ablate->add_option("--out", out_dir, "output directory")->required();
  ablate->add_option("--parallel", parallel, "cells trained concurrently")
      ->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(n, seed, out_dir, resolution);
    if (train->parsed()) return cmd_train(config_path, out_dir);
    if (eval->parsed()) return cmd_eval(checkpoint_path, split);
    if (ablate->parsed()) return cmd_ablate(grid_path, out_dir, parallel);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
