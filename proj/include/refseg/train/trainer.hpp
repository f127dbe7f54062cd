#pragma once
// Training and evaluation drivers.
//
// A RunState owns everything a run needs: parameters, model, distillation
// stage, optimizer, and the named rng streams ("init" for weight draws,
// "shuffle" for epoch ordering, "mask.img"/"mask.txt" inside the branches).
// Checkpoints capture parameters, optimizer state, stream states, the epoch,
// and the full config text, so a reloaded run continues bit-identically.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "refseg/core/adam.hpp"
#include "refseg/core/autograd.hpp"
#include "refseg/core/rng.hpp"
#include "refseg/data/dataset.hpp"
#include "refseg/distill/distill.hpp"
#include "refseg/eval/metrics.hpp"
#include "refseg/model/model.hpp"
#include "refseg/train/run_config.hpp"

namespace refseg::train {

struct RunState {
  RunConfig config;
  core::ParameterSet<float> params;
  std::unique_ptr<model::Segmenter<float>> model;
  std::unique_ptr<distill::DistillStage<float>> stage;
  std::unique_ptr<core::Adam<float>> optimizer;
  core::RunRng rng{0};
  std::uint64_t epoch = 0;

  RunState() = default;
  RunState(const RunState&) = delete;
  RunState& operator=(const RunState&) = delete;
};

// Fresh state: registers and initialises all parameters from the "init"
// stream of the run seed.
std::unique_ptr<RunState> init_run(const RunConfig& cfg);

// Piecewise schedule over 1-based steps: linear warmup to lr_max at step
// `warmup_steps`, then half-cosine decay reaching exactly 0 at `total_steps`.
double lr_schedule(std::size_t step, std::size_t total_steps,
                   std::size_t warmup_steps, double lr_max);

// Model inputs from a dataset sample: [0,1]-normalized patch rows / the
// {0,1} float mask.
std::vector<float> sample_patches(const data::Sample& s,
                                  const model::ModelConfig& cfg);
std::vector<float> sample_gt(const data::Sample& s);

// Inference over a sample list: main branch only, binarize at 0.35, IoU per
// sample.  Never constructs mask plans or branch forwards.
eval::EvalReport evaluate_samples(const RunState& st,
                                  std::span<const data::Sample> samples);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based, the epoch that just finished
  double train_loss = 0.0;
  eval::EvalReport val;
};

// Advances training to `until_epoch` (epochs are [st.epoch, until_epoch)),
// appending one row per epoch to <out_dir>/metrics.csv and recording the
// per-epoch reports.  Aborts with a diagnostic dump on a non-finite loss.
void run_training_epochs(RunState& st, const data::Dataset& ds,
                         const std::filesystem::path& out_dir,
                         std::size_t until_epoch,
                         std::vector<EpochRecord>* records = nullptr,
                         bool verbose = false);

struct TrainOutcome {
  std::filesystem::path checkpoint;
  std::vector<EpochRecord> epochs;
};

// Full run into cfg.output_dir unless `out_dir` overrides it: generate the
// dataset, train cfg.optimizer.epochs epochs, write metrics.csv and
// checkpoint.bin.
TrainOutcome train_run(const RunConfig& cfg,
                       const std::filesystem::path& out_dir = {},
                       bool verbose = false);

// Same run on a caller-provided dataset (its generation settings must match
// cfg); lets grid drivers share one dataset across cells.
TrainOutcome train_run(const RunConfig& cfg, const data::Dataset& ds,
                       const std::filesystem::path& out_dir,
                       bool verbose = false);

// ---- checkpoints -----------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const RunState& st);

// Rebuilds the run from the embedded config, then restores parameter values,
// optimizer state, rng streams, and the epoch.  Throws when the file does not
// match the model its config builds.
std::unique_ptr<RunState> load_checkpoint(const std::filesystem::path& path);

}  // namespace refseg::train
