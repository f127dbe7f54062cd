#include "refseg/train/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numbers>
#include <stdexcept>

#include <json.hpp>

namespace refseg::train {

using core::Rng;
using core::Tape;
using core::Tensor;

std::unique_ptr<RunState> init_run(const RunConfig& cfg) {
  cfg.validate();
  auto st = std::make_unique<RunState>();
  st->config = cfg;
  st->rng = core::RunRng(cfg.seed);
  Rng& init = st->rng.stream("init");
  st->model = std::make_unique<model::Segmenter<float>>(cfg.model, st->params,
                                                        init);
  st->stage = std::make_unique<distill::DistillStage<float>>(
      cfg.distill, *st->model, st->params, init);
  core::AdamConfig<float> acfg;
  acfg.lr = float(cfg.optimizer.lr);
  acfg.weight_decay = float(cfg.optimizer.weight_decay);
  st->optimizer = std::make_unique<core::Adam<float>>(st->params, acfg);
  return st;
}

double lr_schedule(std::size_t step, std::size_t total_steps,
                   std::size_t warmup_steps, double lr_max) {
  if (step == 0 || step > total_steps)
    throw std::invalid_argument("lr_schedule: step must lie in [1, total]");
  if (warmup_steps > total_steps)
    throw std::invalid_argument("lr_schedule: warmup cannot exceed the run");
  if (step <= warmup_steps)
    return lr_max * double(step) / double(warmup_steps);
  const double progress =
      double(step - warmup_steps) / double(total_steps - warmup_steps);
  return lr_max * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::vector<float> sample_patches(const data::Sample& s,
                                  const model::ModelConfig& cfg) {
  std::vector<float> image(s.image.size());
  for (std::size_t i = 0; i < image.size(); ++i)
    image[i] = float(s.image[i]) / 255.0f;
  return model::patchify<float>(image, cfg);
}

std::vector<float> sample_gt(const data::Sample& s) {
  std::vector<float> gt(s.gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) gt[i] = float(s.gt[i]);
  return gt;
}

eval::EvalReport evaluate_samples(const RunState& st,
                                  std::span<const data::Sample> samples) {
  const auto& mcfg = st.config.model;
  std::vector<double> ious;
  ious.reserve(samples.size());
  for (const data::Sample& s : samples) {
    Tape<float> t(/*grads=*/false);
    const auto patches = sample_patches(s, mcfg);
    const auto out = st.model->forward(t, patches, s.tokens, s.valid_len);
    const auto res = std::size_t(st.config.dataset.resolution);
    const auto pred =
        eval::binarize<float>(out.probs.value(), mcfg.image_size, res);
    ious.push_back(eval::iou(pred, s.gt));
  }
  return eval::make_report(std::move(ious));
}

namespace {

void append_metrics_row(const std::filesystem::path& csv,
                        std::size_t epoch, const eval::EvalReport& report) {
  const bool fresh = !std::filesystem::exists(csv);
  std::ofstream out(csv, std::ios::app);
  if (!out)
    throw std::runtime_error("trainer: cannot open " + csv.string());
  if (fresh) out << "epoch," << eval::csv_header() << '\n';
  out << epoch << ',' << eval::csv_row(report, "val") << '\n';
}

[[noreturn]] void abort_on_bad_loss(const std::filesystem::path& out_dir,
                                    std::size_t epoch, std::size_t step,
                                    double lr,
                                    const std::vector<std::uint64_t>& ids,
                                    const std::vector<double>& losses) {
  // losses go out as strings so "inf"/"nan" survive JSON serialization
  std::vector<std::string> loss_strs;
  for (double l : losses) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%g", l);
    loss_strs.emplace_back(buf);
  }
  nlohmann::json dump{{"epoch", epoch},
                      {"step", step},
                      {"lr", lr},
                      {"batch_sample_ids", ids},
                      {"batch_losses", loss_strs}};
  const auto path = out_dir / "nan_dump.json";
  std::ofstream out(path);
  if (out) out << dump.dump(2) << '\n';
  throw std::runtime_error(
      "trainer: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
      std::to_string(step) + "; last batch dumped to " + path.string());
}

}  // namespace

void run_training_epochs(RunState& st, const data::Dataset& ds,
                         const std::filesystem::path& out_dir,
                         std::size_t until_epoch,
                         std::vector<EpochRecord>* records, bool verbose) {
  const RunConfig& cfg = st.config;
  if (until_epoch > cfg.optimizer.epochs)
    throw std::invalid_argument("trainer: until_epoch exceeds configured epochs");
  std::filesystem::create_directories(out_dir);
  const std::size_t train_n = ds.train.size();
  if (train_n == 0) throw std::invalid_argument("trainer: empty train split");
  const std::size_t batch = cfg.optimizer.batch_size;
  const std::size_t steps_per_epoch = (train_n + batch - 1) / batch;
  const std::size_t total_steps = cfg.optimizer.epochs * steps_per_epoch;
  const std::size_t warmup_steps =
      cfg.warmup_epochs_resolved() * steps_per_epoch;
  const auto& mcfg = cfg.model;

  Rng& shuffle_rng = st.rng.stream("shuffle");
  std::vector<std::size_t> order(train_n);

  while (st.epoch < until_epoch) {
    const std::size_t epoch = st.epoch;
    for (std::size_t i = 0; i < train_n; ++i) order[i] = i;
    for (std::size_t i = train_n - 1; i > 0; --i)
      std::swap(order[i], order[shuffle_rng.bounded(i + 1)]);

    double epoch_loss = 0.0;
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      const std::size_t begin = step * batch;
      const std::size_t end = std::min(begin + batch, train_n);
      const auto global_step = epoch * steps_per_epoch + step + 1;  // 1-based
      const double lr =
          lr_schedule(global_step, total_steps, warmup_steps, cfg.optimizer.lr);

      st.params.zero_grad();
      double batch_loss = 0.0;
      std::vector<std::uint64_t> batch_ids;
      std::vector<double> batch_losses;
      for (std::size_t i = begin; i < end; ++i) {
        const data::Sample& s = ds.train[order[i]];
        Tape<float> t;
        const auto patches = sample_patches(s, mcfg);
        const auto main = st.model->forward(t, patches, s.tokens, s.valid_len);
        auto gt =
            t.input(sample_gt(s), mcfg.image_size, mcfg.image_size);
        // distillation targets are the model's own predictions: worthless at
        // init, trustworthy later.  Ramp the branch weights over the first
        // half of the run so the branches only press once the teacher is real.
        const double branch_scale =
            std::min(1.0, double(global_step) /
                              std::max(1.0, 0.5 * double(total_steps)));
        const auto out =
            st.stage->training_loss(t, main, patches, s.tokens, s.maskable, gt,
                                    st.rng, branch_scale);
        const double loss = double(out.total.value()[0]);
        batch_ids.push_back(s.id);
        batch_losses.push_back(loss);
        if (!std::isfinite(loss))
          abort_on_bad_loss(out_dir, epoch, global_step, lr, batch_ids,
                            batch_losses);
        // mean over the batch: scale each sample's contribution on the tape
        t.backward(t.scale(out.total, 1.0f / float(end - begin)));
        batch_loss += loss;
      }
      st.optimizer->step(st.params, float(lr));
      epoch_loss += batch_loss / double(end - begin);
    }
    epoch_loss /= double(steps_per_epoch);

    ++st.epoch;
    const eval::EvalReport val = evaluate_samples(st, ds.val);
    append_metrics_row(out_dir / "metrics.csv", st.epoch, val);
    if (records)
      records->push_back(EpochRecord{std::size_t(st.epoch), epoch_loss, val});
    if (verbose)
      std::printf("epoch %3zu/%zu  train_loss %.5f  val_miou %.4f\n",
                  std::size_t(st.epoch), cfg.optimizer.epochs, epoch_loss,
                  val.miou);
  }
}

TrainOutcome train_run(const RunConfig& cfg,
                       const std::filesystem::path& out_dir, bool verbose) {
  cfg.validate();
  return train_run(cfg, data::generate_dataset(cfg.gen_config()), out_dir,
                   verbose);
}

TrainOutcome train_run(const RunConfig& cfg, const data::Dataset& ds,
                       const std::filesystem::path& out_dir, bool verbose) {
  cfg.validate();
  const data::GenConfig want = cfg.gen_config();
  if (ds.config.n != want.n || ds.config.seed != want.seed ||
      ds.config.resolution != want.resolution ||
      ds.config.max_text_len != want.max_text_len)
    throw std::invalid_argument("train_run: dataset does not match the config");
  const std::filesystem::path out =
      out_dir.empty() ? std::filesystem::path(cfg.output_dir) : out_dir;
  std::filesystem::create_directories(out);
  std::filesystem::remove(out / "metrics.csv");  // this is a fresh run
  auto st = init_run(cfg);

  TrainOutcome outcome;
  if (cfg.optimizer.epochs == 0) {
    // still emit the metrics header so downstream tooling finds the file
    std::ofstream csv(out / "metrics.csv");
    csv << "epoch," << eval::csv_header() << '\n';
  } else {
    run_training_epochs(*st, ds, out, cfg.optimizer.epochs, &outcome.epochs,
                        verbose);
  }
  outcome.checkpoint = out / "checkpoint.bin";
  save_checkpoint(outcome.checkpoint, *st);
  return outcome;
}

}  // namespace refseg::train
