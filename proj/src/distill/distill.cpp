#include "refseg/distill/distill.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "refseg/kernels/kernels.hpp"

namespace refseg::distill {

using core::Parameter;
using core::ParameterSet;
using core::Rng;
using core::RunRng;
using core::Tape;
using core::Tensor;

namespace {
// a branch shapes training only when switched on with a nonzero weight
bool contributes(const BranchConfig& b) {
  return b.enabled && b.lambda != 0.0;
}
}  // namespace

void DistillConfig::validate() const {
  auto check = [](const BranchConfig& b, const std::string& name) {
    if (!(b.alpha >= 0.0 && b.alpha <= 1.0))
      throw std::invalid_argument(name + ".alpha must be in [0, 1]");
    if (!(b.topk > 0.0 && b.topk <= 1.0))
      throw std::invalid_argument(name + ".topk must be in (0, 1]");
    if (!(b.lambda >= 0.0) || !std::isfinite(b.lambda))
      throw std::invalid_argument(name + ".lambda must be finite and >= 0");
  };
  check(lmvsd, "lmvsd");
  check(vmlsd, "vmlsd");
}

Instrumentation& instrumentation() {
  static Instrumentation counters;
  return counters;
}

// ==== correlation filtering ================================================

template <typename T>
Correlation<T> correlation_filter(std::span<const T> local, std::size_t rows,
                                  std::size_t cols, std::span<const T> global,
                                  double topk_fraction,
                                  std::span<const std::int32_t> candidates) {
  if (rows == 0)
    throw std::invalid_argument("correlation_filter: no tokens to score");
  if (local.size() != rows * cols)
    throw std::invalid_argument("correlation_filter: local size " +
                                std::to_string(local.size()) + " != " +
                                std::to_string(rows) + " x " + std::to_string(cols));
  if (global.size() != cols)
    throw std::invalid_argument("correlation_filter: global width mismatch");
  if (!(topk_fraction > 0.0 && topk_fraction <= 1.0))
    throw std::invalid_argument("correlation_filter: topk_fraction outside (0, 1]");

  const auto& K = kern::active<T>();
  Correlation<T> out;
  out.values.resize(rows);
  for (std::size_t i = 0; i < rows; ++i)
    out.values[i] = K.dot(global.data(), local.data() + i * cols, cols);

  std::vector<std::int32_t> cand;
  if (candidates.empty()) {
    cand.resize(rows);
    std::iota(cand.begin(), cand.end(), 0);
  } else {
    cand.assign(candidates.begin(), candidates.end());
    auto sorted = cand;
    std::sort(sorted.begin(), sorted.end());
    if (sorted.front() < 0 || std::size_t(sorted.back()) >= rows)
      throw std::invalid_argument("correlation_filter: candidate index out of range");
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw std::invalid_argument("correlation_filter: duplicate candidate index");
  }

  const std::size_t n = cand.size();
  std::size_t keep =
      std::max<std::size_t>(1, std::size_t(std::llround(topk_fraction * double(n))));
  keep = std::min(keep, n);
  std::sort(cand.begin(), cand.end(), [&](std::int32_t a, std::int32_t b) {
    if (out.values[std::size_t(a)] != out.values[std::size_t(b)])
      return out.values[std::size_t(a)] > out.values[std::size_t(b)];
    return a < b;  // ties: lower index wins
  });
  out.selected.assign(cand.begin(), cand.begin() + std::ptrdiff_t(keep));
  std::sort(out.selected.begin(), out.selected.end());
  return out;
}

// ==== mask planning ========================================================

MaskPlan plan_mask(std::span<const std::int32_t> selected, double alpha,
                   Rng& rng) {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw std::invalid_argument("plan_mask: alpha outside [0, 1]");
  instrumentation().plans_built.fetch_add(1, std::memory_order_relaxed);
  MaskPlan plan;
  plan.alpha = alpha;
  plan.selected.assign(selected.begin(), selected.end());
  const std::size_t t = plan.selected.size();
  const std::size_t m =
      std::min(t, std::size_t(std::floor(alpha * double(t))));
  // partial Fisher-Yates over a scratch copy: first m entries are a uniform
  // sample without replacement
  std::vector<std::int32_t> pool = plan.selected;
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + std::size_t(rng.bounded(t - i));
    std::swap(pool[i], pool[j]);
  }
  plan.masked.assign(pool.begin(), pool.begin() + std::ptrdiff_t(m));
  std::sort(plan.masked.begin(), plan.masked.end());
  return plan;
}

template <typename T>
Tensor<T> apply_mask(Tape<T>& t, Tensor<T> embeddings, const MaskPlan& plan,
                     Parameter<T>& token) {
  if (plan.masked.empty()) return embeddings;
  return t.replace_rows(embeddings, plan.masked, t.param(token));
}

// ==== stage ================================================================

template <typename T>
DistillStage<T>::DistillStage(const DistillConfig& cfg,
                              const model::Segmenter<T>& main_model,
                              ParameterSet<T>& ps, Rng& init)
    : cfg_(cfg), main_(&main_model) {
  cfg_.validate();
  const auto& mcfg = main_model.config();
  // Tokens are always registered and initialised (stable checkpoint layout
  // and init draw order across configurations); only contributing branches
  // may train theirs.
  auto& vt = ps.add("mask.img", 1, mcfg.channels, contributes(cfg_.lmvsd));
  model::init_trunc_normal(vt, init);
  image_token_ = &vt;
  auto& wt = ps.add("mask.txt", 1, mcfg.channels, contributes(cfg_.vmlsd));
  model::init_trunc_normal(wt, init);
  text_token_ = &wt;
  if (!cfg_.share_weights) {
    if (contributes(cfg_.lmvsd)) {
      own_image_enc_.emplace(mcfg, ps, init, "lmvsd.img.");
      own_image_neck_.emplace(mcfg, ps, init, "lmvsd.neck.");
      own_image_dec_.emplace(mcfg, ps, init, "lmvsd.dec.");
    }
    if (contributes(cfg_.vmlsd)) {
      own_text_enc_.emplace(mcfg, ps, init, "vmlsd.txt.");
      own_text_neck_.emplace(mcfg, ps, init, "vmlsd.neck.");
      own_text_dec_.emplace(mcfg, ps, init, "vmlsd.dec.");
    }
  }
}

template <typename T>
Tensor<T> DistillStage<T>::image_branch(Tape<T>& t,
                                        const model::SegmenterOutputs<T>& main,
                                        std::span<const T> patches,
                                        MaskPlan& plan, Rng& mask_rng) const {
  instrumentation().branch_forwards.fetch_add(1, std::memory_order_relaxed);
  const auto& mcfg = main_->config();
  auto corr = correlation_filter<T>(main.image.local.value(), mcfg.num_patches(),
                                    mcfg.channels, main.text.global.value(),
                                    cfg_.lmvsd.topk);
  plan = plan_mask(corr.selected, cfg_.lmvsd.alpha, mask_rng);
  plan.topk = cfg_.lmvsd.topk;
  const model::ImageEncoder<T>& enc =
      own_image_enc_ ? *own_image_enc_ : main_->image_encoder();
  auto content = own_image_enc_ ? enc.embed(t, patches) : main.image_embed;
  auto encoded = enc.encode_from(t, apply_mask(t, content, plan, *image_token_));
  const model::FusionNeck<T>& neck =
      own_image_neck_ ? *own_image_neck_ : main_->neck();
  auto fused = neck.fuse(t, encoded.local, main.text.global);
  const model::MaskDecoder<T>& dec =
      own_image_dec_ ? *own_image_dec_ : main_->decoder();
  return dec.decode(t, fused, main.text.local, main.valid_len);
}

template <typename T>
Tensor<T> DistillStage<T>::text_branch(
    Tape<T>& t, const model::SegmenterOutputs<T>& main,
    std::span<const std::int32_t> ids,
    std::span<const std::int32_t> maskable_positions, MaskPlan& plan,
    Rng& mask_rng) const {
  instrumentation().branch_forwards.fetch_add(1, std::memory_order_relaxed);
  if (maskable_positions.empty())
    throw std::invalid_argument(
        "text_branch: need at least one maskable word position");
  const auto& mcfg = main_->config();
  auto corr = correlation_filter<T>(
      main.text.local.value(), main.text.local.rows(), mcfg.channels,
      main.image.global.value(), cfg_.vmlsd.topk, maskable_positions);
  plan = plan_mask(corr.selected, cfg_.vmlsd.alpha, mask_rng);
  plan.topk = cfg_.vmlsd.topk;
  const model::TextEncoder<T>& enc =
      own_text_enc_ ? *own_text_enc_ : main_->text_encoder();
  auto content = own_text_enc_ ? enc.embed(t, ids) : main.text_embed;
  auto encoded = enc.encode_from(t, apply_mask(t, content, plan, *text_token_),
                                 main.valid_len);
  const model::FusionNeck<T>& neck =
      own_text_neck_ ? *own_text_neck_ : main_->neck();
  // visual tokens stay those of the main branch; only the text side is re-run
  auto fused = neck.fuse(t, main.image.local, encoded.global);
  const model::MaskDecoder<T>& dec =
      own_text_dec_ ? *own_text_dec_ : main_->decoder();
  return dec.decode(t, fused, encoded.local, main.valid_len);
}

template <typename T>
DistillOutputs<T> DistillStage<T>::training_loss(
    Tape<T>& t, const model::SegmenterOutputs<T>& main,
    std::span<const T> patches, std::span<const std::int32_t> ids,
    std::span<const std::int32_t> maskable_text_positions, Tensor<T> gt,
    RunRng& rng, double branch_scale) const {
  if (!(branch_scale >= 0.0 && branch_scale <= 1.0))
    throw std::invalid_argument("training_loss: branch_scale outside [0, 1]");
  DistillOutputs<T> out;
  out.total = t.bce_loss(main.probs, gt);
  out.seg_loss = out.total.value()[0];
  const bool run_image = contributes(cfg_.lmvsd);
  const bool run_text = contributes(cfg_.vmlsd);
  if (!run_image && !run_text) return out;

  Tensor<T> target = cfg_.supervision == Supervision::distillation
                         ? t.detach(main.probs)
                         : gt;
  if (run_image) {
    auto probs = image_branch(t, main, patches, out.lmvsd_plan,
                              rng.stream("mask.img"));
    auto loss = t.bce_loss(probs, target);
    out.lmvsd_loss = loss.value()[0];
    out.lambda1 = T(branch_scale * cfg_.lmvsd.lambda);
    out.total = t.add(out.total, t.scale(loss, out.lambda1));
    out.lmvsd_ran = true;
  }
  if (run_text) {
    auto probs = text_branch(t, main, ids, maskable_text_positions,
                             out.vmlsd_plan, rng.stream("mask.txt"));
    auto loss = t.bce_loss(probs, target);
    out.vmlsd_loss = loss.value()[0];
    out.lambda2 = T(branch_scale * cfg_.vmlsd.lambda);
    out.total = t.add(out.total, t.scale(loss, out.lambda2));
    out.vmlsd_ran = true;
  }
  return out;
}

std::size_t added_parameter_count(const model::ModelConfig& mcfg,
                                  const DistillConfig& cfg) {
  std::size_t total = 0;
  auto add_branch = [&](const BranchConfig& b, std::size_t encoder_params) {
    if (!contributes(b)) return;
    total += mcfg.channels;  // the mask token
    if (!cfg.share_weights)
      total += encoder_params + model::neck_parameter_count(mcfg) +
               model::decoder_parameter_count(mcfg);
  };
  add_branch(cfg.lmvsd, model::image_encoder_parameter_count(mcfg));
  add_branch(cfg.vmlsd, model::text_encoder_parameter_count(mcfg));
  return total;
}

// ==== explicit instantiations ==============================================

#define REFSEG_INSTANTIATE_DISTILL(T)                                         \
  template Correlation<T> correlation_filter<T>(                              \
      std::span<const T>, std::size_t, std::size_t, std::span<const T>,       \
      double, std::span<const std::int32_t>);                                 \
  template Tensor<T> apply_mask<T>(Tape<T>&, Tensor<T>, const MaskPlan&,      \
                                   Parameter<T>&);                            \
  template class DistillStage<T>;

REFSEG_INSTANTIATE_DISTILL(float)
REFSEG_INSTANTIATE_DISTILL(double)

}  // namespace refseg::distill
