#pragma once
// Cross-modality masked self-distillation stage.
//
// Two auxiliary branches share the main model's weights.  Each one scores the
// local tokens of one modality against the other modality's global feature,
// keeps the TopK fraction, replaces a random subset of the kept tokens'
// embeddings with a learnable mask token, re-runs the shared encoder / neck /
// decoder, and is trained to reproduce the main branch's (gradient-stopped)
// segmentation from the partially masked input:
//   - image branch (config prefix `lmvsd`): masks patch embeddings guided by
//     the global text feature;
//   - text branch (config prefix `vmlsd`): masks word embeddings guided by
//     the global image feature.
// The branches exist only at training time; evaluation runs the main model.
//
// With `share_weights=false` each enabled branch instead owns a full copy of
// the stages it re-runs (for the parameter-efficiency ablation).

#include <atomic>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "refseg/core/autograd.hpp"
#include "refseg/core/rng.hpp"
#include "refseg/model/model.hpp"

namespace refseg::distill {

struct BranchConfig {
  bool enabled = false;
  double alpha = 0.0;   // fraction of selected tokens that get masked
  double topk = 1.0;    // fraction of tokens kept by correlation filtering
  double lambda = 0.0;  // weight of this branch's loss term
};

enum class Supervision {
  distillation,  // branch target = gradient-stopped main prediction
  ground_truth,  // branch target = dataset mask (ablation only)
};

struct DistillConfig {
  BranchConfig lmvsd{false, 0.25, 0.5, 0.75};
  BranchConfig vmlsd{false, 0.5, 0.5, 0.1};
  Supervision supervision = Supervision::distillation;
  bool share_weights = true;

  void validate() const;  // throws std::invalid_argument
};

// ---- correlation filtering and mask planning ------------------------------

template <typename T>
struct Correlation {
  std::vector<T> values;               // dot(global, local row i) for every row
  std::vector<std::int32_t> selected;  // kept indices, ascending
};

// Scores every row of `local` ([rows x cols]) against `global` ([cols]) and
// keeps the T = max(1, round(topk_fraction * n)) highest-scoring indices,
// ties broken by lower index.  When `candidates` is non-empty, both n and the
// selection are restricted to those indices (used to shield special text
// positions).  Throws when there is nothing to select from.
template <typename T>
Correlation<T> correlation_filter(std::span<const T> local, std::size_t rows,
                                  std::size_t cols, std::span<const T> global,
                                  double topk_fraction,
                                  std::span<const std::int32_t> candidates = {});

struct MaskPlan {
  std::vector<std::int32_t> selected;  // ascending
  std::vector<std::int32_t> masked;    // ascending subset, floor(alpha * |selected|)
  double topk = 0.0;
  double alpha = 0.0;
};

// Uniformly samples floor(alpha * |selected|) of the selected indices
// without replacement.
MaskPlan plan_mask(std::span<const std::int32_t> selected, double alpha,
                   core::Rng& rng);

// Replaces the planned rows of an embedded sequence with the (broadcast)
// learnable token; an empty plan returns the input unchanged.
template <typename T>
core::Tensor<T> apply_mask(core::Tape<T>& t, core::Tensor<T> embeddings,
                           const MaskPlan& plan, core::Parameter<T>& token);

// ---- loss ------------------------------------------------------------------

template <typename T>
struct DistillOutputs {
  core::Tensor<T> total;  // scalar loss on the tape
  T seg_loss = T(0);
  T lmvsd_loss = T(0);  // 0 when the branch did not run
  T vmlsd_loss = T(0);
  // Effective branch weights applied this call (configured lambda scaled by
  // `branch_scale`): total == seg_loss + lambda1*lmvsd_loss + lambda2*vmlsd_loss
  // up to floating rounding, at every point of the ramp.
  T lambda1 = T(0);
  T lambda2 = T(0);
  MaskPlan lmvsd_plan;
  MaskPlan vmlsd_plan;
  bool lmvsd_ran = false;
  bool vmlsd_ran = false;
};

// ---- stage -----------------------------------------------------------------

template <typename T>
class DistillStage {
 public:
  // Registers the two mask tokens (always, for a stable checkpoint layout;
  // trainable only when their branch contributes to the loss) and, when
  // weights are not shared, per-branch copies of the re-run stages under
  // `lmvsd.` / `vmlsd.` prefixes.
  DistillStage(const DistillConfig& cfg, const model::Segmenter<T>& main_model,
               core::ParameterSet<T>& params, core::Rng& init);

  // Composes  seg_loss + scale*lambda1 * branch1 + scale*lambda2 * branch2
  // on the tape.  Branches with lambda == 0 or enabled == false are skipped
  // outright, so a disabled configuration is bit-identical to the plain
  // baseline.  `branch_scale` lets the trainer ramp the distillation
  // pressure in over the run: the targets are self-generated, so at early
  // steps they are noise and chasing them at full weight measurably slows
  // the main task.  `maskable_text_positions` lists the word positions
  // eligible for text masking (special tokens and padding must already be
  // excluded).  `gt` is the [image_size x image_size] ground-truth mask on
  // the same tape.  Mask randomness is drawn from the run's `mask.img` /
  // `mask.txt` streams, one per branch, so enabling one branch never shifts
  // the other's draws.
  DistillOutputs<T> training_loss(
      core::Tape<T>& t, const model::SegmenterOutputs<T>& main,
      std::span<const T> patches, std::span<const std::int32_t> ids,
      std::span<const std::int32_t> maskable_text_positions,
      core::Tensor<T> gt, core::RunRng& rng, double branch_scale = 1.0) const;

  // Single masked branch forwards (exposed for tests and inspection).
  core::Tensor<T> image_branch(core::Tape<T>& t,
                               const model::SegmenterOutputs<T>& main,
                               std::span<const T> patches, MaskPlan& plan,
                               core::Rng& mask_rng) const;
  core::Tensor<T> text_branch(core::Tape<T>& t,
                              const model::SegmenterOutputs<T>& main,
                              std::span<const std::int32_t> ids,
                              std::span<const std::int32_t> maskable_positions,
                              MaskPlan& plan, core::Rng& mask_rng) const;

  const DistillConfig& config() const { return cfg_; }
  core::Parameter<T>& image_token() const { return *image_token_; }
  core::Parameter<T>& text_token() const { return *text_token_; }

 private:
  DistillConfig cfg_;
  const model::Segmenter<T>* main_;
  core::Parameter<T>* image_token_;
  core::Parameter<T>* text_token_;
  // populated only when share_weights is false and the branch is enabled
  std::optional<model::ImageEncoder<T>> own_image_enc_;
  std::optional<model::FusionNeck<T>> own_image_neck_;
  std::optional<model::MaskDecoder<T>> own_image_dec_;
  std::optional<model::TextEncoder<T>> own_text_enc_;
  std::optional<model::FusionNeck<T>> own_text_neck_;
  std::optional<model::MaskDecoder<T>> own_text_dec_;
};

// Trainable scalars this stage adds on top of the backbone for a given
// config (mask tokens plus any unshared stage copies), as a closed form.
std::size_t added_parameter_count(const model::ModelConfig& mcfg,
                                  const DistillConfig& cfg);

// ---- instrumentation -------------------------------------------------------

// Process-wide counters used to assert that evaluation never triggers the
// masking machinery.
struct Instrumentation {
  std::atomic<std::uint64_t> plans_built{0};
  std::atomic<std::uint64_t> branch_forwards{0};
};
Instrumentation& instrumentation();

}  // namespace refseg::distill
