#pragma once
// Hyperparameters shared by the encoders, fusion neck and mask decoder.

#include <cstddef>

namespace refseg::model {

struct ModelConfig {
  std::size_t image_size = 64;  // square RGB input, pixels
  std::size_t patch_size = 8;   // square patch edge; image_size % patch_size == 0
  std::size_t channels = 64;    // embedding width shared by every stage
  std::size_t image_depth = 2;
  std::size_t image_heads = 4;
  std::size_t text_depth = 2;
  std::size_t text_heads = 4;
  std::size_t decoder_depth = 3;
  std::size_t decoder_heads = 4;
  std::size_t neck_hidden = 64;
  std::size_t vocab_size = 64;
  std::size_t max_text_len = 12;  // includes the start/end markers

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return 3 * patch_size * patch_size; }

  // throws std::invalid_argument on inconsistent settings
  void validate() const;
};

// Closed-form trainable scalar counts per stage.  `parameter_count` is the
// whole backbone (sum of the four stages).  The distillation stage's two mask
// tokens are not included; they belong to that stage and add 2*channels when
// trainable.
std::size_t image_encoder_parameter_count(const ModelConfig& cfg);
std::size_t text_encoder_parameter_count(const ModelConfig& cfg);
std::size_t neck_parameter_count(const ModelConfig& cfg);
std::size_t decoder_parameter_count(const ModelConfig& cfg);
std::size_t parameter_count(const ModelConfig& cfg);

}  // namespace refseg::model
