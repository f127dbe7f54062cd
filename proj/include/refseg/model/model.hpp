#pragma once
// Dual-encoder referring-segmentation backbone.
//
// An image transformer and a text transformer each produce per-token local
// features plus one pooled global feature.  A gated neck conditions the
// visual tokens on the global text feature, and a transformer decoder with
// text cross-attention turns the fused tokens into a per-pixel probability
// mask at input resolution.
//
// Embedding and encoding are split on purpose: `embed` produces the
// content-only token rows, `encode_from` adds position embeddings and runs
// the transformer stack.  The distillation stage replaces rows of the
// embedded sequence with its mask token and re-encodes through the same
// (shared) stack; because positions join afterwards, a masked row still
// carries where it sits, only what it contained is hidden.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "refseg/core/autograd.hpp"
#include "refseg/core/rng.hpp"
#include "refseg/model/config.hpp"

namespace refseg::model {

template <typename T>
struct NormParams {
  core::Parameter<T>* gamma = nullptr;
  core::Parameter<T>* beta = nullptr;
};

// Multi-head attention projections.  The key projection carries no bias: a
// key bias shifts every attention logit of a query row by the same amount,
// which softmax cancels exactly, so the parameter would never receive
// gradient.
template <typename T>
struct AttnParams {
  core::Parameter<T>* wq = nullptr;
  core::Parameter<T>* bq = nullptr;
  core::Parameter<T>* wk = nullptr;
  core::Parameter<T>* wv = nullptr;
  core::Parameter<T>* bv = nullptr;
  core::Parameter<T>* wo = nullptr;
  core::Parameter<T>* bo = nullptr;
};

// Pre-norm transformer block: x += attn(norm1(x)); x += ffn(norm2(x)).
template <typename T>
struct BlockParams {
  NormParams<T> norm1;
  AttnParams<T> attn;
  NormParams<T> norm2;
  core::Parameter<T>* ffn_w1 = nullptr;
  core::Parameter<T>* ffn_b1 = nullptr;
  core::Parameter<T>* ffn_w2 = nullptr;
  core::Parameter<T>* ffn_b2 = nullptr;
};

// Decoder block: self-attention, then cross-attention over the text tokens,
// then the feed-forward, each pre-normed with its own affine.
template <typename T>
struct CrossBlockParams {
  NormParams<T> norm1;
  AttnParams<T> attn;
  NormParams<T> norm_cross;
  AttnParams<T> cross;
  NormParams<T> norm2;
  core::Parameter<T>* ffn_w1 = nullptr;
  core::Parameter<T>* ffn_b1 = nullptr;
  core::Parameter<T>* ffn_w2 = nullptr;
  core::Parameter<T>* ffn_b2 = nullptr;
};

template <typename T>
struct ImageEncoding {
  core::Tensor<T> local;   // [num_patches, channels] patch tokens
  core::Tensor<T> global;  // [1, channels] class-token readout
};

template <typename T>
struct TextEncoding {
  core::Tensor<T> local;   // [len, channels] word tokens incl. markers/padding
  core::Tensor<T> global;  // [1, channels] projected end-token readout
};

// ---- image side -----------------------------------------------------------

template <typename T>
class ImageEncoder {
 public:
  ImageEncoder(const ModelConfig& cfg, core::ParameterSet<T>& params,
               core::Rng& init, const std::string& prefix);

  // flat [num_patches, patch_dim] patch matrix -> projected content rows,
  // [num_patches, channels]; no positions yet
  core::Tensor<T> embed(core::Tape<T>& t, std::span<const T> patches) const;

  // adds position embeddings and runs the transformer stack; the class token
  // is prepended internally
  ImageEncoding<T> encode_from(core::Tape<T>& t, core::Tensor<T> content) const;

  ImageEncoding<T> encode(core::Tape<T>& t, std::span<const T> patches) const {
    return encode_from(t, embed(t, patches));
  }

 private:
  ModelConfig cfg_;
  core::Parameter<T>* patch_w_;
  core::Parameter<T>* patch_b_;
  core::Parameter<T>* cls_;
  core::Parameter<T>* pos_;  // [num_patches, channels]
  std::vector<BlockParams<T>> blocks_;
};

// ---- text side ------------------------------------------------------------

template <typename T>
class TextEncoder {
 public:
  TextEncoder(const ModelConfig& cfg, core::ParameterSet<T>& params,
              core::Rng& init, const std::string& prefix);

  // token ids -> content rows from the embedding table, [len, channels];
  // no positions yet
  core::Tensor<T> embed(core::Tape<T>& t,
                        std::span<const std::int32_t> ids) const;

  // Adds position embeddings, runs the stack with positions >= valid_len
  // masked out of every attention, then pools the last valid row through a
  // learned projection.
  TextEncoding<T> encode_from(core::Tape<T>& t, core::Tensor<T> content,
                              std::size_t valid_len) const;

  TextEncoding<T> encode(core::Tape<T>& t, std::span<const std::int32_t> ids,
                         std::size_t valid_len) const {
    return encode_from(t, embed(t, ids), valid_len);
  }

 private:
  ModelConfig cfg_;
  core::Parameter<T>* table_;  // [vocab_size, channels]
  core::Parameter<T>* pos_;    // [max_text_len, channels]
  core::Parameter<T>* proj_w_;
  core::Parameter<T>* proj_b_;
  std::vector<BlockParams<T>> blocks_;
};

// ---- fusion neck ----------------------------------------------------------

template <typename T>
class FusionNeck {
 public:
  FusionNeck(const ModelConfig& cfg, core::ParameterSet<T>& params,
             core::Rng& init, const std::string& prefix);

  // Conditions every visual token on the text: h_i = v_i * gate(text) +
  // shift(text), then h + MLP(h).  The gate bias starts at one so the block is
  // an identity at init; the multiplicative path lets a linear map express
  // "token agrees with the expression", which an additive merge cannot.
  core::Tensor<T> fuse(core::Tape<T>& t, core::Tensor<T> visual_local,
                       core::Tensor<T> text_global) const;

 private:
  ModelConfig cfg_;
  core::Parameter<T>* gate_w_;
  core::Parameter<T>* gate_b_;
  core::Parameter<T>* shift_w_;
  core::Parameter<T>* shift_b_;
  core::Parameter<T>* fc1_w_;
  core::Parameter<T>* fc1_b_;
  core::Parameter<T>* fc2_w_;
  core::Parameter<T>* fc2_b_;
};

// ---- mask decoder ---------------------------------------------------------

template <typename T>
class MaskDecoder {
 public:
  MaskDecoder(const ModelConfig& cfg, core::ParameterSet<T>& params,
              core::Rng& init, const std::string& prefix);

  // fused [num_patches, channels] tokens and text tokens [len, channels]
  // (key positions >= valid_len masked) -> probability map
  // [image_size, image_size].  Each token predicts the patch_size^2 pixel
  // logits of its own patch, so the map is full-resolution.
  core::Tensor<T> decode(core::Tape<T>& t, core::Tensor<T> fused,
                         core::Tensor<T> words, std::size_t valid_len) const;

 private:
  ModelConfig cfg_;
  std::vector<CrossBlockParams<T>> blocks_;
  core::Parameter<T>* head_w_;  // [channels, patch_size^2]
  core::Parameter<T>* head_b_;
  std::vector<std::int32_t> detile_;  // per-patch rows -> image pixel order
};

// ---- full backbone --------------------------------------------------------

template <typename T>
struct SegmenterOutputs {
  core::Tensor<T> image_embed;  // [num_patches, channels], content only
  ImageEncoding<T> image;
  core::Tensor<T> text_embed;   // [len, channels], content only
  TextEncoding<T> text;
  core::Tensor<T> fused;        // [num_patches, channels]
  core::Tensor<T> probs;        // [image_size, image_size]
  std::size_t valid_len = 0;
};

template <typename T>
class Segmenter {
 public:
  // Registers all parameters under `prefix` and initialises them from `init`
  // (truncated normal for weights/embeddings: sigma=0.02, positions 0.1;
  // zeros for biases, ones for norm gains and the fusion gate bias, the
  // foreground-prior logit for the pixel head bias).  Registration order is
  // fixed and defines both the init draw order and the checkpoint layout.
  Segmenter(const ModelConfig& cfg, core::ParameterSet<T>& params,
            core::Rng& init, const std::string& prefix = "");

  SegmenterOutputs<T> forward(core::Tape<T>& t, std::span<const T> patches,
                              std::span<const std::int32_t> ids,
                              std::size_t valid_len) const;

  const ModelConfig& config() const { return cfg_; }
  const ImageEncoder<T>& image_encoder() const { return image_enc_; }
  const TextEncoder<T>& text_encoder() const { return text_enc_; }
  const FusionNeck<T>& neck() const { return neck_; }
  const MaskDecoder<T>& decoder() const { return decoder_; }

 private:
  ModelConfig cfg_;
  ImageEncoder<T> image_enc_;
  TextEncoder<T> text_enc_;
  FusionNeck<T> neck_;
  MaskDecoder<T> decoder_;
};

// ---- helpers --------------------------------------------------------------

// Interleaved RGB image ([y][x][rgb], values in [0,1], image_size square) ->
// row-major [num_patches, patch_dim] patch matrix.
template <typename T>
std::vector<T> patchify(std::span<const T> image, const ModelConfig& cfg);

template <typename T>
void init_trunc_normal(core::Parameter<T>& p, core::Rng& rng,
                       double sigma = 0.02);
template <typename T>
void init_constant(core::Parameter<T>& p, T v);

}  // namespace refseg::model
