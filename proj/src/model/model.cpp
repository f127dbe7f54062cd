#include "refseg/model/model.hpp"

#include <cmath>
#include <stdexcept>

namespace refseg::model {

using core::Parameter;
using core::ParameterSet;
using core::Rng;
using core::Tape;
using core::Tensor;

// ==== config ================================================================

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("ModelConfig: " + msg); };
  if (image_size == 0 || patch_size == 0) fail("image_size and patch_size must be positive");
  if (image_size % patch_size != 0) fail("image_size must be divisible by patch_size");
  if (channels == 0) fail("channels must be positive");
  if (image_heads == 0 || text_heads == 0 || decoder_heads == 0) fail("head counts must be positive");
  if (channels % image_heads != 0 || channels % text_heads != 0 ||
      channels % decoder_heads != 0)
    fail("every head count must divide channels");
  if (neck_hidden == 0) fail("neck_hidden must be positive");
  if (vocab_size < 3) fail("vocab_size must cover at least the special tokens");
  if (max_text_len < 2) fail("max_text_len must allow start and end markers");
}

namespace {
// pre-norm block: two norms, attention without key bias, 4x-wide feed-forward
std::size_t block_param_count(std::size_t c) {
  return 12 * c * c + 12 * c;
}
// adds cross-attention and its pre-norm
std::size_t cross_block_param_count(std::size_t c) {
  return block_param_count(c) + 4 * c * c + 5 * c;
}
}  // namespace

std::size_t image_encoder_parameter_count(const ModelConfig& cfg) {
  const std::size_t c = cfg.channels;
  return cfg.patch_dim() * c + c  // patch projection
         + c                      // class token
         + cfg.num_patches() * c  // positions
         + cfg.image_depth * block_param_count(c);
}

std::size_t text_encoder_parameter_count(const ModelConfig& cfg) {
  const std::size_t c = cfg.channels;
  return cfg.vocab_size * c + cfg.max_text_len * c +
         cfg.text_depth * block_param_count(c) + c * c + c;  // pooling projection
}

std::size_t neck_parameter_count(const ModelConfig& cfg) {
  // text-conditioned gate + shift projections, then the residual MLP
  const std::size_t c = cfg.channels, h = cfg.neck_hidden;
  return 2 * (c * c + c) + (c * h + h) + (h * c + c);
}

std::size_t decoder_parameter_count(const ModelConfig& cfg) {
  const std::size_t c = cfg.channels, p2 = cfg.patch_size * cfg.patch_size;
  // per-patch pixel head: [channels, p^2] weight + [p^2] bias
  return cfg.decoder_depth * cross_block_param_count(c) + (c + 1) * p2;
}

std::size_t parameter_count(const ModelConfig& cfg) {
  return image_encoder_parameter_count(cfg) + text_encoder_parameter_count(cfg) +
         neck_parameter_count(cfg) + decoder_parameter_count(cfg);
}

// ==== init and registration helpers ========================================

template <typename T>
void init_trunc_normal(Parameter<T>& p, Rng& rng, double sigma) {
  for (auto& v : p.value) v = T(rng.trunc_normal(sigma));
}

template <typename T>
void init_constant(Parameter<T>& p, T v) {
  for (auto& x : p.value) x = v;
}

namespace {

template <typename T>
Parameter<T>* add_weight(ParameterSet<T>& ps, const std::string& name,
                         std::size_t rows, std::size_t cols, Rng& rng,
                         double sigma = 0.02) {
  auto& p = ps.add(name, rows, cols);
  init_trunc_normal(p, rng, sigma);
  return &p;
}

template <typename T>
Parameter<T>* add_bias(ParameterSet<T>& ps, const std::string& name,
                       std::size_t cols) {
  auto& p = ps.add(name, 1, cols);
  init_constant(p, T(0));
  return &p;
}

template <typename T>
NormParams<T> add_norm(ParameterSet<T>& ps, const std::string& prefix,
                       std::size_t c) {
  NormParams<T> n;
  auto& g = ps.add(prefix + ".g", 1, c);
  init_constant(g, T(1));
  n.gamma = &g;
  n.beta = add_bias(ps, prefix + ".b", c);
  return n;
}

template <typename T>
AttnParams<T> add_attn(ParameterSet<T>& ps, const std::string& prefix,
                       std::size_t c, Rng& rng) {
  AttnParams<T> a;
  a.wq = add_weight(ps, prefix + ".wq", c, c, rng);
  a.bq = add_bias<T>(ps, prefix + ".bq", c);
  a.wk = add_weight(ps, prefix + ".wk", c, c, rng);
  a.wv = add_weight(ps, prefix + ".wv", c, c, rng);
  a.bv = add_bias<T>(ps, prefix + ".bv", c);
  a.wo = add_weight(ps, prefix + ".wo", c, c, rng);
  a.bo = add_bias<T>(ps, prefix + ".bo", c);
  return a;
}

template <typename T>
BlockParams<T> add_block(ParameterSet<T>& ps, const std::string& prefix,
                         std::size_t c, Rng& rng) {
  BlockParams<T> b;
  b.norm1 = add_norm<T>(ps, prefix + ".norm1", c);
  b.attn = add_attn<T>(ps, prefix + ".attn", c, rng);
  b.norm2 = add_norm<T>(ps, prefix + ".norm2", c);
  b.ffn_w1 = add_weight(ps, prefix + ".ffn.w1", c, 4 * c, rng);
  b.ffn_b1 = add_bias<T>(ps, prefix + ".ffn.b1", 4 * c);
  b.ffn_w2 = add_weight(ps, prefix + ".ffn.w2", 4 * c, c, rng);
  b.ffn_b2 = add_bias<T>(ps, prefix + ".ffn.b2", c);
  return b;
}

template <typename T>
CrossBlockParams<T> add_cross_block(ParameterSet<T>& ps,
                                    const std::string& prefix, std::size_t c,
                                    Rng& rng) {
  CrossBlockParams<T> b;
  b.norm1 = add_norm<T>(ps, prefix + ".norm1", c);
  b.attn = add_attn<T>(ps, prefix + ".attn", c, rng);
  b.norm_cross = add_norm<T>(ps, prefix + ".norm_cross", c);
  b.cross = add_attn<T>(ps, prefix + ".cross", c, rng);
  b.norm2 = add_norm<T>(ps, prefix + ".norm2", c);
  b.ffn_w1 = add_weight(ps, prefix + ".ffn.w1", c, 4 * c, rng);
  b.ffn_b1 = add_bias<T>(ps, prefix + ".ffn.b1", 4 * c);
  b.ffn_w2 = add_weight(ps, prefix + ".ffn.w2", 4 * c, c, rng);
  b.ffn_b2 = add_bias<T>(ps, prefix + ".ffn.b2", c);
  return b;
}

// ==== forward building blocks ==============================================

template <typename T>
Tensor<T> linear(Tape<T>& t, Tensor<T> x, Parameter<T>& w, Parameter<T>& b) {
  return t.add_row(t.matmul(x, t.param(w)), t.param(b));
}

template <typename T>
Tensor<T> norm(Tape<T>& t, Tensor<T> x, const NormParams<T>& n) {
  return t.layer_norm(x, t.param(*n.gamma), t.param(*n.beta));
}

// Multi-head scaled dot-product attention.  `key_mask` (optional, [1, len])
// is added to every query row's logits; masked keys carry -1e9, which
// underflows to an exact zero weight after softmax.
template <typename T>
Tensor<T> attention(Tape<T>& t, const AttnParams<T>& p, std::size_t heads,
                    Tensor<T> queries, Tensor<T> keys_values,
                    Tensor<T> key_mask = {}) {
  auto q = linear(t, queries, *p.wq, *p.bq);
  auto k = t.matmul(keys_values, t.param(*p.wk));
  auto v = linear(t, keys_values, *p.wv, *p.bv);
  const std::size_t c = q.cols(), dh = c / heads;
  const T inv_sqrt = T(1) / std::sqrt(T(dh));
  Tensor<T> merged;
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = t.slice_cols(q, h * dh, (h + 1) * dh);
    auto kh = t.slice_cols(k, h * dh, (h + 1) * dh);
    auto vh = t.slice_cols(v, h * dh, (h + 1) * dh);
    auto logits = t.scale(t.matmul_nt(qh, kh), inv_sqrt);
    if (key_mask.valid()) logits = t.add_row(logits, key_mask);
    auto out = t.matmul(t.softmax(logits, 1), vh);
    merged = h == 0 ? out : t.concat_cols(merged, out);
  }
  return linear(t, merged, *p.wo, *p.bo);
}

template <typename T>
Tensor<T> feed_forward(Tape<T>& t, Tensor<T> x, Parameter<T>& w1,
                       Parameter<T>& b1, Parameter<T>& w2, Parameter<T>& b2) {
  return linear(t, t.gelu(linear(t, x, w1, b1)), w2, b2);
}

template <typename T>
Tensor<T> encoder_block(Tape<T>& t, const BlockParams<T>& b, std::size_t heads,
                        Tensor<T> x, Tensor<T> key_mask = {}) {
  auto h = norm(t, x, b.norm1);
  x = t.add(x, attention(t, b.attn, heads, h, h, key_mask));
  x = t.add(x, feed_forward(t, norm(t, x, b.norm2), *b.ffn_w1, *b.ffn_b1,
                            *b.ffn_w2, *b.ffn_b2));
  return x;
}

// additive key mask: 0 for valid positions, -1e9 for padding
template <typename T>
Tensor<T> padding_mask(Tape<T>& t, std::size_t len, std::size_t valid_len) {
  std::vector<T> row(len, T(0));
  for (std::size_t i = valid_len; i < len; ++i) row[i] = T(-1e9);
  return t.input(row, 1, len);
}

[[noreturn]] void shape_fail(const std::string& where, const std::string& msg) {
  throw std::invalid_argument(where + ": " + msg);
}

}  // namespace

// ==== image encoder ========================================================

template <typename T>
ImageEncoder<T>::ImageEncoder(const ModelConfig& cfg, ParameterSet<T>& ps,
                              Rng& rng, const std::string& prefix)
    : cfg_(cfg) {
  cfg_.validate();
  patch_w_ = add_weight(ps, prefix + "patch.w", cfg.patch_dim(), cfg.channels, rng);
  patch_b_ = add_bias<T>(ps, prefix + "patch.b", cfg.channels);
  cls_ = add_weight(ps, prefix + "cls", 1, cfg.channels, rng);
  // positions start louder than content projections: spatial relations in the
  // expressions are only learnable once "where" is visible next to "what"
  pos_ = add_weight(ps, prefix + "pos", cfg.num_patches(), cfg.channels, rng,
                    0.1);
  blocks_.reserve(cfg.image_depth);
  for (std::size_t i = 0; i < cfg.image_depth; ++i)
    blocks_.push_back(add_block<T>(ps, prefix + "blk" + std::to_string(i),
                                   cfg.channels, rng));
}

template <typename T>
Tensor<T> ImageEncoder<T>::embed(Tape<T>& t, std::span<const T> patches) const {
  if (patches.size() != cfg_.num_patches() * cfg_.patch_dim())
    shape_fail("ImageEncoder::embed",
               "expected " + std::to_string(cfg_.num_patches()) + " patches of dim " +
                   std::to_string(cfg_.patch_dim()) + ", got " +
                   std::to_string(patches.size()) + " scalars");
  auto x = t.input(patches, cfg_.num_patches(), cfg_.patch_dim());
  return linear(t, x, *patch_w_, *patch_b_);
}

template <typename T>
ImageEncoding<T> ImageEncoder<T>::encode_from(Tape<T>& t,
                                              Tensor<T> content) const {
  const std::size_t n = cfg_.num_patches();
  if (content.rows() != n || content.cols() != cfg_.channels)
    shape_fail("ImageEncoder::encode_from",
               "expected [" + std::to_string(n) + " x " +
                   std::to_string(cfg_.channels) + "] token content");
  // positions are added here, not in embed(): rows the distillation stage
  // replaced with its mask token still need to know where they sit
  auto x = t.concat_rows(t.param(*cls_), t.add(content, t.param(*pos_)));
  for (const auto& b : blocks_) x = encoder_block(t, b, cfg_.image_heads, x);
  return {t.slice_rows(x, 1, n + 1), t.slice_rows(x, 0, 1)};
}

// ==== text encoder =========================================================

template <typename T>
TextEncoder<T>::TextEncoder(const ModelConfig& cfg, ParameterSet<T>& ps,
                            Rng& rng, const std::string& prefix)
    : cfg_(cfg) {
  cfg_.validate();
  table_ = add_weight(ps, prefix + "embed", cfg.vocab_size, cfg.channels, rng);
  pos_ = add_weight(ps, prefix + "pos", cfg.max_text_len, cfg.channels, rng,
                    0.1);
  blocks_.reserve(cfg.text_depth);
  for (std::size_t i = 0; i < cfg.text_depth; ++i)
    blocks_.push_back(add_block<T>(ps, prefix + "blk" + std::to_string(i),
                                   cfg.channels, rng));
  proj_w_ = add_weight(ps, prefix + "proj.w", cfg.channels, cfg.channels, rng);
  proj_b_ = add_bias<T>(ps, prefix + "proj.b", cfg.channels);
}

template <typename T>
Tensor<T> TextEncoder<T>::embed(Tape<T>& t,
                                std::span<const std::int32_t> ids) const {
  if (ids.empty() || ids.size() > cfg_.max_text_len)
    shape_fail("TextEncoder::embed",
               "token count " + std::to_string(ids.size()) +
                   " outside [1, " + std::to_string(cfg_.max_text_len) + "]");
  return t.embedding(*table_, ids);
}

template <typename T>
TextEncoding<T> TextEncoder<T>::encode_from(Tape<T>& t, Tensor<T> content,
                                            std::size_t valid_len) const {
  const std::size_t len = content.rows();
  if (content.cols() != cfg_.channels)
    shape_fail("TextEncoder::encode_from", "channel mismatch");
  if (valid_len == 0 || valid_len > len)
    shape_fail("TextEncoder::encode_from",
               "valid_len " + std::to_string(valid_len) + " outside [1, " +
                   std::to_string(len) + "]");
  auto mask = padding_mask<T>(t, len, valid_len);
  // positions join after any distillation masking so replaced rows keep them
  auto x = t.add(content, t.slice_rows(t.param(*pos_), 0, len));
  for (const auto& b : blocks_)
    x = encoder_block(t, b, cfg_.text_heads, x, mask);
  auto pooled = t.slice_rows(x, valid_len - 1, valid_len);
  return {x, linear(t, pooled, *proj_w_, *proj_b_)};
}

// ==== fusion neck ==========================================================

template <typename T>
FusionNeck<T>::FusionNeck(const ModelConfig& cfg, ParameterSet<T>& ps,
                          Rng& rng, const std::string& prefix)
    : cfg_(cfg) {
  cfg_.validate();
  const std::size_t c = cfg.channels, h = cfg.neck_hidden;
  gate_w_ = add_weight(ps, prefix + "gate.w", c, c, rng);
  gate_b_ = add_bias<T>(ps, prefix + "gate.b", c);
  // multiplier starts near one so the fused tokens begin as the visual tokens
  init_constant<T>(*gate_b_, T(1));
  shift_w_ = add_weight(ps, prefix + "shift.w", c, c, rng);
  shift_b_ = add_bias<T>(ps, prefix + "shift.b", c);
  fc1_w_ = add_weight(ps, prefix + "fc1.w", c, h, rng);
  fc1_b_ = add_bias<T>(ps, prefix + "fc1.b", h);
  fc2_w_ = add_weight(ps, prefix + "fc2.w", h, c, rng);
  fc2_b_ = add_bias<T>(ps, prefix + "fc2.b", c);
}

template <typename T>
Tensor<T> FusionNeck<T>::fuse(Tape<T>& t, Tensor<T> visual_local,
                              Tensor<T> text_global) const {
  if (visual_local.cols() != cfg_.channels || text_global.rows() != 1 ||
      text_global.cols() != cfg_.channels)
    shape_fail("FusionNeck::fuse", "channel mismatch between inputs and config");
  auto gate = linear(t, text_global, *gate_w_, *gate_b_);
  auto shift = linear(t, text_global, *shift_w_, *shift_b_);
  // broadcast the [1, C] gate across tokens by gathering row 0 per token
  const std::vector<std::int32_t> rep(visual_local.rows(), 0);
  auto fused =
      t.add_row(t.mul(visual_local, t.gather_rows(gate, rep)), shift);
  auto h = t.gelu(linear(t, fused, *fc1_w_, *fc1_b_));
  return t.add(fused, linear(t, h, *fc2_w_, *fc2_b_));
}

// ==== mask decoder =========================================================

template <typename T>
MaskDecoder<T>::MaskDecoder(const ModelConfig& cfg, ParameterSet<T>& ps,
                            Rng& rng, const std::string& prefix)
    : cfg_(cfg) {
  cfg_.validate();
  blocks_.reserve(cfg.decoder_depth);
  for (std::size_t i = 0; i < cfg.decoder_depth; ++i)
    blocks_.push_back(add_cross_block<T>(ps, prefix + "blk" + std::to_string(i),
                                         cfg.channels, rng));
  const std::size_t p = cfg.patch_size;
  head_w_ = add_weight(ps, prefix + "head.w", cfg.channels, p * p, rng);
  head_b_ = add_bias<T>(ps, prefix + "head.b", p * p);
  // start at the foreground-prior logit (a few percent of pixels are object)
  // instead of 0.5 probability; otherwise early training spends hundreds of
  // steps just crushing the head bias before any localisation can begin
  init_constant<T>(*head_b_, T(-3.5));
  // row i of the per-patch head output holds patch (i/g, i%g); pixel (py, px)
  // of that patch lives at flat offset i*p*p + py*p + px
  const std::size_t g = cfg.grid(), s = cfg.image_size;
  detile_.resize(s * s);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      const std::size_t patch = (y / p) * g + x / p;
      const std::size_t offset = (y % p) * p + x % p;
      detile_[y * s + x] = std::int32_t(patch * p * p + offset);
    }
}

template <typename T>
Tensor<T> MaskDecoder<T>::decode(Tape<T>& t, Tensor<T> fused, Tensor<T> words,
                                 std::size_t valid_len) const {
  const std::size_t n = cfg_.num_patches(), g = cfg_.grid();
  if (g * g != n) shape_fail("MaskDecoder::decode", "token count is not square");
  if (fused.rows() != n || fused.cols() != cfg_.channels)
    shape_fail("MaskDecoder::decode",
               "expected [" + std::to_string(n) + " x " +
                   std::to_string(cfg_.channels) + "] fused tokens");
  if (words.cols() != cfg_.channels)
    shape_fail("MaskDecoder::decode", "text channel mismatch");
  if (valid_len == 0 || valid_len > words.rows())
    shape_fail("MaskDecoder::decode", "valid_len outside text length");
  auto mask = padding_mask<T>(t, words.rows(), valid_len);
  auto x = fused;
  for (const auto& b : blocks_) {
    auto h = norm(t, x, b.norm1);
    x = t.add(x, attention(t, b.attn, cfg_.decoder_heads, h, h));
    auto hc = norm(t, x, b.norm_cross);
    x = t.add(x, attention(t, b.cross, cfg_.decoder_heads, hc, words, mask));
    x = t.add(x, feed_forward(t, norm(t, x, b.norm2), *b.ffn_w1, *b.ffn_b1,
                              *b.ffn_w2, *b.ffn_b2));
  }
  const std::size_t p2 = cfg_.patch_size * cfg_.patch_size, s = cfg_.image_size;
  auto cells = t.reshape(linear(t, x, *head_w_, *head_b_), n * p2, 1);
  auto logits = t.reshape(t.gather_rows(cells, detile_), s, s);
  return t.sigmoid(logits);
}

// ==== full backbone ========================================================

template <typename T>
Segmenter<T>::Segmenter(const ModelConfig& cfg, ParameterSet<T>& ps, Rng& rng,
                        const std::string& prefix)
    : cfg_(cfg),
      image_enc_(cfg, ps, rng, prefix + "img."),
      text_enc_(cfg, ps, rng, prefix + "txt."),
      neck_(cfg, ps, rng, prefix + "neck."),
      decoder_(cfg, ps, rng, prefix + "dec.") {}

template <typename T>
SegmenterOutputs<T> Segmenter<T>::forward(Tape<T>& t, std::span<const T> patches,
                                          std::span<const std::int32_t> ids,
                                          std::size_t valid_len) const {
  SegmenterOutputs<T> out;
  out.valid_len = valid_len;
  out.image_embed = image_enc_.embed(t, patches);
  out.image = image_enc_.encode_from(t, out.image_embed);
  out.text_embed = text_enc_.embed(t, ids);
  out.text = text_enc_.encode_from(t, out.text_embed, valid_len);
  out.fused = neck_.fuse(t, out.image.local, out.text.global);
  out.probs = decoder_.decode(t, out.fused, out.text.local, valid_len);
  return out;
}

// ==== helpers ==============================================================

template <typename T>
std::vector<T> patchify(std::span<const T> image, const ModelConfig& cfg) {
  const std::size_t s = cfg.image_size, p = cfg.patch_size, g = cfg.grid();
  if (image.size() != s * s * 3)
    throw std::invalid_argument(
        "patchify: expected " + std::to_string(s * s * 3) +
        " scalars (interleaved RGB), got " + std::to_string(image.size()));
  std::vector<T> out(cfg.num_patches() * cfg.patch_dim());
  T* dst = out.data();
  for (std::size_t pr = 0; pr < g; ++pr)
    for (std::size_t pc = 0; pc < g; ++pc)
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x) {
          const T* src = image.data() + ((pr * p + y) * s + (pc * p + x)) * 3;
          *dst++ = src[0];
          *dst++ = src[1];
          *dst++ = src[2];
        }
  return out;
}

// ==== explicit instantiations ==============================================

#define REFSEG_INSTANTIATE_MODEL(T)                                        \
  template class ImageEncoder<T>;                                          \
  template class TextEncoder<T>;                                           \
  template class FusionNeck<T>;                                            \
  template class MaskDecoder<T>;                                           \
  template class Segmenter<T>;                                             \
  template std::vector<T> patchify<T>(std::span<const T>, const ModelConfig&); \
  template void init_trunc_normal<T>(Parameter<T>&, Rng&, double);         \
  template void init_constant<T>(Parameter<T>&, T);

REFSEG_INSTANTIATE_MODEL(float)
REFSEG_INSTANTIATE_MODEL(double)

}  // namespace refseg::model
