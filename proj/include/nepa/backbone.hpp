#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nepa/rng.hpp"
#include "nepa/tensor.hpp"

namespace nepa {

enum class RopeMode { one_d, axial_2d };
enum class MlpKind { gelu, swiglu };
enum class AttentionMode { causal, bidirectional };

std::string to_string(RopeMode mode);
std::string to_string(MlpKind kind);
std::string to_string(AttentionMode mode);

inline constexpr double kRopeBase = 10000.0;
inline constexpr double kLayerNormEps = 1e-6;
inline constexpr double kInitStd = 0.02;

struct BackboneConfig {
  int image_size = 32;   // height; also width unless image_width is set
  int image_width = 0;   // 0 = square images
  int patch_size = 8;
  int channels = 3;
  int dim = 64;
  int depth = 6;
  int heads = 4;
  double mlp_ratio = 4.0;
  bool use_rope = true;
  RopeMode rope_mode = RopeMode::axial_2d;
  bool use_layerscale = true;
  double layerscale_init = 1e-5;
  bool use_qknorm = true;
  MlpKind mlp_kind = MlpKind::swiglu;
  bool use_learnable_posembed = true;
  AttentionMode attention_mode = AttentionMode::causal;

  /// Throws ConfigError naming the first violated constraint.
  void validate() const;

  int height() const { return image_size; }
  int width() const { return image_width > 0 ? image_width : image_size; }
  int grid_rows() const { return height() / patch_size; }
  int grid_cols() const { return width() / patch_size; }
  int num_patches() const { return grid_rows() * grid_cols(); }
  int patch_dim() const { return channels * patch_size * patch_size; }
  int head_dim() const { return dim / heads; }
  /// GeLU: round(mlp_ratio * dim). SwiGLU: 2/3 of that, rounded to the
  /// nearest multiple of 8 (at least 8).
  int mlp_hidden() const;
};

/// Weights are stored [in, out]; a linear layer computes x W + b.
struct BlockParams {
  Tensor norm1_weight, norm1_bias;
  Tensor qkv_weight, qkv_bias;    // [dim, 3 dim]: q | k | v, heads contiguous
  Tensor proj_weight, proj_bias;  // [dim, dim]
  Tensor ls1;                     // [dim], undefined without LayerScale
  Tensor norm2_weight, norm2_bias;
  Tensor fc1_weight, fc1_bias;    // GeLU: [dim, h]; SwiGLU: [dim, 2h] gate | up
  Tensor fc2_weight, fc2_bias;    // [h, dim]
  Tensor ls2;
};

struct BackboneParams {
  Tensor patch_weight;  // [C p p, dim]
  Tensor patch_bias;    // [dim]
  Tensor pos_embed;     // [T, dim], undefined when disabled
  std::vector<BlockParams> blocks;
  Tensor norm_weight, norm_bias;

  /// Truncated-normal(0.02) weights, zero biases, unit norm gains,
  /// LayerScale vectors at exactly layerscale_init.
  static BackboneParams init(const BackboneConfig& cfg, Rng& rng, DType dtype = DType::f32);

  /// Hierarchical names (`patch_embed.weight`, `blocks.3.attn.qkv.bias`, ...)
  /// in a fixed order. The tensors are shared, not copied.
  std::vector<NamedTensor> named() const;
  BackboneParams clone() const;
  void set_requires_grad(bool flag) const;
};

/// Closed form:
///   P = C p^2, D = dim, h = mlp_hidden
///   embed   P D + D (+ T D with the learnable table)
///   block   4D (norms) + 3D^2 + 3D (qkv) + D^2 + D (proj) (+ 2D LayerScale)
///           + GeLU:   D h + h + h D + D
///           + SwiGLU: 2 D h + 2h + h D + D
///   final   2D
std::int64_t parameter_count(const BackboneConfig& cfg);
std::int64_t parameter_count(const BackboneParams& params);

/// [B, C, H, W] -> [B, T, C p^2]; raster order, channel-major inside a patch.
Tensor patchify(const Tensor& images, int patch_size);
Tensor unpatchify(const Tensor& patches, int channels, int height, int width, int patch_size);

/// Affine patch projection f. Excludes the positional table.
Tensor embed(const Tensor& patches, const BackboneParams& params);

/// Rotation angle table [T, head_dim/2] for explicit positions. 1d: pair j
/// rotates by pos * base^(-2j/head_dim). 2d-axial: the first ceil(P/2) pairs
/// are driven by the row coordinate and the rest by the column, each axis
/// using its own frequency ladder base^(-j/n_axis).
std::vector<double> rope_angles_1d(std::span<const double> positions, int head_dim);
std::vector<double> rope_angles_2d(std::span<const double> rows, std::span<const double> cols,
                                   int head_dim);
/// Angles for the patch grid of `cfg` (patch index, or (row, col)).
std::vector<double> rope_angles(const BackboneConfig& cfg);

/// Rotates q and k ([..., T, head_dim]) by the same angle table.
std::pair<Tensor, Tensor> apply_rope(const Tensor& q, const Tensor& k,
                                     std::span<const double> angles);

/// [T, T] additive mask: 0 on and below the diagonal, -inf above.
Tensor causal_mask(std::int64_t tokens, DType dtype);

/// Intermediate values of one attention call, for diagnostics and tests.
struct AttentionTrace {
  Tensor q_normed, k_normed;  // [B, H, T, hd] after QK-Norm, before RoPE
  Tensor q, k, v;             // as used in the dot product
  Tensor logits;              // scaled and masked
  Tensor probs;               // post-softmax
};

Tensor attention(const Tensor& x, const BlockParams& block, const BackboneConfig& cfg,
                 std::span<const double> angles, AttentionTrace* trace = nullptr);

Tensor block_forward(const Tensor& x, const BlockParams& block, const BackboneConfig& cfg,
                     std::span<const double> angles, AttentionTrace* trace = nullptr);

struct PredictorOutput {
  Tensor h_out;                    // [B, T, dim], final-layernormed
  std::vector<Tensor> hidden;      // per block output, when requested
  std::vector<Tensor> attention;   // per block probs [B, H, T, T], when requested
};

/// Adds the positional table (if enabled) to `inputs`, runs the blocks and
/// the final LayerNorm.
PredictorOutput predict(const Tensor& inputs, const BackboneParams& params,
                        const BackboneConfig& cfg, bool want_hidden = false);

struct EmbeddingSequence {
  Tensor z;      // targets f(patches)
  Tensor h_out;  // predictor outputs before shifting
  std::vector<Tensor> hidden;
  std::vector<Tensor> attention;
};

EmbeddingSequence forward(const Tensor& images, const BackboneParams& params,
                          const BackboneConfig& cfg, bool want_hidden = false);

/// Maps [0, 1] pixels to [-1, 1] ((x - 0.5) / 0.5).
Tensor normalize_pixels(const Tensor& images);

}  // namespace nepa
