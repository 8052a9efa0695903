#include "nepa/backbone.hpp"

#include <cmath>
#include <limits>

#include "nepa/ops.hpp"

namespace nepa {

std::string to_string(RopeMode mode) { return mode == RopeMode::one_d ? "1d" : "2d-axial"; }
std::string to_string(MlpKind kind) { return kind == MlpKind::gelu ? "gelu" : "swiglu"; }
std::string to_string(AttentionMode mode) {
  return mode == AttentionMode::causal ? "causal" : "bidirectional";
}

void BackboneConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (patch_size <= 0) fail("patch_size must be positive");
  if (image_size <= 0 || width() <= 0) fail("image_size must be positive");
  if (image_size % patch_size != 0 || width() % patch_size != 0)
    fail("image_size " + std::to_string(image_size) + "x" + std::to_string(width()) +
         " is not divisible by patch_size " + std::to_string(patch_size));
  if (channels <= 0) fail("channels must be positive");
  if (dim <= 0 || depth < 0 || heads <= 0) fail("dim, heads must be positive and depth >= 0");
  if (dim % heads != 0)
    fail("dim " + std::to_string(dim) + " is not divisible by heads " + std::to_string(heads));
  if (use_rope && head_dim() % 2 != 0)
    fail("head_dim " + std::to_string(head_dim()) + " must be even when RoPE is enabled");
  if (!(mlp_ratio > 0)) fail("mlp_ratio must be positive");
  if (use_layerscale && !(layerscale_init > 0)) fail("layerscale_init must be > 0 with LayerScale");
}

int BackboneConfig::mlp_hidden() const {
  const double base = mlp_ratio * dim;
  if (mlp_kind == MlpKind::gelu) return static_cast<int>(std::lround(base));
  const long rounded = std::lround(base * 2.0 / 3.0 / 8.0) * 8;
  return static_cast<int>(std::max(8L, rounded));
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

namespace {

Tensor trunc_normal(Shape shape, Rng& rng, DType dtype, double std) {
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = rng.truncated_normal(std);
  return Tensor::from_values(std::move(shape), v, dtype);
}

}  // namespace

BackboneParams BackboneParams::init(const BackboneConfig& cfg, Rng& rng, DType dtype) {
  cfg.validate();
  const std::int64_t d = cfg.dim, hidden = cfg.mlp_hidden();
  const std::int64_t fc1_out = cfg.mlp_kind == MlpKind::swiglu ? 2 * hidden : hidden;
  BackboneParams p;
  p.patch_weight = trunc_normal({cfg.patch_dim(), d}, rng, dtype, kInitStd);
  p.patch_bias = Tensor::zeros({d}, dtype);
  if (cfg.use_learnable_posembed) p.pos_embed = trunc_normal({cfg.num_patches(), d}, rng, dtype, kInitStd);
  for (int i = 0; i < cfg.depth; ++i) {
    BlockParams b;
    b.norm1_weight = Tensor::full({d}, 1.0, dtype);
    b.norm1_bias = Tensor::zeros({d}, dtype);
    b.qkv_weight = trunc_normal({d, 3 * d}, rng, dtype, kInitStd);
    b.qkv_bias = Tensor::zeros({3 * d}, dtype);
    b.proj_weight = trunc_normal({d, d}, rng, dtype, kInitStd);
    b.proj_bias = Tensor::zeros({d}, dtype);
    b.norm2_weight = Tensor::full({d}, 1.0, dtype);
    b.norm2_bias = Tensor::zeros({d}, dtype);
    b.fc1_weight = trunc_normal({d, fc1_out}, rng, dtype, kInitStd);
    b.fc1_bias = Tensor::zeros({fc1_out}, dtype);
    b.fc2_weight = trunc_normal({hidden, d}, rng, dtype, kInitStd);
    b.fc2_bias = Tensor::zeros({d}, dtype);
    if (cfg.use_layerscale) {
      b.ls1 = Tensor::full({d}, cfg.layerscale_init, dtype);
      b.ls2 = Tensor::full({d}, cfg.layerscale_init, dtype);
    }
    p.blocks.push_back(std::move(b));
  }
  p.norm_weight = Tensor::full({d}, 1.0, dtype);
  p.norm_bias = Tensor::zeros({d}, dtype);
  p.set_requires_grad(true);
  return p;
}

std::vector<NamedTensor> BackboneParams::named() const {
  std::vector<NamedTensor> out;
  auto put = [&](std::string name, const Tensor& t) {
    if (t.defined()) out.push_back({std::move(name), t});
  };
  put("patch_embed.weight", patch_weight);
  put("patch_embed.bias", patch_bias);
  put("pos_embed", pos_embed);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const std::string pre = "blocks." + std::to_string(i) + ".";
    put(pre + "norm1.weight", b.norm1_weight);
    put(pre + "norm1.bias", b.norm1_bias);
    put(pre + "attn.qkv.weight", b.qkv_weight);
    put(pre + "attn.qkv.bias", b.qkv_bias);
    put(pre + "attn.proj.weight", b.proj_weight);
    put(pre + "attn.proj.bias", b.proj_bias);
    put(pre + "ls1", b.ls1);
    put(pre + "norm2.weight", b.norm2_weight);
    put(pre + "norm2.bias", b.norm2_bias);
    put(pre + "mlp.fc1.weight", b.fc1_weight);
    put(pre + "mlp.fc1.bias", b.fc1_bias);
    put(pre + "mlp.fc2.weight", b.fc2_weight);
    put(pre + "mlp.fc2.bias", b.fc2_bias);
    put(pre + "ls2", b.ls2);
  }
  put("norm.weight", norm_weight);
  put("norm.bias", norm_bias);
  return out;
}

BackboneParams BackboneParams::clone() const {
  auto c = [](const Tensor& t) {
    if (!t.defined()) return Tensor{};
    Tensor out = t.clone();
    out.set_requires_grad(t.requires_grad());
    return out;
  };
  BackboneParams p;
  p.patch_weight = c(patch_weight);
  p.patch_bias = c(patch_bias);
  p.pos_embed = c(pos_embed);
  for (const auto& b : blocks) {
    p.blocks.push_back({c(b.norm1_weight), c(b.norm1_bias), c(b.qkv_weight), c(b.qkv_bias),
                        c(b.proj_weight), c(b.proj_bias), c(b.ls1), c(b.norm2_weight),
                        c(b.norm2_bias), c(b.fc1_weight), c(b.fc1_bias), c(b.fc2_weight),
                        c(b.fc2_bias), c(b.ls2)});
  }
  p.norm_weight = c(norm_weight);
  p.norm_bias = c(norm_bias);
  return p;
}

void BackboneParams::set_requires_grad(bool flag) const {
  for (auto& [name, t] : named()) {
    Tensor handle = t;
    handle.set_requires_grad(flag);
  }
}

std::int64_t parameter_count(const BackboneConfig& cfg) {
  const std::int64_t P = cfg.patch_dim(), D = cfg.dim, h = cfg.mlp_hidden(), T = cfg.num_patches();
  std::int64_t n = P * D + D;
  if (cfg.use_learnable_posembed) n += T * D;
  std::int64_t block = 4 * D + 3 * D * D + 3 * D + D * D + D;
  if (cfg.use_layerscale) block += 2 * D;
  block += cfg.mlp_kind == MlpKind::gelu ? D * h + h + h * D + D : 2 * D * h + 2 * h + h * D + D;
  return n + cfg.depth * block + 2 * D;
}

std::int64_t parameter_count(const BackboneParams& params) {
  std::int64_t n = 0;
  for (const auto& [name, t] : params.named()) n += t.numel();
  return n;
}

// ---------------------------------------------------------------------------
// Patches
// ---------------------------------------------------------------------------

Tensor patchify(const Tensor& images, int patch_size) {
  if (images.rank() != 4) throw ShapeError("patchify: expected [B, C, H, W], got " + shape_str(images.shape()));
  const auto b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (patch_size <= 0 || h % patch_size != 0 || w % patch_size != 0)
    throw ConfigError("patchify: image " + std::to_string(h) + "x" + std::to_string(w) +
                      " not divisible by patch size " + std::to_string(patch_size));
  const std::int64_t p = patch_size, gh = h / p, gw = w / p;
  Tensor x = reshape(images, {b, c, gh, p, gw, p});
  x = permute(x, {0, 2, 4, 1, 3, 5});
  return reshape(x, {b, gh * gw, c * p * p});
}

Tensor unpatchify(const Tensor& patches, int channels, int height, int width, int patch_size) {
  const std::int64_t p = patch_size, gh = height / p, gw = width / p;
  const auto b = patches.dim(0);
  if (patches.shape() != Shape{b, gh * gw, channels * p * p})
    throw ShapeError("unpatchify: patches " + shape_str(patches.shape()) + " do not fit a " +
                     std::to_string(channels) + "x" + std::to_string(height) + "x" + std::to_string(width) +
                     " image");
  Tensor x = reshape(patches, {b, gh, gw, channels, p, p});
  x = permute(x, {0, 3, 1, 4, 2, 5});
  return reshape(x, {b, channels, height, width});
}

namespace {
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add(matmul(x, w), b); }
}  // namespace

Tensor embed(const Tensor& patches, const BackboneParams& params) {
  if (patches.dim(-1) != params.patch_weight.dim(0))
    throw ShapeError("embed: patch length " + std::to_string(patches.dim(-1)) + " vs projection " +
                     shape_str(params.patch_weight.shape()));
  return linear(patches, params.patch_weight, params.patch_bias);
}

// ---------------------------------------------------------------------------
// RoPE
// ---------------------------------------------------------------------------

std::vector<double> rope_angles_1d(std::span<const double> positions, int head_dim) {
  if (head_dim % 2 != 0) throw ConfigError("RoPE needs an even head_dim, got " + std::to_string(head_dim));
  const int pairs = head_dim / 2;
  std::vector<double> out(positions.size() * static_cast<std::size_t>(pairs));
  for (std::size_t t = 0; t < positions.size(); ++t)
    for (int j = 0; j < pairs; ++j)
      out[t * static_cast<std::size_t>(pairs) + static_cast<std::size_t>(j)] =
          positions[t] * std::pow(kRopeBase, -2.0 * j / head_dim);
  return out;
}

std::vector<double> rope_angles_2d(std::span<const double> rows, std::span<const double> cols,
                                   int head_dim) {
  if (head_dim % 2 != 0) throw ConfigError("RoPE needs an even head_dim, got " + std::to_string(head_dim));
  if (rows.size() != cols.size()) throw ShapeError("rope_angles_2d: row/col position counts differ");
  const int pairs = head_dim / 2;
  const int row_pairs = (pairs + 1) / 2;
  const int col_pairs = pairs - row_pairs;
  std::vector<double> out(rows.size() * static_cast<std::size_t>(pairs));
  for (std::size_t t = 0; t < rows.size(); ++t) {
    double* dst = out.data() + t * static_cast<std::size_t>(pairs);
    for (int j = 0; j < row_pairs; ++j) dst[j] = rows[t] * std::pow(kRopeBase, -static_cast<double>(j) / row_pairs);
    for (int j = 0; j < col_pairs; ++j)
      dst[row_pairs + j] = cols[t] * std::pow(kRopeBase, -static_cast<double>(j) / col_pairs);
  }
  return out;
}

std::vector<double> rope_angles(const BackboneConfig& cfg) {
  const int t = cfg.num_patches();
  if (cfg.rope_mode == RopeMode::one_d) {
    std::vector<double> pos(static_cast<std::size_t>(t));
    for (int i = 0; i < t; ++i) pos[static_cast<std::size_t>(i)] = i;
    return rope_angles_1d(pos, cfg.head_dim());
  }
  std::vector<double> rows(static_cast<std::size_t>(t)), cols(static_cast<std::size_t>(t));
  for (int i = 0; i < t; ++i) {
    rows[static_cast<std::size_t>(i)] = i / cfg.grid_cols();
    cols[static_cast<std::size_t>(i)] = i % cfg.grid_cols();
  }
  return rope_angles_2d(rows, cols, cfg.head_dim());
}

std::pair<Tensor, Tensor> apply_rope(const Tensor& q, const Tensor& k, std::span<const double> angles) {
  if (q.dim(-1) % 2 != 0) throw ConfigError("RoPE needs an even head_dim, got " + std::to_string(q.dim(-1)));
  return {rotate_pairs(q, angles), rotate_pairs(k, angles)};
}

Tensor causal_mask(std::int64_t tokens, DType dtype) {
  std::vector<double> m(static_cast<std::size_t>(tokens * tokens), 0.0);
  for (std::int64_t i = 0; i < tokens; ++i)
    for (std::int64_t j = i + 1; j < tokens; ++j)
      m[static_cast<std::size_t>(i * tokens + j)] = -std::numeric_limits<double>::infinity();
  return Tensor::from_values({tokens, tokens}, m, dtype);
}

// ---------------------------------------------------------------------------
// Transformer
// ---------------------------------------------------------------------------

Tensor attention(const Tensor& x, const BlockParams& block, const BackboneConfig& cfg,
                 std::span<const double> angles, AttentionTrace* trace) {
  if (x.rank() != 3 || x.dim(2) != cfg.dim)
    throw ShapeError("attention: expected [B, T, " + std::to_string(cfg.dim) + "], got " + shape_str(x.shape()));
  const auto b = x.dim(0), t = x.dim(1);
  const std::int64_t h = cfg.heads, hd = cfg.head_dim();
  Tensor qkv = linear(x, block.qkv_weight, block.qkv_bias);
  qkv = permute(reshape(qkv, {b, t, 3, h, hd}), {2, 0, 3, 1, 4});
  auto part = [&](int i) { return reshape(slice(qkv, 0, i, i + 1), {b, h, t, hd}); };
  Tensor q = part(0), k = part(1), v = part(2);
  if (cfg.use_qknorm) {
    q = layernorm(q, {}, {}, kLayerNormEps);
    k = layernorm(k, {}, {}, kLayerNormEps);
    if (trace) {
      trace->q_normed = q;
      trace->k_normed = k;
    }
  }
  if (cfg.use_rope) std::tie(q, k) = apply_rope(q, k, angles);
  Tensor logits = scale(matmul(q, transpose(k, -1, -2)), 1.0 / std::sqrt(static_cast<double>(hd)));
  if (cfg.attention_mode == AttentionMode::causal) logits = add(logits, causal_mask(t, x.dtype()));
  Tensor probs = softmax_lastdim(logits);
  if (trace) {
    trace->q = q;
    trace->k = k;
    trace->v = v;
    trace->logits = logits;
    trace->probs = probs;
  }
  Tensor out = matmul(probs, v);
  out = reshape(permute(out, {0, 2, 1, 3}), {b, t, cfg.dim});
  return linear(out, block.proj_weight, block.proj_bias);
}

namespace {

Tensor mlp(const Tensor& x, const BlockParams& block, const BackboneConfig& cfg) {
  Tensor u = linear(x, block.fc1_weight, block.fc1_bias);
  if (cfg.mlp_kind == MlpKind::gelu) return linear(gelu(u), block.fc2_weight, block.fc2_bias);
  const auto hidden = block.fc2_weight.dim(0);
  Tensor gated = mul(silu(slice(u, -1, 0, hidden)), slice(u, -1, hidden, 2 * hidden));
  return linear(gated, block.fc2_weight, block.fc2_bias);
}

}  // namespace

Tensor block_forward(const Tensor& x, const BlockParams& block, const BackboneConfig& cfg,
                     std::span<const double> angles, AttentionTrace* trace) {
  Tensor a = attention(layernorm(x, block.norm1_weight, block.norm1_bias, kLayerNormEps), block, cfg, angles, trace);
  if (cfg.use_layerscale) a = mul(a, block.ls1);
  Tensor y = add(x, a);
  Tensor m = mlp(layernorm(y, block.norm2_weight, block.norm2_bias, kLayerNormEps), block, cfg);
  if (cfg.use_layerscale) m = mul(m, block.ls2);
  return add(y, m);
}

PredictorOutput predict(const Tensor& inputs, const BackboneParams& params, const BackboneConfig& cfg,
                        bool want_hidden) {
  if (inputs.rank() != 3 || inputs.dim(2) != cfg.dim)
    throw ShapeError("predict: expected [B, T, " + std::to_string(cfg.dim) + "], got " + shape_str(inputs.shape()));
  PredictorOutput out;
  Tensor x = inputs;
  if (params.pos_embed.defined()) {
    if (params.pos_embed.dim(0) != inputs.dim(1))
      throw ShapeError("predict: positional table " + shape_str(params.pos_embed.shape()) + " for " +
                       std::to_string(inputs.dim(1)) + " tokens");
    x = add(x, params.pos_embed);
  }
  std::vector<double> angles;
  if (cfg.use_rope) {
    if (inputs.dim(1) != cfg.num_patches())
      throw ShapeError("predict: " + std::to_string(inputs.dim(1)) + " tokens but the patch grid has " +
                       std::to_string(cfg.num_patches()));
    angles = rope_angles(cfg);
  }
  for (const auto& block : params.blocks) {
    AttentionTrace trace;
    x = block_forward(x, block, cfg, angles, want_hidden ? &trace : nullptr);
    if (want_hidden) {
      out.hidden.push_back(x);
      out.attention.push_back(trace.probs);
    }
  }
  out.h_out = layernorm(x, params.norm_weight, params.norm_bias, kLayerNormEps);
  return out;
}

EmbeddingSequence forward(const Tensor& images, const BackboneParams& params, const BackboneConfig& cfg,
                          bool want_hidden) {
  EmbeddingSequence seq;
  seq.z = embed(patchify(images, cfg.patch_size), params);
  auto pred = predict(seq.z, params, cfg, want_hidden);
  seq.h_out = std::move(pred.h_out);
  seq.hidden = std::move(pred.hidden);
  seq.attention = std::move(pred.attention);
  return seq;
}

Tensor normalize_pixels(const Tensor& images) { return scale(add_scalar(images, -0.5), 2.0); }

}  // namespace nepa
