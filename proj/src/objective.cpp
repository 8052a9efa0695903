#include "nepa/objective.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "nepa/ops.hpp"

namespace nepa {

void ObjectiveConfig::validate() const {
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0))
    throw ConfigError("mask_ratio must be in [0, 1), got " + std::to_string(mask_ratio));
}

std::pair<Tensor, Tensor> shift_pairs(const Tensor& pred, const Tensor& target, bool shift) {
  if (pred.shape() != target.shape() || pred.rank() != 3)
    throw ShapeError("shift_pairs: pred " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  if (!shift) return {pred, target};
  const auto t = pred.dim(1);
  if (t < 2) throw ObjectiveError("shift_pairs: need at least 2 positions to predict a next embedding, got " +
                                  std::to_string(t));
  return {slice(pred, 1, 0, t - 1), slice(target, 1, 1, t)};
}

namespace {

void require_finite(const Tensor& t, const char* what) {
  dispatch(t.dtype(), [&]<class S>() {
    for (S v : t.data<S>())
      if (!std::isfinite(v)) throw NumericError(std::string("nepa_loss: non-finite value in ") + what);
  });
}

}  // namespace

Tensor nepa_loss(const Tensor& z, const Tensor& h_out, const ObjectiveConfig& cfg) {
  require_finite(z, "targets");
  require_finite(h_out, "predictions");
  Tensor target = cfg.stop_grad ? stop_gradient(z) : z;
  auto [pred, tgt] = shift_pairs(h_out, target, cfg.shift);
  Tensor cos = sum_dim(mul(l2_normalize(pred), l2_normalize(tgt)), -1);
  return scale(mean(cos), -1.0);
}

MaskedInputs mask_inputs(const Tensor& z, double mask_ratio, const Tensor& mask_token, Rng& rng) {
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0))
    throw ConfigError("mask_ratio must be in [0, 1), got " + std::to_string(mask_ratio));
  const auto b = z.dim(0), t = z.dim(1);
  MaskedInputs out;
  out.mask.assign(static_cast<std::size_t>(b * t), 0);
  const auto count = static_cast<std::int64_t>(std::floor(mask_ratio * static_cast<double>(t)));
  if (count == 0) {
    out.z_masked = z;
    return out;
  }
  std::vector<std::int64_t> order(static_cast<std::size_t>(t));
  for (std::int64_t s = 0; s < b; ++s) {
    std::iota(order.begin(), order.end(), 0);
    // Partial Fisher-Yates: the first `count` slots are a uniform subset.
    for (std::int64_t i = 0; i < count; ++i) {
      auto j = i + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(t - i)));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
      out.mask[static_cast<std::size_t>(s * t + order[static_cast<std::size_t>(i)])] = 1;
    }
  }
  out.z_masked = replace_rows(z, mask_token, out.mask);
  return out;
}

StepForward training_step_forward(const Tensor& images, const BackboneParams& params,
                                  const BackboneConfig& backbone, const ObjectiveConfig& cfg,
                                  const Tensor& mask_token, Rng& rng, bool want_hidden) {
  cfg.validate();
  StepForward out;
  out.seq.z = embed(patchify(images, backbone.patch_size), params);
  Tensor inputs = out.seq.z;
  if (cfg.mask_ratio > 0) {
    auto masked = mask_inputs(out.seq.z, cfg.mask_ratio, mask_token, rng);
    inputs = masked.z_masked;
    out.mask = std::move(masked.mask);
  }
  auto pred = predict(inputs, params, backbone, want_hidden);
  out.seq.h_out = pred.h_out;
  out.seq.hidden = std::move(pred.hidden);
  out.seq.attention = std::move(pred.attention);
  out.loss = nepa_loss(out.seq.z, out.seq.h_out, cfg);
  return out;
}

double target_spread(const Tensor& z) {
  const auto d = z.dim(-1);
  const auto rows = z.numel() / d;
  if (rows < 2) return 0.0;
  auto v = l2_normalize(z).to_vector();
  double total = 0;
  for (std::int64_t j = 0; j < d; ++j) {
    double m = 0;
    for (std::int64_t r = 0; r < rows; ++r) m += v[static_cast<std::size_t>(r * d + j)];
    m /= static_cast<double>(rows);
    double var = 0;
    for (std::int64_t r = 0; r < rows; ++r) {
      const double c = v[static_cast<std::size_t>(r * d + j)] - m;
      var += c * c;
    }
    total += std::sqrt(var / static_cast<double>(rows));
  }
  return total / static_cast<double>(d);
}

Tensor init_mask_token(int dim, Rng& rng, DType dtype) {
  std::vector<double> v(static_cast<std::size_t>(dim));
  for (auto& x : v) x = rng.truncated_normal(kInitStd);
  Tensor t = Tensor::from_values({dim}, v, dtype);
  t.set_requires_grad(true);
  return t;
}

}  // namespace nepa
