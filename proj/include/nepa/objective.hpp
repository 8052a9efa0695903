#pragma once

#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "nepa/backbone.hpp"
#include "nepa/rng.hpp"
#include "nepa/tensor.hpp"

namespace nepa {

class ObjectiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ablation switches of the next-embedding objective. The no-causal variant
/// lives in BackboneConfig::attention_mode.
struct ObjectiveConfig {
  bool shift = true;
  bool stop_grad = true;
  double mask_ratio = 0.0;  // in [0, 1)

  void validate() const;
};

/// (pred[:, 0..T-1], target[:, 1..T]) with shifting, the unshifted pair
/// otherwise. Throws ObjectiveError when shifting leaves nothing to predict.
std::pair<Tensor, Tensor> shift_pairs(const Tensor& pred, const Tensor& target, bool shift = true);

/// Negative cosine similarity between predictions and (optionally detached)
/// targets, averaged over batch and aligned positions. Range [-1, 1].
Tensor nepa_loss(const Tensor& z, const Tensor& h_out, const ObjectiveConfig& cfg);

struct MaskedInputs {
  Tensor z_masked;
  std::vector<std::uint8_t> mask;  // [B * T], row-major
};

/// Replaces floor(ratio * T) positions per sample, drawn uniformly without
/// replacement, with `mask_token`.
MaskedInputs mask_inputs(const Tensor& z, double mask_ratio, const Tensor& mask_token, Rng& rng);

struct StepForward {
  Tensor loss;
  EmbeddingSequence seq;
  std::vector<std::uint8_t> mask;  // empty when mask_ratio == 0
};

/// patchify -> embed -> (mask) -> predict -> loss. `images` are fed as given
/// (normalise beforehand). `rng` is only consumed when masking.
StepForward training_step_forward(const Tensor& images, const BackboneParams& params,
                                  const BackboneConfig& backbone, const ObjectiveConfig& cfg,
                                  const Tensor& mask_token, Rng& rng, bool want_hidden = false);

/// Collapse diagnostic: l2-normalise every target row, take the standard
/// deviation of each channel across all B*T rows, average over channels.
double target_spread(const Tensor& z);

/// Learned replacement vector for masked inputs, truncated normal (0.02).
Tensor init_mask_token(int dim, Rng& rng, DType dtype = DType::f32);

}  // namespace nepa
