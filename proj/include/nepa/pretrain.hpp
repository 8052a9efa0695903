#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "nepa/config.hpp"
#include "nepa/data.hpp"
#include "nepa/optim.hpp"

namespace nepa {

struct StepLog {
  std::int64_t step = 0;  // 1-based index of the finished step
  double loss = 0;
  double lr = 0;
};

/// NEPA pretraining: one optimizer step per call, deterministic in
/// (config, dataset). Batches come from batch_iter with epoch = step / steps
/// per epoch; crops and masks draw from a sequential Rng saved in checkpoints.
class Pretrainer {
 public:
  Pretrainer(PretrainConfig cfg, const Dataset& data);

  StepLog step();
  bool done() const { return step_ >= cfg_.schedule.total_steps; }
  std::int64_t steps_done() const { return step_; }

  const PretrainConfig& config() const { return cfg_; }
  const BackboneParams& params() const { return params_; }
  const Tensor& mask_token() const { return mask_token_; }
  /// EMA weights arranged as a backbone.
  BackboneParams ema_params() const;
  /// Target spread of the current weights on the last training batch.
  double last_target_spread() const { return last_spread_; }

  /// model.*, mask_token, adam.m.*, adam.v.*, ema.* plus metadata.
  Checkpoint checkpoint() const;
  /// Continues a run from `checkpoint()` output; the config must match.
  void restore(const Checkpoint& ckpt);

 private:
  Tensor batch_images(std::int64_t step);

  PretrainConfig cfg_;
  const Dataset& data_;
  BackboneParams params_;
  Tensor mask_token_;
  std::unique_ptr<AdamW> opt_;
  std::unique_ptr<Ema> ema_;
  Rng rng_;
  std::int64_t step_ = 0;
  double last_spread_ = 0;
};

/// Rebuilds a backbone from a pretrain checkpoint: its config, and either the
/// raw or the EMA weights.
struct LoadedBackbone {
  BackboneConfig config;
  BackboneParams params;
};
LoadedBackbone load_backbone(const Checkpoint& ckpt, bool ema);

/// Runs to completion, writing `loss.csv` (step,loss,lr) and checkpoints
/// under `out_dir`. With `resume`, continues from that checkpoint and appends
/// to the existing rows up to its step. `on_step` sees every log row.
void run_pretrain(const PretrainConfig& cfg, const Dataset& data, const std::filesystem::path& out_dir,
                  const std::optional<std::filesystem::path>& resume = std::nullopt,
                  const nlohmann::json& extra_meta = nlohmann::json::object(),
                  const std::function<void(const StepLog&)>& on_step = {});

}  // namespace nepa
