#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "nepa/tensor.hpp"

namespace nepa {

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

struct OptimParam {
  std::string name;
  Tensor param;
  double lr_scale = 1.0;  // layer-wise multiplier, updated by the trainer
  bool decay = true;      // decoupled weight decay applies
};

/// Rank >= 2 tensors decay; biases, norm gains, LayerScale vectors, tokens
/// do not.
std::vector<OptimParam> make_optim_params(const std::vector<NamedTensor>& named);

class AdamW {
 public:
  AdamW(AdamWConfig cfg, std::vector<OptimParam> params);

  /// param <- param (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps), per param
  /// with lr scaled by lr_scale. Throws NumericError naming the parameter
  /// if a gradient is not finite; no parameter is touched in that case.
  void step(double lr);
  void zero_grad();

  std::int64_t steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }
  std::vector<OptimParam>& params() { return params_; }
  const std::vector<OptimParam>& params() const { return params_; }

  /// Moments as `adam.m.<name>` / `adam.v.<name>`.
  std::vector<NamedTensor> state_tensors() const;
  void load_state(const std::vector<NamedTensor>& tensors, std::int64_t steps);

 private:
  AdamWConfig cfg_;
  std::vector<OptimParam> params_;
  std::vector<Tensor> m_, v_;
  std::int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

struct ScheduleConfig {
  double base_lr = 3e-4;
  int batch_size = 256;
  std::int64_t warmup_steps = 0;
  std::int64_t total_steps = 1;
  double min_lr = 0.0;
  double llrd_start = 1.0;  // equal start/end = fixed decay
  double llrd_end = 1.0;

  void validate() const;
  /// base_lr * batch_size / 256.
  double peak_lr() const;
};

/// Linear warmup from 0 to the peak over warmup_steps, then cosine decay to
/// min_lr at total_steps; min_lr beyond.
double lr_at(std::int64_t step, const ScheduleConfig& sched);

/// d^(n_layers - layer_index) with d = start + progress (end - start).
/// Layer 0 is the patch embedding, n_layers the head.
double llrd_factor(int layer_index, int n_layers, double progress, const ScheduleConfig& sched);

// ---------------------------------------------------------------------------
// EMA
// ---------------------------------------------------------------------------

class Ema {
 public:
  /// Starts from a copy of `initial`.
  Ema(const std::vector<NamedTensor>& initial, double decay = 0.9999);

  /// shadow <- decay * shadow + (1 - decay) * param, matched by position.
  void update(const std::vector<NamedTensor>& params);

  double decay() const { return decay_; }
  const std::vector<NamedTensor>& shadow() const { return shadow_; }
  std::vector<NamedTensor>& shadow() { return shadow_; }

 private:
  double decay_;
  std::vector<NamedTensor> shadow_;
};

// ---------------------------------------------------------------------------
// Checkpoints: "NEPA", u32 version, u32 record count, tensor records,
// u64 metadata length, UTF-8 JSON metadata. Little-endian throughout.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  std::vector<NamedTensor> tensors;
  nlohmann::json meta = nlohmann::json::object();

  /// Tensor by exact name; throws CheckpointError if absent.
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies `prefix + name` entries of `ckpt` into `dst` (shape-checked).
/// Throws CheckpointError for a missing entry, a shape mismatch, or (when
/// `strict`) any checkpoint tensor under `prefix` that `dst` does not name.
void assign_from(const Checkpoint& ckpt, const std::string& prefix, const std::vector<NamedTensor>& dst,
                 bool strict = true);

std::vector<NamedTensor> with_prefix(const std::string& prefix, const std::vector<NamedTensor>& named);

}  // namespace nepa
