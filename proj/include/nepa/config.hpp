#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "nepa/backbone.hpp"
#include "nepa/data.hpp"
#include "nepa/objective.hpp"
#include "nepa/optim.hpp"

namespace nepa {

/// Thrown for invalid documents; `path` is the offending field, e.g.
/// "pretrain.batch_size".
class ConfigFieldError : public ConfigError {
 public:
  ConfigFieldError(std::string path, const std::string& message)
      : ConfigError(path + ": " + message), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

struct PretrainConfig {
  BackboneConfig backbone;
  ObjectiveConfig objective;
  AdamWConfig adamw{0.9, 0.95, 1e-8, 0.05};
  ScheduleConfig schedule{3e-4, 64, 100, 3000, 0.0, 1.0, 1.0};
  bool rrc = true;
  double rrc_scale_min = 0.2;
  double rrc_scale_max = 1.0;
  bool normalize_pixels = true;
  double ema_decay = 0.9999;
  std::int64_t checkpoint_every = 0;  // 0: final checkpoint only
  std::uint64_t seed = 0;
  DType dtype = DType::f32;

  void validate() const;
};

struct FinetuneConfig {
  AttentionMode attention_mode = AttentionMode::bidirectional;
  bool freeze_patch_embed = true;
  int epochs = 5;
  int batch_size = 64;
  int warmup_epochs = 1;
  double base_lr = 1e-3;
  double min_lr = 1e-6;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double llrd_start = 0.35;
  double llrd_end = 1.0;
  double drop_path_rate = 0.0;  // accepted, must stay 0
  double head_init_std = 0.01;
  bool use_ema_weights = true;  // start from the EMA copy of the checkpoint
  AugmentConfig augment{false, 0.2, 1.0, true, 0.8, true, 1.0, 0.1};
  std::uint64_t seed = 0;

  void validate() const;
};

enum class Pooling { last, avg };
std::string to_string(Pooling p);

struct ProbeConfig {
  int epochs = 30;
  int batch_size = 256;
  double lr = 0.01;
  double weight_decay = 0.0;
  bool standardize = true;  // feature standardisation from train statistics
  std::uint64_t seed = 0;

  void validate() const;
};

enum class DataSource { synth, folder, noise };

struct DataConfig {
  DataSource source = DataSource::synth;
  SynthSpec synth;
  std::int64_t train_size = 8000;
  std::int64_t test_size = 2000;
  std::string train_root, test_root;  // folder source
  int resize = 0;

  void validate() const;
};

struct AnalyzeConfig {
  std::int64_t image_index = 0;  // test-split sample
  std::vector<int> queries{0, 5, 10};
  bool use_ema_weights = true;

  void validate() const;
};

struct GradcheckConfig {
  int dim = 8;
  int depth = 2;
  int heads = 2;
  double h = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
};

struct AblateConfig {
  std::int64_t steps = 500;
  int finetune_epochs = 2;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  std::string checkpoint;  // finetune / probe / analyze input
  DataConfig data;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  ProbeConfig probe;
  AnalyzeConfig analyze;
  GradcheckConfig gradcheck;
  AblateConfig ablate;

  void validate() const;
  /// Copies the top-level seed into the sub-configs.
  void propagate_seed();
};

nlohmann::json to_json(const BackboneConfig& c);
nlohmann::json to_json(const ObjectiveConfig& c);
nlohmann::json to_json(const RunConfig& c);

/// Fills `out` from `j`, keeping defaults for absent keys; rejects unknown
/// keys and wrong types with ConfigFieldError. `path` prefixes field names.
void from_json(const nlohmann::json& j, BackboneConfig& out, const std::string& path = "backbone");
void from_json(const nlohmann::json& j, ObjectiveConfig& out, const std::string& path = "objective");
void from_json(const nlohmann::json& j, RunConfig& out);

/// Parses, fills defaults, validates. Throws ConfigError (or
/// ConfigFieldError) on any problem.
RunConfig load_run_config(const std::filesystem::path& path);
RunConfig parse_run_config(const std::string& text);

}  // namespace nepa
