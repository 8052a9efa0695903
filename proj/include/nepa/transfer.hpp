#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nepa/backbone.hpp"
#include "nepa/config.hpp"
#include "nepa/data.hpp"

namespace nepa {

struct ClassifierHead {
  Tensor weight;  // [dim, K]
  Tensor bias;    // [K]

  static ClassifierHead init(int dim, int classes, double std, Rng& rng, DType dtype);
  std::vector<NamedTensor> named() const;
};

/// h_out[:, T-1] (last) or the mean over positions (avg), [B, dim].
Tensor pooled_features(const Tensor& images, const BackboneParams& params, const BackboneConfig& cfg,
                       Pooling pooling = Pooling::last);

/// Linear head on the last final-normed embedding, [B, K].
Tensor classify(const Tensor& images, const BackboneParams& params, const BackboneConfig& cfg,
                const ClassifierHead& head);

struct MetricRow {
  int epoch = 0;
  std::string split;
  std::string metric;
  double value = 0;
};

void write_metric_csv(const std::vector<MetricRow>& rows, const std::filesystem::path& path);

/// Backbone plus the pixel convention it was trained with.
struct Pretrained {
  BackboneConfig config;
  BackboneParams params;
  bool normalize_pixels = true;
};

/// Reads a pretrain or finetune checkpoint (EMA weights when asked and present).
Pretrained load_pretrained(const std::filesystem::path& path, bool ema);

struct FinetuneResult {
  BackboneConfig config;  // with the fine-tune attention mode
  BackboneParams params;
  ClassifierHead head;
  std::vector<MetricRow> trace;
  double test_accuracy = 0;  // after the last epoch (0 epochs: fresh head)
};

/// End-to-end fine-tuning with LLRD (patch embedding = layer 0, block i =
/// layer i + 1, final norm and head = layer depth + 1), optional frozen patch
/// embedding, label smoothing and mixup/cutmix. `pretrained` is not modified.
FinetuneResult finetune(const Pretrained& pretrained, const Dataset& train, const Dataset& test,
                        const FinetuneConfig& cfg);

/// Fraction of `data` classified correctly, evaluated in batches.
double evaluate_accuracy(const BackboneParams& params, const BackboneConfig& cfg, const ClassifierHead& head,
                         const Dataset& data, bool normalize, int batch_size = 256);

struct ProbeResult {
  Pooling pooling = Pooling::last;
  double train_accuracy = 0;
  double test_accuracy = 0;
};

/// Trains only a linear classifier on frozen features.
ProbeResult linear_probe(const Pretrained& backbone, const Dataset& train, const Dataset& test, Pooling pooling,
                         const ProbeConfig& cfg);

/// Checkpoint of a fine-tuned model: model.* backbone, head.*, metadata.
Checkpoint finetune_checkpoint(const FinetuneResult& r, bool normalize_pixels);

}  // namespace nepa
