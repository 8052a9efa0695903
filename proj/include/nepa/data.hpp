#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "nepa/rng.hpp"
#include "nepa/tensor.hpp"

namespace nepa {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ImageSample {
  Tensor pixels;  // [C, H, W] in [0, 1], f32
  int label = 0;
  std::int64_t id = 0;
};

class Dataset {
 public:
  std::vector<ImageSample> samples;
  std::vector<std::string> class_names;
  std::int64_t skipped = 0;  // undecodable files seen by folder_load

  std::int64_t size() const { return static_cast<std::int64_t>(samples.size()); }
  int num_classes() const { return static_cast<int>(class_names.size()); }
  const ImageSample& operator[](std::int64_t i) const { return samples[static_cast<std::size_t>(i)]; }

  /// Stacks the selected samples into [B, C, H, W] (f32).
  Tensor images(const std::vector<std::int64_t>& indices) const;
  std::vector<int> labels(const std::vector<std::int64_t>& indices) const;
};

// ---------------------------------------------------------------------------
// Synthetic shapes
// ---------------------------------------------------------------------------

enum class ShapeKind { disk, square, triangle, cross };
std::string to_string(ShapeKind kind);

struct SynthSpec {
  int classes = 4;  // first `classes` of disk, square, triangle, cross
  int image_size = 32;
  int channels = 3;
  double noise_std = 0.05;
  double position_jitter = 0.2;  // max centre offset, fraction of image size
  double scale_min = 0.25;       // half-extent, fraction of image size
  double scale_max = 0.4;
  double rotation_jitter = 0.5;  // radians, uniform in [-r, r]
  double min_contrast = 0.3;     // gap between the background and shape colour ranges
  std::uint64_t seed = 0;

  void validate() const;
};

/// Class = index mod classes. Every random choice comes from a stream keyed
/// on (seed, index), so samples are independent of generation order.
ImageSample synth_generate(const SynthSpec& spec, std::int64_t index);

/// Samples [first, first + count).
Dataset synth_dataset(const SynthSpec& spec, std::int64_t first, std::int64_t count);

/// i.i.d. uniform pixels, label 0.
Dataset noise_dataset(std::int64_t count, int channels, int image_size, std::uint64_t seed);

/// True where a pixel centre lies inside the shape. Centre and half-extent in
/// pixels, rotation in radians.
bool shape_contains(ShapeKind kind, double px, double py, double cx, double cy, double half,
                    double rotation);

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentConfig {
  bool rrc = true;
  double rrc_scale_min = 0.2;
  double rrc_scale_max = 1.0;
  bool mixup = true;
  double mixup_alpha = 0.8;
  bool cutmix = true;
  double cutmix_alpha = 1.0;
  double label_smoothing = 0.1;

  void validate() const;
};

struct CropBox {
  int top = 0, left = 0, height = 0, width = 0;
  bool operator==(const CropBox&) const = default;
};

/// Area fraction uniform in [scale_min, scale_max], log-uniform aspect ratio
/// in [3/4, 4/3], up to 10 attempts; falls back to the whole image.
CropBox sample_crop(int height, int width, double scale_min, double scale_max, Rng& rng);

/// Bilinear resize of the box to out x out with half-pixel centres:
/// src = top + (dst + 0.5) * box_h / out - 0.5, clamped to the box.
Tensor resize_crop(const Tensor& image, const CropBox& box, int out_size);

Tensor random_resized_crop(const Tensor& image, Rng& rng, double scale_min, double scale_max,
                           int out_size);

/// Row i: 1 - eps + eps/K at the label, eps/K elsewhere. [B, K] f64.
Tensor smooth_labels(const std::vector<int>& labels, double eps, int num_classes);

struct MixResult {
  Tensor images;   // [B, C, H, W]
  Tensor targets;  // [B, K]
  double lambda = 1.0;
  bool cutmix = false;
  CropBox box;  // pasted region when cutmix
};

/// Partner of row i is row B-1-i.
MixResult apply_mixup(const Tensor& images, const Tensor& targets, double lambda);
/// Pastes `box` from the partner; lambda becomes the kept area fraction.
MixResult apply_cutmix(const Tensor& images, const Tensor& targets, const CropBox& box);
/// Box for a cut ratio sqrt(1 - lambda) centred uniformly, clipped.
CropBox cutmix_box(int height, int width, double lambda, Rng& rng);

/// One of mixup / cutmix (0.5 each when both are on), lambda ~ Beta(a, a).
MixResult mixup_cutmix(const Tensor& images, const Tensor& targets, const AugmentConfig& cfg,
                       Rng& rng);

// ---------------------------------------------------------------------------
// Files and batching
// ---------------------------------------------------------------------------

/// root/<class>/<file>, PNG or binary PPM (P6). Classes and files in
/// lexicographic order. Undecodable files are skipped with a warning; an
/// empty class directory is an error. All images must share one size unless
/// `resize` > 0, in which case every image is resized to resize x resize.
Dataset folder_load(const std::filesystem::path& root, int resize = 0);

/// Writes root/<class>/<id>.png.
void export_folder(const Dataset& data, const std::filesystem::path& root);

/// Decodes one PNG or PPM file to [3, H, W]; throws DatasetError.
Tensor load_image(const std::filesystem::path& path);
void save_png(const Tensor& image, const std::filesystem::path& path);

/// Batches of a permutation that is a pure function of (seed, epoch). The
/// last partial batch is dropped unless `keep_partial`.
std::vector<std::vector<std::int64_t>> batch_iter(std::int64_t n, int batch_size, std::uint64_t seed,
                                                  std::int64_t epoch, bool keep_partial = false);

/// In-order batches, last one partial (for evaluation).
std::vector<std::vector<std::int64_t>> sequential_batches(std::int64_t n, int batch_size);

}  // namespace nepa
