#include "nepa/data.hpp"

#include <png.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>

namespace nepa {

Tensor Dataset::images(const std::vector<std::int64_t>& indices) const {
  if (indices.empty()) throw DatasetError("empty batch");
  const Shape& s = (*this)[indices.front()].pixels.shape();
  const auto per = numel(s);
  std::vector<float> out(static_cast<std::size_t>(per) * indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Tensor& px = (*this)[indices[i]].pixels;
    if (px.shape() != s) throw DatasetError("images of different sizes in one batch");
    auto src = px.data<float>();
    std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return Tensor::from_vector({static_cast<std::int64_t>(indices.size()), s[0], s[1], s[2]}, std::move(out));
}

std::vector<int> Dataset::labels(const std::vector<std::int64_t>& indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back((*this)[i].label);
  return out;
}

// ---------------------------------------------------------------------------

std::string to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::disk: return "disk";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
    case ShapeKind::cross: return "cross";
  }
  return "?";
}

void SynthSpec::validate() const {
  if (classes < 1 || classes > 4) throw ConfigError("synth.classes must be in [1, 4]");
  if (image_size < 4) throw ConfigError("synth.image_size must be >= 4");
  if (channels < 1) throw ConfigError("synth.channels must be >= 1");
  if (!(noise_std >= 0)) throw ConfigError("synth.noise_std must be >= 0");
  if (!(position_jitter >= 0 && position_jitter < 0.5)) throw ConfigError("synth.position_jitter must be in [0, 0.5)");
  if (!(scale_min > 0 && scale_min <= scale_max && scale_max <= 0.5))
    throw ConfigError("synth scale range must satisfy 0 < scale_min <= scale_max <= 0.5");
  if (!(rotation_jitter >= 0)) throw ConfigError("synth.rotation_jitter must be >= 0");
  if (!(min_contrast >= 0 && min_contrast < 1)) throw ConfigError("synth.min_contrast must be in [0, 1)");
}

bool shape_contains(ShapeKind kind, double px, double py, double cx, double cy, double half, double rotation) {
  const double dx = px - cx, dy = py - cy;
  const double c = std::cos(rotation), s = std::sin(rotation);
  const double u = c * dx + s * dy;
  const double v = -s * dx + c * dy;
  switch (kind) {
    case ShapeKind::disk: return dx * dx + dy * dy <= half * half;
    case ShapeKind::square: return std::abs(u) <= half && std::abs(v) <= half;
    case ShapeKind::cross: {
      const double arm = half / 3.0;
      return (std::abs(u) <= half && std::abs(v) <= arm) || (std::abs(v) <= half && std::abs(u) <= arm);
    }
    case ShapeKind::triangle: {
      // apex up (negative v), circumradius = half
      const double k = std::sqrt(3.0);
      if (v > half / 2) return false;
      return k * u - v <= half && -k * u - v <= half;
    }
  }
  return false;
}

ImageSample synth_generate(const SynthSpec& spec, std::int64_t index) {
  spec.validate();
  if (index < 0) throw DatasetError("negative sample index");
  Rng rng = Rng::keyed(spec.seed, static_cast<std::uint64_t>(index), 0x5ba9e5ull);
  const int n = spec.image_size, ch = spec.channels;
  const auto kind = static_cast<ShapeKind>(index % spec.classes);

  // Dark background, bright shape; hue is random per channel.
  std::vector<double> bg(static_cast<std::size_t>(ch)), fg(static_cast<std::size_t>(ch));
  const double lo = 0.5 - spec.min_contrast / 2, hi = 0.5 + spec.min_contrast / 2;
  for (auto& b : bg) b = rng.uniform(0.0, lo);
  for (auto& f : fg) f = rng.uniform(hi, 1.0);
  const double half = n * rng.uniform(spec.scale_min, spec.scale_max);
  const double cx = n / 2.0 + n * rng.uniform(-spec.position_jitter, spec.position_jitter);
  const double cy = n / 2.0 + n * rng.uniform(-spec.position_jitter, spec.position_jitter);
  const double rot = rng.uniform(-spec.rotation_jitter, spec.rotation_jitter);

  std::vector<float> px(static_cast<std::size_t>(ch * n * n));
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const bool inside = shape_contains(kind, x + 0.5, y + 0.5, cx, cy, half, rot);
      for (int k = 0; k < ch; ++k) {
        double v = inside ? fg[static_cast<std::size_t>(k)] : bg[static_cast<std::size_t>(k)];
        if (spec.noise_std > 0) v = std::clamp(v + spec.noise_std * rng.normal(), 0.0, 1.0);
        px[static_cast<std::size_t>((k * n + y) * n + x)] = static_cast<float>(v);
      }
    }
  return {Tensor::from_vector({ch, n, n}, std::move(px)), static_cast<int>(index % spec.classes), index};
}

Dataset synth_dataset(const SynthSpec& spec, std::int64_t first, std::int64_t count) {
  Dataset d;
  for (int c = 0; c < spec.classes; ++c) d.class_names.push_back(to_string(static_cast<ShapeKind>(c)));
  d.samples.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) d.samples.push_back(synth_generate(spec, first + i));
  return d;
}

Dataset noise_dataset(std::int64_t count, int channels, int image_size, std::uint64_t seed) {
  Dataset d;
  d.class_names = {"noise"};
  const auto per = static_cast<std::size_t>(channels * image_size * image_size);
  for (std::int64_t i = 0; i < count; ++i) {
    Rng rng = Rng::keyed(seed, static_cast<std::uint64_t>(i), 0x4015eull);
    std::vector<float> px(per);
    for (auto& v : px) v = static_cast<float>(rng.uniform());
    d.samples.push_back({Tensor::from_vector({channels, image_size, image_size}, std::move(px)), 0, i});
  }
  return d;
}

// ---------------------------------------------------------------------------

void AugmentConfig::validate() const {
  if (!(rrc_scale_min > 0 && rrc_scale_min <= rrc_scale_max && rrc_scale_max <= 1))
    throw ConfigError("augment rrc scale must satisfy 0 < min <= max <= 1");
  if (!(mixup_alpha > 0)) throw ConfigError("augment.mixup_alpha must be > 0");
  if (!(cutmix_alpha > 0)) throw ConfigError("augment.cutmix_alpha must be > 0");
  if (!(label_smoothing >= 0 && label_smoothing < 1)) throw ConfigError("augment.label_smoothing must be in [0, 1)");
}

CropBox sample_crop(int height, int width, double scale_min, double scale_max, Rng& rng) {
  const double area = static_cast<double>(height) * width;
  const double log_lo = std::log(3.0 / 4.0), log_hi = std::log(4.0 / 3.0);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(scale_min, scale_max);
    const double ratio = std::exp(rng.uniform(log_lo, log_hi));
    const int w = static_cast<int>(std::lround(std::sqrt(target * ratio)));
    const int h = static_cast<int>(std::lround(std::sqrt(target / ratio)));
    if (w > 0 && h > 0 && w <= width && h <= height) {
      const int top = static_cast<int>(rng.below(static_cast<std::uint64_t>(height - h + 1)));
      const int left = static_cast<int>(rng.below(static_cast<std::uint64_t>(width - w + 1)));
      return {top, left, h, w};
    }
  }
  return {0, 0, height, width};
}

Tensor resize_crop(const Tensor& image, const CropBox& box, int out_size) {
  if (image.rank() != 3) throw ShapeError("resize_crop expects [C, H, W], got " + shape_str(image.shape()));
  const auto c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (box.top < 0 || box.left < 0 || box.height <= 0 || box.width <= 0 || box.top + box.height > h ||
      box.left + box.width > w)
    throw ShapeError("crop box outside image");
  auto src = image.to_vector();
  std::vector<float> out(static_cast<std::size_t>(c * out_size * out_size));
  const double sy = static_cast<double>(box.height) / out_size, sx = static_cast<double>(box.width) / out_size;
  for (int oy = 0; oy < out_size; ++oy) {
    double fy = std::clamp((oy + 0.5) * sy - 0.5, 0.0, box.height - 1.0);
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, box.height - 1);
    const double wy = fy - y0;
    for (int ox = 0; ox < out_size; ++ox) {
      double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0, box.width - 1.0);
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, box.width - 1);
      const double wx = fx - x0;
      for (std::int64_t k = 0; k < c; ++k) {
        auto at = [&](int yy, int xx) {
          return src[static_cast<std::size_t>((k * h + box.top + yy) * w + box.left + xx)];
        };
        const double top = at(y0, x0) * (1 - wx) + at(y0, x1) * wx;
        const double bot = at(y1, x0) * (1 - wx) + at(y1, x1) * wx;
        out[static_cast<std::size_t>((k * out_size + oy) * out_size + ox)] =
            static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return Tensor::from_vector({c, out_size, out_size}, std::move(out));
}

Tensor random_resized_crop(const Tensor& image, Rng& rng, double scale_min, double scale_max, int out_size) {
  if (!(scale_min > 0 && scale_min <= scale_max && scale_max <= 1))
    throw ConfigError("random_resized_crop: scale must satisfy 0 < min <= max <= 1");
  auto box = sample_crop(static_cast<int>(image.dim(1)), static_cast<int>(image.dim(2)), scale_min, scale_max, rng);
  return resize_crop(image, box, out_size);
}

Tensor smooth_labels(const std::vector<int>& labels, double eps, int num_classes) {
  if (!(eps >= 0 && eps < 1)) throw ConfigError("label smoothing must be in [0, 1)");
  const double off = eps / num_classes, on = 1.0 - eps + off;
  std::vector<double> out(labels.size() * static_cast<std::size_t>(num_classes), off);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) throw DatasetError("label out of range");
    out[i * static_cast<std::size_t>(num_classes) + static_cast<std::size_t>(labels[i])] = on;
  }
  return Tensor::from_vector({static_cast<std::int64_t>(labels.size()), num_classes}, std::move(out));
}

namespace {

void require_even(const Tensor& images, const Tensor& targets) {
  if (images.rank() != 4 || targets.rank() != 2 || images.dim(0) != targets.dim(0))
    throw ShapeError("mix: images " + shape_str(images.shape()) + " vs targets " + shape_str(targets.shape()));
  if (images.dim(0) % 2 != 0) throw ConfigError("mixup/cutmix needs an even batch, got " + std::to_string(images.dim(0)));
}

std::vector<double> blend_targets(const Tensor& targets, double lambda) {
  const auto b = targets.dim(0), k = targets.dim(1);
  auto t = targets.to_vector();
  std::vector<double> out(t.size());
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t j = 0; j < k; ++j)
      out[static_cast<std::size_t>(i * k + j)] =
          lambda * t[static_cast<std::size_t>(i * k + j)] + (1 - lambda) * t[static_cast<std::size_t>((b - 1 - i) * k + j)];
  return out;
}

}  // namespace

MixResult apply_mixup(const Tensor& images, const Tensor& targets, double lambda) {
  require_even(images, targets);
  const auto b = images.dim(0);
  const auto per = images.numel() / b;
  auto src = images.to_vector();
  std::vector<double> out(src.size());
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t j = 0; j < per; ++j)
      out[static_cast<std::size_t>(i * per + j)] =
          lambda * src[static_cast<std::size_t>(i * per + j)] + (1 - lambda) * src[static_cast<std::size_t>((b - 1 - i) * per + j)];
  MixResult r;
  r.images = Tensor::from_values(images.shape(), out, images.dtype());
  r.targets = Tensor::from_values(targets.shape(), blend_targets(targets, lambda), targets.dtype());
  r.lambda = lambda;
  return r;
}

MixResult apply_cutmix(const Tensor& images, const Tensor& targets, const CropBox& box) {
  require_even(images, targets);
  const auto b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  auto src = images.to_vector();
  std::vector<double> out = src;
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t k = 0; k < c; ++k)
      for (int y = box.top; y < box.top + box.height; ++y)
        for (int x = box.left; x < box.left + box.width; ++x) {
          const auto at = ((k * h + y) * w + x);
          out[static_cast<std::size_t>((i * c) * h * w + at)] = src[static_cast<std::size_t>(((b - 1 - i) * c) * h * w + at)];
        }
  const double lambda = 1.0 - static_cast<double>(box.height) * box.width / static_cast<double>(h * w);
  MixResult r;
  r.images = Tensor::from_values(images.shape(), out, images.dtype());
  r.targets = Tensor::from_values(targets.shape(), blend_targets(targets, lambda), targets.dtype());
  r.lambda = lambda;
  r.cutmix = true;
  r.box = box;
  return r;
}

CropBox cutmix_box(int height, int width, double lambda, Rng& rng) {
  const double cut = std::sqrt(1.0 - lambda);
  const int ch = static_cast<int>(height * cut), cw = static_cast<int>(width * cut);
  const int cy = static_cast<int>(rng.below(static_cast<std::uint64_t>(height)));
  const int cx = static_cast<int>(rng.below(static_cast<std::uint64_t>(width)));
  const int y0 = std::clamp(cy - ch / 2, 0, height), y1 = std::clamp(cy + ch / 2, 0, height);
  const int x0 = std::clamp(cx - cw / 2, 0, width), x1 = std::clamp(cx + cw / 2, 0, width);
  return {y0, x0, y1 - y0, x1 - x0};
}

MixResult mixup_cutmix(const Tensor& images, const Tensor& targets, const AugmentConfig& cfg, Rng& rng) {
  require_even(images, targets);
  if (!cfg.mixup && !cfg.cutmix) {
    MixResult r;
    r.images = images;
    r.targets = targets;
    return r;
  }
  bool use_cutmix = cfg.cutmix && (!cfg.mixup || rng.uniform() < 0.5);
  if (use_cutmix) {
    const double lam = rng.beta(cfg.cutmix_alpha, cfg.cutmix_alpha);
    auto box = cutmix_box(static_cast<int>(images.dim(2)), static_cast<int>(images.dim(3)), lam, rng);
    return apply_cutmix(images, targets, box);
  }
  return apply_mixup(images, targets, rng.beta(cfg.mixup_alpha, cfg.mixup_alpha));
}

// ---------------------------------------------------------------------------

namespace {

Tensor load_png(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw DatasetError("cannot decode PNG " + path.string() + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw DatasetError("cannot decode PNG " + path.string() + ": " + msg);
  }
  const int h = static_cast<int>(img.height), w = static_cast<int>(img.width);
  std::vector<float> px(static_cast<std::size_t>(3 * h * w));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < 3; ++k)
        px[static_cast<std::size_t>((k * h + y) * w + x)] = buf[static_cast<std::size_t>((y * w + x) * 3 + k)] / 255.0f;
  return Tensor::from_vector({3, h, w}, std::move(px));
}

// P6 header tokens, skipping '#' comments.
std::string ppm_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

Tensor load_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (ppm_token(in) != "P6") throw DatasetError("not a binary PPM: " + path.string());
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(ppm_token(in));
    h = std::stoi(ppm_token(in));
    maxval = std::stoi(ppm_token(in));
  } catch (const std::exception&) {
    throw DatasetError("bad PPM header: " + path.string());
  }
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) throw DatasetError("unsupported PPM header: " + path.string());
  std::vector<unsigned char> buf(static_cast<std::size_t>(w * h * 3));
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size())) throw DatasetError("truncated PPM: " + path.string());
  std::vector<float> px(buf.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < 3; ++k)
        px[static_cast<std::size_t>((k * h + y) * w + x)] =
            static_cast<float>(buf[static_cast<std::size_t>((y * w + x) * 3 + k)]) / static_cast<float>(maxval);
  return Tensor::from_vector({3, h, w}, std::move(px));
}

}  // namespace

Tensor load_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open " + path.string());
  char magic[8] = {};
  in.read(magic, 8);
  if (in.gcount() >= 2 && magic[0] == 'P' && magic[1] == '6') return load_ppm(path);
  if (in.gcount() == 8 && png_sig_cmp(reinterpret_cast<png_const_bytep>(magic), 0, 8) == 0) return load_png(path);
  throw DatasetError("unrecognised image format: " + path.string());
}

void save_png(const Tensor& image, const std::filesystem::path& path) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3))
    throw ShapeError("save_png expects [1|3, H, W], got " + shape_str(image.shape()));
  const auto c = image.dim(0), h = image.dim(1), w = image.dim(2);
  auto v = image.to_vector();
  std::vector<unsigned char> buf(static_cast<std::size_t>(c * h * w));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t k = 0; k < c; ++k)
        buf[static_cast<std::size_t>((y * w + x) * c + k)] = static_cast<unsigned char>(
            std::lround(std::clamp(v[static_cast<std::size_t>((k * h + y) * w + x)], 0.0, 1.0) * 255.0));
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr))
    throw DatasetError("cannot write PNG " + path.string() + ": " + img.message);
}

Dataset folder_load(const std::filesystem::path& root, int resize) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw DatasetError("dataset root is not a directory: " + root.string());
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw DatasetError("no class directories under " + root.string());

  Dataset d;
  Shape expected;
  for (std::size_t label = 0; label < class_dirs.size(); ++label) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(class_dirs[label]))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DatasetError("empty class directory " + class_dirs[label].string());
    d.class_names.push_back(class_dirs[label].filename().string());
    for (const auto& f : files) {
      Tensor px;
      try {
        px = load_image(f);
      } catch (const DatasetError& e) {
        spdlog::warn("skipping {}: {}", f.string(), e.what());
        ++d.skipped;
        continue;
      }
      if (resize > 0) {
        px = resize_crop(px, {0, 0, static_cast<int>(px.dim(1)), static_cast<int>(px.dim(2))}, resize);
      } else if (expected.empty()) {
        expected = px.shape();
      } else if (px.shape() != expected) {
        throw DatasetError("image " + f.string() + " is " + shape_str(px.shape()) + ", expected " +
                           shape_str(expected) + " (set a resize size)");
      }
      d.samples.push_back({px, static_cast<int>(label), d.size()});
    }
  }
  return d;
}

void export_folder(const Dataset& data, const std::filesystem::path& root) {
  for (const auto& name : data.class_names) std::filesystem::create_directories(root / name);
  char buf[32];
  for (const auto& s : data.samples) {
    std::snprintf(buf, sizeof buf, "%08lld.png", static_cast<long long>(s.id));
    save_png(s.pixels, root / data.class_names[static_cast<std::size_t>(s.label)] / buf);
  }
}

std::vector<std::vector<std::int64_t>> batch_iter(std::int64_t n, int batch_size, std::uint64_t seed,
                                                  std::int64_t epoch, bool keep_partial) {
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::keyed(seed, static_cast<std::uint64_t>(epoch), 0xba7c4ull);
  for (std::int64_t i = n - 1; i > 0; --i)
    std::swap(order[static_cast<std::size_t>(i)], order[rng.below(static_cast<std::uint64_t>(i + 1))]);
  std::vector<std::vector<std::int64_t>> out;
  for (std::int64_t s = 0; s < n; s += batch_size) {
    if (s + batch_size > n && !keep_partial) break;
    out.emplace_back(order.begin() + s, order.begin() + std::min<std::int64_t>(n, s + batch_size));
  }
  return out;
}

std::vector<std::vector<std::int64_t>> sequential_batches(std::int64_t n, int batch_size) {
  std::vector<std::vector<std::int64_t>> out;
  for (std::int64_t s = 0; s < n; s += batch_size) {
    out.emplace_back();
    for (std::int64_t i = s; i < std::min<std::int64_t>(n, s + batch_size); ++i) out.back().push_back(i);
  }
  return out;
}

}  // namespace nepa
