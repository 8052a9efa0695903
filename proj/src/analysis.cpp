#include "nepa/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "nepa/ops.hpp"

namespace nepa {

namespace {

Tensor single(const Tensor& image) {
  if (image.rank() == 3) return reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
  if (image.rank() == 4 && image.dim(0) == 1) return image;
  throw ShapeError("analysis expects one image [C, H, W], got " + shape_str(image.shape()));
}

void check_query(int query, const BackboneConfig& cfg) {
  if (query < 0 || query >= cfg.num_patches())
    throw ConfigError("query " + std::to_string(query) + " outside [0, " + std::to_string(cfg.num_patches()) + ")");
}

AnalysisMap attention_row(const Tensor& probs, const BackboneConfig& cfg, int layer, int head, int query) {
  const auto t = probs.dim(-1);
  auto all = probs.to_vector();
  const auto base = static_cast<std::size_t>((static_cast<std::int64_t>(head) * t + query) * t);
  std::vector<double> row(all.begin() + static_cast<std::ptrdiff_t>(base),
                          all.begin() + static_cast<std::ptrdiff_t>(base + static_cast<std::size_t>(t)));
  AnalysisMap m;
  m.grid = Tensor::from_vector({cfg.grid_rows(), cfg.grid_cols()}, std::move(row));
  m.kind = MapKind::attention;
  m.query = query;
  m.layer = layer;
  m.head = head;
  return m;
}

}  // namespace

std::vector<AnalysisMap> attention_maps(const Tensor& image, const BackboneParams& params, const BackboneConfig& cfg,
                                        int query) {
  check_query(query, cfg);
  auto seq = forward(single(image), params, cfg, true);
  std::vector<AnalysisMap> out;
  for (int l = 0; l < static_cast<int>(seq.attention.size()); ++l)
    for (int h = 0; h < cfg.heads; ++h) out.push_back(attention_row(seq.attention[static_cast<std::size_t>(l)], cfg, l, h, query));
  return out;
}

AnalysisMap attention_map(const Tensor& image, const BackboneParams& params, const BackboneConfig& cfg, int layer,
                          int head, int query) {
  check_query(query, cfg);
  if (layer < 0 || layer >= cfg.depth) throw ConfigError("layer " + std::to_string(layer) + " out of range");
  if (head < 0 || head >= cfg.heads) throw ConfigError("head " + std::to_string(head) + " out of range");
  auto seq = forward(single(image), params, cfg, true);
  return attention_row(seq.attention[static_cast<std::size_t>(layer)], cfg, layer, head, query);
}

AnalysisMap similarity_map(const Tensor& image, const BackboneParams& params, const BackboneConfig& cfg, int query) {
  check_query(query, cfg);
  auto seq = forward(single(image), params, cfg);
  const auto t = seq.z.dim(1), d = seq.z.dim(2);
  auto z = l2_normalize(seq.z).to_vector();
  auto h = l2_normalize(seq.h_out).to_vector();
  std::vector<double> sims(static_cast<std::size_t>(t));
  for (std::int64_t j = 0; j < t; ++j) {
    double dot = 0;
    for (std::int64_t k = 0; k < d; ++k)
      dot += h[static_cast<std::size_t>(query * d + k)] * z[static_cast<std::size_t>(j * d + k)];
    sims[static_cast<std::size_t>(j)] = std::clamp(dot, -1.0, 1.0);
  }
  AnalysisMap m;
  m.grid = Tensor::from_vector({cfg.grid_rows(), cfg.grid_cols()}, std::move(sims));
  m.kind = MapKind::similarity;
  m.query = query;
  return m;
}

std::string map_filename(const AnalysisMap& map) {
  if (map.kind == MapKind::similarity) return "sim_Q" + std::to_string(map.query) + ".pgm";
  return "attn_L" + std::to_string(map.layer) + "_H" + std::to_string(map.head) + "_Q" + std::to_string(map.query) +
         ".pgm";
}

void export_pgm(const AnalysisMap& map, const std::filesystem::path& path) {
  const auto rows = map.grid.dim(0), cols = map.grid.dim(1);
  auto v = map.grid.to_vector();
  double lo = -1.0, hi = 1.0;
  if (map.kind == MapKind::attention) {
    lo = *std::min_element(v.begin(), v.end());
    hi = *std::max_element(v.begin(), v.end());
  }
  std::string bytes(v.size(), '\0');
  for (std::size_t i = 0; i < v.size(); ++i) {
    double p = hi > lo ? (std::clamp(v[i], lo, hi) - lo) / (hi - lo) * 255.0 : 128.0;
    bytes[i] = static_cast<char>(static_cast<std::uint8_t>(std::lround(p)));
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << cols << ' ' << rows << "\n255\n";
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Pgm read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string magic;
  Pgm p;
  in >> magic >> p.width >> p.height >> p.maxval;
  if (magic != "P5" || !in || p.width <= 0 || p.height <= 0 || p.maxval <= 0 || p.maxval > 255)
    throw std::runtime_error("not an 8-bit P5 file: " + path.string());
  in.get();  // single whitespace before the raster
  p.pixels.resize(static_cast<std::size_t>(p.width * p.height));
  in.read(reinterpret_cast<char*>(p.pixels.data()), static_cast<std::streamsize>(p.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(p.pixels.size()))
    throw std::runtime_error("truncated PGM raster: " + path.string());
  return p;
}

void export_csv(const std::vector<MetricRow>& rows, const std::filesystem::path& path) { write_metric_csv(rows, path); }

}  // namespace nepa
