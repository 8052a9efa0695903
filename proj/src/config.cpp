#include "nepa/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace nepa {

using nlohmann::json;

namespace {

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

template <class E>
E parse_enum(const json& v, const std::string& path, std::initializer_list<std::pair<const char*, E>> options) {
  if (!v.is_string()) throw ConfigFieldError(path, "expected a string");
  const auto s = v.get<std::string>();
  std::string allowed;
  for (const auto& [name, value] : options) {
    if (s == name) return value;
    allowed += allowed.empty() ? name : std::string(", ") + name;
  }
  throw ConfigFieldError(path, "unknown value '" + s + "' (allowed: " + allowed + ")");
}

// Reads the fields of one JSON object and rejects anything left unread.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigFieldError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  const json* find(const char* key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    seen_.insert(key);
    return &*it;
  }

  std::string at(const char* key) const { return join(path_, key); }

  void get(const char* key, bool& out) {
    if (auto v = find(key)) {
      if (!v->is_boolean()) throw ConfigFieldError(at(key), "expected true/false");
      out = v->get<bool>();
    }
  }
  void get(const char* key, int& out) {
    if (auto v = find(key)) {
      if (!v->is_number_integer()) throw ConfigFieldError(at(key), "expected an integer");
      const auto x = v->get<std::int64_t>();
      if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max())
        throw ConfigFieldError(at(key), "integer out of range");
      out = static_cast<int>(x);
    }
  }
  void get(const char* key, std::int64_t& out) {
    if (auto v = find(key)) {
      if (!v->is_number_integer()) throw ConfigFieldError(at(key), "expected an integer");
      out = v->get<std::int64_t>();
    }
  }
  void get(const char* key, std::uint64_t& out) {
    if (auto v = find(key)) {
      if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() && v->get<std::int64_t>() < 0))
        throw ConfigFieldError(at(key), "expected a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void get(const char* key, double& out) {
    if (auto v = find(key)) {
      if (!v->is_number()) throw ConfigFieldError(at(key), "expected a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, std::string& out) {
    if (auto v = find(key)) {
      if (!v->is_string()) throw ConfigFieldError(at(key), "expected a string");
      out = v->get<std::string>();
    }
  }
  void get(const char* key, std::vector<int>& out) {
    if (auto v = find(key)) {
      if (!v->is_array()) throw ConfigFieldError(at(key), "expected an array of integers");
      out.clear();
      for (std::size_t i = 0; i < v->size(); ++i) {
        if (!(*v)[i].is_number_integer())
          throw ConfigFieldError(at(key) + "[" + std::to_string(i) + "]", "expected an integer");
        out.push_back((*v)[i].get<int>());
      }
    }
  }
  void get(const char* key, DType& out) {
    if (auto v = find(key)) out = parse_enum<DType>(*v, at(key), {{"f32", DType::f32}, {"f64", DType::f64}});
  }
  void get(const char* key, RopeMode& out) {
    if (auto v = find(key))
      out = parse_enum<RopeMode>(*v, at(key), {{"1d", RopeMode::one_d}, {"2d", RopeMode::axial_2d}});
  }
  void get(const char* key, MlpKind& out) {
    if (auto v = find(key))
      out = parse_enum<MlpKind>(*v, at(key), {{"gelu", MlpKind::gelu}, {"swiglu", MlpKind::swiglu}});
  }
  void get(const char* key, AttentionMode& out) {
    if (auto v = find(key))
      out = parse_enum<AttentionMode>(
          *v, at(key), {{"causal", AttentionMode::causal}, {"bidirectional", AttentionMode::bidirectional}});
  }
  void get(const char* key, DataSource& out) {
    if (auto v = find(key))
      out = parse_enum<DataSource>(*v, at(key),
                                   {{"synth", DataSource::synth}, {"folder", DataSource::folder}, {"noise", DataSource::noise}});
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.contains(it.key())) throw ConfigFieldError(join(path_, it.key()), "unknown key");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

// Wraps validate() so the message carries the section path.
template <class F>
void validated(const std::string& path, F&& f) {
  try {
    f();
  } catch (const ConfigFieldError&) {
    throw;
  } catch (const ConfigError& e) {
    throw ConfigFieldError(path, e.what());
  }
}

const char* dtype_str(DType d) { return d == DType::f32 ? "f32" : "f64"; }
const char* rope_str(RopeMode m) { return m == RopeMode::one_d ? "1d" : "2d"; }
const char* source_str(DataSource s) {
  switch (s) {
    case DataSource::synth: return "synth";
    case DataSource::folder: return "folder";
    case DataSource::noise: return "noise";
  }
  return "?";
}

json augment_json(const AugmentConfig& a) {
  return {{"mixup", a.mixup},         {"mixup_alpha", a.mixup_alpha}, {"cutmix", a.cutmix},
          {"cutmix_alpha", a.cutmix_alpha}, {"label_smoothing", a.label_smoothing}};
}

void read_augment(const json& j, AugmentConfig& a, const std::string& path) {
  Fields f(j, path);
  f.get("mixup", a.mixup);
  f.get("mixup_alpha", a.mixup_alpha);
  f.get("cutmix", a.cutmix);
  f.get("cutmix_alpha", a.cutmix_alpha);
  f.get("label_smoothing", a.label_smoothing);
  f.finish();
}

}  // namespace

std::string to_string(Pooling p) { return p == Pooling::last ? "last" : "avg"; }

// ---------------------------------------------------------------------------

void PretrainConfig::validate() const {
  backbone.validate();
  objective.validate();
  schedule.validate();
  if (!(ema_decay >= 0 && ema_decay <= 1)) throw ConfigError("ema_decay must be in [0, 1]");
  if (!(rrc_scale_min > 0 && rrc_scale_min <= rrc_scale_max && rrc_scale_max <= 1))
    throw ConfigError("rrc scale must satisfy 0 < min <= max <= 1");
  if (rrc && backbone.width() != backbone.height()) throw ConfigError("random resized crop needs square images");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (!(adamw.beta1 >= 0 && adamw.beta1 < 1 && adamw.beta2 >= 0 && adamw.beta2 < 1))
    throw ConfigError("betas must be in [0, 1)");
  if (!(adamw.weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
  if (objective.mask_ratio > 0 && static_cast<int>(objective.mask_ratio * backbone.num_patches()) >= backbone.num_patches())
    throw ConfigError("mask_ratio masks every patch");
}

void FinetuneConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if ((augment.mixup || augment.cutmix) && batch_size % 2 != 0)
    throw ConfigError("batch_size must be even when mixup/cutmix is on");
  if (warmup_epochs < 0 || warmup_epochs > std::max(epochs, 0)) throw ConfigError("warmup_epochs must be in [0, epochs]");
  if (!(base_lr >= 0) || !(min_lr >= 0)) throw ConfigError("learning rates must be >= 0");
  if (!(llrd_start > 0) || !(llrd_end > 0)) throw ConfigError("layer decay rates must be > 0");
  if (drop_path_rate != 0.0) throw ConfigError("drop_path_rate is not supported (must be 0)");
  if (!(head_init_std >= 0)) throw ConfigError("head_init_std must be >= 0");
  augment.validate();
}

void ProbeConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (!(lr > 0)) throw ConfigError("lr must be > 0");
}

void DataConfig::validate() const {
  if (train_size <= 0 || test_size < 0) throw ConfigError("dataset sizes must be positive");
  if (source == DataSource::synth) synth.validate();
  if (source == DataSource::folder && train_root.empty()) throw ConfigError("folder source needs train_root");
  if (resize < 0) throw ConfigError("resize must be >= 0");
}

void AnalyzeConfig::validate() const {
  if (image_index < 0) throw ConfigError("image_index must be >= 0");
  for (int q : queries)
    if (q < 0) throw ConfigError("queries must be >= 0");
}

void RunConfig::validate() const {
  validated("data", [&] { data.validate(); });
  validated("backbone", [&] { pretrain.backbone.validate(); });
  validated("objective", [&] { pretrain.objective.validate(); });
  validated("pretrain", [&] { pretrain.validate(); });
  validated("finetune", [&] { finetune.validate(); });
  validated("probe", [&] { probe.validate(); });
  validated("analyze", [&] { analyze.validate(); });
  if (gradcheck.dim <= 0 || gradcheck.depth <= 0 || gradcheck.heads <= 0 || gradcheck.dim % gradcheck.heads != 0 ||
      (gradcheck.dim / gradcheck.heads) % 2 != 0)
    throw ConfigFieldError("gradcheck", "dim must split into heads of even width");
  if (!(gradcheck.h > 0) || !(gradcheck.tolerance > 0)) throw ConfigFieldError("gradcheck", "h and tolerance must be > 0");
  if (ablate.steps <= 0) throw ConfigFieldError("ablate.steps", "must be positive");
  if (ablate.finetune_epochs < 0) throw ConfigFieldError("ablate.finetune_epochs", "must be >= 0");
  if (data.source == DataSource::synth) {
    if (data.synth.image_size != pretrain.backbone.height() || data.synth.image_size != pretrain.backbone.width())
      throw ConfigFieldError("data.synth.image_size", "must match backbone.image_size");
    if (data.synth.channels != pretrain.backbone.channels)
      throw ConfigFieldError("data.synth.channels", "must match backbone.channels");
  }
  if (output_dir.empty()) throw ConfigFieldError("output_dir", "must not be empty");
}

void RunConfig::propagate_seed() {
  pretrain.seed = seed;
  finetune.seed = seed;
  probe.seed = seed;
  data.synth.seed = seed;
  gradcheck.seed = seed;
}

// ---------------------------------------------------------------------------

json to_json(const BackboneConfig& c) {
  return {{"image_size", c.image_size},
          {"image_width", c.image_width},
          {"patch_size", c.patch_size},
          {"channels", c.channels},
          {"dim", c.dim},
          {"depth", c.depth},
          {"heads", c.heads},
          {"mlp_ratio", c.mlp_ratio},
          {"use_rope", c.use_rope},
          {"rope_mode", rope_str(c.rope_mode)},
          {"use_layerscale", c.use_layerscale},
          {"layerscale_init", c.layerscale_init},
          {"use_qknorm", c.use_qknorm},
          {"mlp_kind", to_string(c.mlp_kind)},
          {"use_learnable_posembed", c.use_learnable_posembed},
          {"attention_mode", to_string(c.attention_mode)}};
}

json to_json(const ObjectiveConfig& c) {
  return {{"shift", c.shift}, {"stop_grad", c.stop_grad}, {"mask_ratio", c.mask_ratio}};
}

json to_json(const RunConfig& c) {
  const auto& p = c.pretrain;
  const auto& f = c.finetune;
  const auto& s = c.data.synth;
  return {
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"checkpoint", c.checkpoint},
      {"data",
       {{"source", source_str(c.data.source)},
        {"train_size", c.data.train_size},
        {"test_size", c.data.test_size},
        {"train_root", c.data.train_root},
        {"test_root", c.data.test_root},
        {"resize", c.data.resize},
        {"synth",
         {{"classes", s.classes},
          {"image_size", s.image_size},
          {"channels", s.channels},
          {"noise_std", s.noise_std},
          {"position_jitter", s.position_jitter},
          {"scale_min", s.scale_min},
          {"scale_max", s.scale_max},
          {"rotation_jitter", s.rotation_jitter},
          {"min_contrast", s.min_contrast}}}}},
      {"backbone", to_json(p.backbone)},
      {"objective", to_json(p.objective)},
      {"pretrain",
       {{"steps", p.schedule.total_steps},
        {"warmup_steps", p.schedule.warmup_steps},
        {"batch_size", p.schedule.batch_size},
        {"base_lr", p.schedule.base_lr},
        {"min_lr", p.schedule.min_lr},
        {"beta1", p.adamw.beta1},
        {"beta2", p.adamw.beta2},
        {"eps", p.adamw.eps},
        {"weight_decay", p.adamw.weight_decay},
        {"ema_decay", p.ema_decay},
        {"rrc", p.rrc},
        {"rrc_scale_min", p.rrc_scale_min},
        {"rrc_scale_max", p.rrc_scale_max},
        {"normalize_pixels", p.normalize_pixels},
        {"checkpoint_every", p.checkpoint_every},
        {"dtype", dtype_str(p.dtype)}}},
      {"finetune",
       {{"attention_mode", to_string(f.attention_mode)},
        {"freeze_patch_embed", f.freeze_patch_embed},
        {"epochs", f.epochs},
        {"batch_size", f.batch_size},
        {"warmup_epochs", f.warmup_epochs},
        {"base_lr", f.base_lr},
        {"min_lr", f.min_lr},
        {"weight_decay", f.weight_decay},
        {"beta1", f.beta1},
        {"beta2", f.beta2},
        {"llrd_start", f.llrd_start},
        {"llrd_end", f.llrd_end},
        {"drop_path_rate", f.drop_path_rate},
        {"head_init_std", f.head_init_std},
        {"use_ema_weights", f.use_ema_weights},
        {"augment", augment_json(f.augment)}}},
      {"probe",
       {{"epochs", c.probe.epochs},
        {"batch_size", c.probe.batch_size},
        {"lr", c.probe.lr},
        {"weight_decay", c.probe.weight_decay},
        {"standardize", c.probe.standardize}}},
      {"analyze",
       {{"image_index", c.analyze.image_index},
        {"queries", c.analyze.queries},
        {"use_ema_weights", c.analyze.use_ema_weights}}},
      {"gradcheck",
       {{"dim", c.gradcheck.dim},
        {"depth", c.gradcheck.depth},
        {"heads", c.gradcheck.heads},
        {"h", c.gradcheck.h},
        {"tolerance", c.gradcheck.tolerance}}},
      {"ablate",
       {{"steps", c.ablate.steps}, {"finetune_epochs", c.ablate.finetune_epochs}}},
  };
}

void from_json(const json& j, BackboneConfig& c, const std::string& path) {
  Fields f(j, path);
  f.get("image_size", c.image_size);
  f.get("image_width", c.image_width);
  f.get("patch_size", c.patch_size);
  f.get("channels", c.channels);
  f.get("dim", c.dim);
  f.get("depth", c.depth);
  f.get("heads", c.heads);
  f.get("mlp_ratio", c.mlp_ratio);
  f.get("use_rope", c.use_rope);
  f.get("rope_mode", c.rope_mode);
  f.get("use_layerscale", c.use_layerscale);
  f.get("layerscale_init", c.layerscale_init);
  f.get("use_qknorm", c.use_qknorm);
  f.get("mlp_kind", c.mlp_kind);
  f.get("use_learnable_posembed", c.use_learnable_posembed);
  f.get("attention_mode", c.attention_mode);
  f.finish();
}

void from_json(const json& j, ObjectiveConfig& c, const std::string& path) {
  Fields f(j, path);
  f.get("shift", c.shift);
  f.get("stop_grad", c.stop_grad);
  f.get("mask_ratio", c.mask_ratio);
  f.finish();
}

void from_json(const json& j, RunConfig& c) {
  Fields root(j, "");
  root.get("seed", c.seed);
  root.get("output_dir", c.output_dir);
  root.get("checkpoint", c.checkpoint);
  if (auto v = root.find("data")) {
    Fields f(*v, "data");
    f.get("source", c.data.source);
    f.get("train_size", c.data.train_size);
    f.get("test_size", c.data.test_size);
    f.get("train_root", c.data.train_root);
    f.get("test_root", c.data.test_root);
    f.get("resize", c.data.resize);
    if (auto s = f.find("synth")) {
      Fields g(*s, "data.synth");
      auto& sp = c.data.synth;
      g.get("classes", sp.classes);
      g.get("image_size", sp.image_size);
      g.get("channels", sp.channels);
      g.get("noise_std", sp.noise_std);
      g.get("position_jitter", sp.position_jitter);
      g.get("scale_min", sp.scale_min);
      g.get("scale_max", sp.scale_max);
      g.get("rotation_jitter", sp.rotation_jitter);
      g.get("min_contrast", sp.min_contrast);
      g.finish();
    }
    f.finish();
  }
  if (auto v = root.find("backbone")) from_json(*v, c.pretrain.backbone, "backbone");
  if (auto v = root.find("objective")) from_json(*v, c.pretrain.objective, "objective");
  if (auto v = root.find("pretrain")) {
    Fields f(*v, "pretrain");
    auto& p = c.pretrain;
    f.get("steps", p.schedule.total_steps);
    f.get("warmup_steps", p.schedule.warmup_steps);
    f.get("batch_size", p.schedule.batch_size);
    f.get("base_lr", p.schedule.base_lr);
    f.get("min_lr", p.schedule.min_lr);
    f.get("beta1", p.adamw.beta1);
    f.get("beta2", p.adamw.beta2);
    f.get("eps", p.adamw.eps);
    f.get("weight_decay", p.adamw.weight_decay);
    f.get("ema_decay", p.ema_decay);
    f.get("rrc", p.rrc);
    f.get("rrc_scale_min", p.rrc_scale_min);
    f.get("rrc_scale_max", p.rrc_scale_max);
    f.get("normalize_pixels", p.normalize_pixels);
    f.get("checkpoint_every", p.checkpoint_every);
    f.get("dtype", p.dtype);
    f.finish();
  }
  if (auto v = root.find("finetune")) {
    Fields f(*v, "finetune");
    auto& ft = c.finetune;
    f.get("attention_mode", ft.attention_mode);
    f.get("freeze_patch_embed", ft.freeze_patch_embed);
    f.get("epochs", ft.epochs);
    f.get("batch_size", ft.batch_size);
    f.get("warmup_epochs", ft.warmup_epochs);
    f.get("base_lr", ft.base_lr);
    f.get("min_lr", ft.min_lr);
    f.get("weight_decay", ft.weight_decay);
    f.get("beta1", ft.beta1);
    f.get("beta2", ft.beta2);
    f.get("llrd_start", ft.llrd_start);
    f.get("llrd_end", ft.llrd_end);
    f.get("drop_path_rate", ft.drop_path_rate);
    f.get("head_init_std", ft.head_init_std);
    f.get("use_ema_weights", ft.use_ema_weights);
    if (auto a = f.find("augment")) read_augment(*a, ft.augment, "finetune.augment");
    f.finish();
  }
  if (auto v = root.find("probe")) {
    Fields f(*v, "probe");
    f.get("epochs", c.probe.epochs);
    f.get("batch_size", c.probe.batch_size);
    f.get("lr", c.probe.lr);
    f.get("weight_decay", c.probe.weight_decay);
    f.get("standardize", c.probe.standardize);
    f.finish();
  }
  if (auto v = root.find("analyze")) {
    Fields f(*v, "analyze");
    f.get("image_index", c.analyze.image_index);
    f.get("queries", c.analyze.queries);
    f.get("use_ema_weights", c.analyze.use_ema_weights);
    f.finish();
  }
  if (auto v = root.find("gradcheck")) {
    Fields f(*v, "gradcheck");
    f.get("dim", c.gradcheck.dim);
    f.get("depth", c.gradcheck.depth);
    f.get("heads", c.gradcheck.heads);
    f.get("h", c.gradcheck.h);
    f.get("tolerance", c.gradcheck.tolerance);
    f.finish();
  }
  if (auto v = root.find("ablate")) {
    Fields f(*v, "ablate");
    f.get("steps", c.ablate.steps);
    f.get("finetune_epochs", c.ablate.finetune_epochs);
    f.finish();
  }
  root.finish();
}

RunConfig parse_run_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  from_json(j, c);
  c.propagate_seed();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

}  // namespace nepa
