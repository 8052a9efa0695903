#include "nepa/optim.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace nepa {

std::vector<OptimParam> make_optim_params(const std::vector<NamedTensor>& named) {
  std::vector<OptimParam> out;
  out.reserve(named.size());
  for (const auto& [name, t] : named) out.push_back({name, t, 1.0, t.rank() >= 2 && name != "pos_embed"});
  return out;
}

AdamW::AdamW(AdamWConfig cfg, std::vector<OptimParam> params) : cfg_(cfg), params_(std::move(params)) {
  for (const auto& p : params_) {
    m_.push_back(Tensor::zeros(p.param.shape(), p.param.dtype()));
    v_.push_back(Tensor::zeros(p.param.shape(), p.param.dtype()));
  }
}

void AdamW::step(double lr) {
  for (const auto& p : params_) {
    if (!p.param.has_grad()) continue;
    dispatch(p.param.dtype(), [&]<class S>() {
      Tensor g = p.param;
      for (S v : g.grad_data<S>())
        if (!std::isfinite(v)) throw NumericError("non-finite gradient for parameter '" + p.name + "'");
    });
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.param.has_grad()) continue;
    const double plr = lr * p.lr_scale;
    const double shrink = p.decay ? 1.0 - plr * cfg_.weight_decay : 1.0;
    dispatch(p.param.dtype(), [&]<class S>() {
      auto w = p.param.mutable_data<S>();
      auto g = p.param.grad_data<S>();
      auto m = m_[i].mutable_data<S>();
      auto v = v_[i].mutable_data<S>();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j];
        const double mj = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
        const double vj = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
        m[j] = static_cast<S>(mj);
        v[j] = static_cast<S>(vj);
        const double update = (mj / bc1) / (std::sqrt(vj / bc2) + cfg_.eps);
        w[j] = static_cast<S>(w[j] * shrink - plr * update);
      }
    });
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.param.clear_grad();
}

std::vector<NamedTensor> AdamW::state_tensors() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.push_back({"adam.m." + params_[i].name, m_[i]});
    out.push_back({"adam.v." + params_[i].name, v_[i]});
  }
  return out;
}

void AdamW::load_state(const std::vector<NamedTensor>& tensors, std::int64_t steps) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    bool found_m = false, found_v = false;
    for (const auto& [name, t] : tensors) {
      if (name == "adam.m." + params_[i].name) {
        m_[i].copy_from(t);
        found_m = true;
      } else if (name == "adam.v." + params_[i].name) {
        v_[i].copy_from(t);
        found_v = true;
      }
    }
    if (!found_m || !found_v) throw CheckpointError("missing optimizer state for '" + params_[i].name + "'");
  }
  t_ = steps;
}

// ---------------------------------------------------------------------------

void ScheduleConfig::validate() const {
  if (!(base_lr >= 0)) throw ConfigError("base_lr must be >= 0");
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (total_steps < 0 || warmup_steps < 0) throw ConfigError("step counts must be >= 0");
  if (warmup_steps > total_steps) throw ConfigError("warmup_steps exceeds total_steps");
  if (!(min_lr >= 0)) throw ConfigError("min_lr must be >= 0");
  if (!(llrd_start > 0) || !(llrd_end > 0)) throw ConfigError("layer decay rates must be > 0");
}

double ScheduleConfig::peak_lr() const { return base_lr * batch_size / 256.0; }

double lr_at(std::int64_t step, const ScheduleConfig& sched) {
  const double peak = sched.peak_lr();
  if (step > sched.total_steps || step < 0) return sched.min_lr;
  if (step < sched.warmup_steps)
    return peak * static_cast<double>(step) / static_cast<double>(sched.warmup_steps);
  const auto span = sched.total_steps - sched.warmup_steps;
  if (span == 0) return peak;
  const double progress = static_cast<double>(step - sched.warmup_steps) / static_cast<double>(span);
  return sched.min_lr + (peak - sched.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double llrd_factor(int layer_index, int n_layers, double progress, const ScheduleConfig& sched) {
  if (layer_index < 0 || layer_index > n_layers)
    throw ConfigError("llrd_factor: layer " + std::to_string(layer_index) + " outside [0, " +
                      std::to_string(n_layers) + "]");
  const double d = sched.llrd_start + progress * (sched.llrd_end - sched.llrd_start);
  return std::pow(d, n_layers - layer_index);
}

// ---------------------------------------------------------------------------

Ema::Ema(const std::vector<NamedTensor>& initial, double decay) : decay_(decay) {
  if (!(decay >= 0.0 && decay <= 1.0)) throw ConfigError("EMA decay must be in [0, 1]");
  for (const auto& [name, t] : initial) shadow_.push_back({name, t.clone()});
}

void Ema::update(const std::vector<NamedTensor>& params) {
  if (params.size() != shadow_.size()) throw ShapeError("Ema::update: parameter count changed");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& p = params[i].tensor;
    Tensor& s = shadow_[i].tensor;
    if (p.shape() != s.shape())
      throw ShapeError("Ema::update: '" + params[i].name + "' " + shape_str(p.shape()) + " vs shadow " +
                       shape_str(s.shape()));
    dispatch(s.dtype(), [&]<class S>() {
      auto sv = s.mutable_data<S>();
      auto pv = p.to_vector();
      for (std::size_t j = 0; j < sv.size(); ++j) sv[j] = static_cast<S>(decay_ * sv[j] + (1.0 - decay_) * pv[j]);
    });
  }
}

// ---------------------------------------------------------------------------

const Tensor& Checkpoint::at(const std::string& name) const {
  for (const auto& nt : tensors)
    if (nt.name == name) return nt.tensor;
  throw CheckpointError("checkpoint has no tensor '" + name + "'");
}

bool Checkpoint::contains(const std::string& name) const {
  for (const auto& nt : tensors)
    if (nt.name == name) return true;
  return false;
}

namespace {

template <class U>
void put(std::ostream& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <class U>
U get(std::istream& in, const char* what) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    int c = in.get();
    if (c == EOF) throw CheckpointError(std::string("truncated checkpoint while reading ") + what);
    v |= static_cast<U>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ostringstream buf(std::ios::binary);
  buf.write("NEPA", 4);
  put<std::uint32_t>(buf, kCheckpointVersion);
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) write_tensor_record(buf, name, t);
  const std::string meta = ckpt.meta.dump();
  put<std::uint64_t>(buf, meta.size());
  buf.write(meta.data(), static_cast<std::streamsize>(meta.size()));

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + tmp.string());
    const std::string bytes = buf.str();
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::string(magic, 4) != "NEPA")
    throw CheckpointError("version error: " + path.string() + " is not a NEPA checkpoint (bad magic)");
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion)
    throw CheckpointError("version error: checkpoint version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  Checkpoint ckpt;
  const auto count = get<std::uint32_t>(in, "record count");
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    try {
      ckpt.tensors.push_back(read_tensor_record(in));
    } catch (const CheckpointError&) {
      throw;
    } catch (const std::exception& e) {
      throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
    }
    if (!seen.insert(ckpt.tensors.back().name).second)
      throw CheckpointError("duplicate tensor '" + ckpt.tensors.back().name + "' in checkpoint");
  }
  const auto len = get<std::uint64_t>(in, "metadata length");
  if (len > (1ull << 30)) throw CheckpointError("implausible metadata length");
  std::string meta(len, '\0');
  in.read(meta.data(), static_cast<std::streamsize>(len));
  if (static_cast<std::uint64_t>(in.gcount()) != len) throw CheckpointError("truncated checkpoint metadata");
  try {
    ckpt.meta = nlohmann::json::parse(meta);
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint metadata: ") + e.what());
  }
  return ckpt;
}

void assign_from(const Checkpoint& ckpt, const std::string& prefix, const std::vector<NamedTensor>& dst,
                 bool strict) {
  std::set<std::string> wanted;
  for (const auto& [name, t] : dst) {
    const std::string full = prefix + name;
    wanted.insert(full);
    const Tensor& src = ckpt.at(full);
    if (src.shape() != t.shape())
      throw CheckpointError("shape mismatch for '" + full + "': checkpoint " + shape_str(src.shape()) +
                            ", model " + shape_str(t.shape()));
    Tensor target = t;
    target.copy_from(src);
  }
  if (!strict) return;
  for (const auto& nt : ckpt.tensors)
    if (nt.name.rfind(prefix, 0) == 0 && !wanted.contains(nt.name))
      throw CheckpointError("unknown tensor '" + nt.name + "' in checkpoint");
}

std::vector<NamedTensor> with_prefix(const std::string& prefix, const std::vector<NamedTensor>& named) {
  std::vector<NamedTensor> out;
  out.reserve(named.size());
  for (const auto& [name, t] : named) out.push_back({prefix + name, t});
  return out;
}

}  // namespace nepa
