#include "nepa/pretrain.hpp"

#include <spdlog/spdlog.h>

#include <cstdio>
#include <fstream>

#include "nepa/objective.hpp"

namespace nepa {

namespace {

constexpr std::uint64_t kStreamKey = 0x7a1;

std::vector<NamedTensor> model_named(const BackboneParams& p, const Tensor& mask_token) {
  auto named = p.named();
  named.push_back({"mask_token", mask_token});
  return named;
}

std::string dtype_tag(DType d) { return d == DType::f32 ? "f32" : "f64"; }

}  // namespace

Pretrainer::Pretrainer(PretrainConfig cfg, const Dataset& data)
    : cfg_(std::move(cfg)), data_(data), rng_(Rng::keyed(cfg_.seed, kStreamKey)) {
  cfg_.validate();
  if (data_.size() < cfg_.schedule.batch_size)
    throw ConfigError("dataset has " + std::to_string(data_.size()) + " images, fewer than one batch of " +
                      std::to_string(cfg_.schedule.batch_size));
  Rng init(cfg_.seed);
  params_ = BackboneParams::init(cfg_.backbone, init, cfg_.dtype);
  params_.set_requires_grad(true);
  mask_token_ = init_mask_token(cfg_.backbone.dim, init, cfg_.dtype);
  opt_ = std::make_unique<AdamW>(cfg_.adamw, make_optim_params(model_named(params_, mask_token_)));
  ema_ = std::make_unique<Ema>(params_.named(), cfg_.ema_decay);
}

Tensor Pretrainer::batch_images(std::int64_t step) {
  const int b = cfg_.schedule.batch_size;
  const std::int64_t per_epoch = data_.size() / b;
  const auto batches = batch_iter(data_.size(), b, cfg_.seed, step / per_epoch);
  const auto& idx = batches[static_cast<std::size_t>(step % per_epoch)];
  if (!cfg_.rrc) return data_.images(idx);
  Dataset crops;
  crops.samples.reserve(idx.size());
  for (auto i : idx)
    crops.samples.push_back(
        {random_resized_crop(data_[i].pixels, rng_, cfg_.rrc_scale_min, cfg_.rrc_scale_max, cfg_.backbone.image_size),
         data_[i].label, data_[i].id});
  std::vector<std::int64_t> all(idx.size());
  for (std::size_t k = 0; k < all.size(); ++k) all[k] = static_cast<std::int64_t>(k);
  return crops.images(all);
}

StepLog Pretrainer::step() {
  if (done()) throw ConfigError("pretraining already finished");
  Tensor images = batch_images(step_);
  if (cfg_.normalize_pixels) images = normalize_pixels(images);
  if (images.dtype() != cfg_.dtype) images = images.to(cfg_.dtype);

  const double lr = lr_at(step_, cfg_.schedule);
  GradTape tape;
  StepForward fwd;
  {
    TapeScope scope(tape);
    fwd = training_step_forward(images, params_, cfg_.backbone, cfg_.objective, mask_token_, rng_);
    tape.backward(fwd.loss);
  }
  opt_->step(lr);
  opt_->zero_grad();
  ema_->update(params_.named());
  last_spread_ = target_spread(fwd.seq.z);
  ++step_;
  return {step_, fwd.loss.item(), lr};
}

BackboneParams Pretrainer::ema_params() const {
  BackboneParams out = params_.clone();
  auto dst = out.named();
  const auto& src = ema_->shadow();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i].tensor.copy_from(src[i].tensor);
  return out;
}

Checkpoint Pretrainer::checkpoint() const {
  Checkpoint c;
  c.tensors = with_prefix("model.", model_named(params_, mask_token_));
  for (auto& nt : opt_->state_tensors()) c.tensors.push_back(nt);
  for (auto& nt : with_prefix("ema.", ema_->shadow())) c.tensors.push_back(nt);
  c.meta = {{"kind", "pretrain"},
            {"step", step_},
            {"adam_step", opt_->steps()},
            {"rng", rng_.state()},
            {"seed", cfg_.seed},
            {"dtype", dtype_tag(cfg_.dtype)},
            {"normalize_pixels", cfg_.normalize_pixels},
            {"backbone", to_json(cfg_.backbone)},
            {"objective", to_json(cfg_.objective)}};
  return c;
}

void Pretrainer::restore(const Checkpoint& ckpt) {
  const auto& m = ckpt.meta;
  if (m.value("kind", "") != "pretrain") throw CheckpointError("not a pretraining checkpoint");
  if (m.at("backbone") != to_json(cfg_.backbone))
    throw ConfigError("checkpoint backbone differs from the configured one");
  if (m.at("objective") != to_json(cfg_.objective))
    throw ConfigError("checkpoint objective differs from the configured one");
  if (m.at("dtype") != dtype_tag(cfg_.dtype)) throw ConfigError("checkpoint dtype differs from the configured one");
  for (const auto& nt : ckpt.tensors) {
    const auto& n = nt.name;
    if (n.rfind("model.", 0) != 0 && n.rfind("adam.", 0) != 0 && n.rfind("ema.", 0) != 0)
      throw CheckpointError("unknown tensor '" + n + "' in checkpoint");
  }
  assign_from(ckpt, "model.", model_named(params_, mask_token_));
  assign_from(ckpt, "ema.", ema_->shadow());
  std::vector<NamedTensor> adam;
  for (const auto& nt : ckpt.tensors)
    if (nt.name.rfind("adam.", 0) == 0) adam.push_back(nt);
  if (adam.size() != 2 * opt_->params().size()) throw CheckpointError("unknown or missing optimizer tensors");
  opt_->load_state(adam, m.at("adam_step").get<std::int64_t>());
  step_ = m.at("step").get<std::int64_t>();
  rng_.set_state(m.at("rng").get<std::string>());
}

LoadedBackbone load_backbone(const Checkpoint& ckpt, bool ema) {
  if (ckpt.meta.value("kind", "") != "pretrain" && ckpt.meta.value("kind", "") != "finetune")
    throw CheckpointError("checkpoint has no backbone metadata");
  LoadedBackbone out;
  from_json(ckpt.meta.at("backbone"), out.config);
  out.config.validate();
  const DType dtype = ckpt.meta.value("dtype", "f32") == "f64" ? DType::f64 : DType::f32;
  Rng unused(0);
  out.params = BackboneParams::init(out.config, unused, dtype);
  const bool has_ema = !ckpt.tensors.empty() && ckpt.contains("ema." + out.params.named().front().name);
  assign_from(ckpt, ema && has_ema ? "ema." : "model.", out.params.named(), false);
  return out;
}

void run_pretrain(const PretrainConfig& cfg, const Dataset& data, const std::filesystem::path& out_dir,
                  const std::optional<std::filesystem::path>& resume, const nlohmann::json& extra_meta,
                  const std::function<void(const StepLog&)>& on_step) {
  std::filesystem::create_directories(out_dir);
  Pretrainer tr(cfg, data);
  std::vector<std::string> rows;
  if (resume) {
    tr.restore(load_checkpoint(*resume));
    std::ifstream prev(out_dir / "loss.csv");
    std::string line;
    std::getline(prev, line);  // header
    while (std::getline(prev, line)) {
      if (line.empty()) continue;
      if (std::stoll(line.substr(0, line.find(','))) > tr.steps_done()) break;
      rows.push_back(line);
    }
    spdlog::info("resumed at step {} ({} earlier loss rows kept)", tr.steps_done(), rows.size());
  }
  std::ofstream csv(out_dir / "loss.csv", std::ios::trunc);
  csv << "step,loss,lr\n";
  for (const auto& r : rows) csv << r << '\n';

  auto save = [&](const std::string& name) {
    Checkpoint c = tr.checkpoint();
    for (auto it = extra_meta.begin(); it != extra_meta.end(); ++it) c.meta[it.key()] = it.value();
    save_checkpoint(out_dir / name, c);
  };
  char buf[96];
  while (!tr.done()) {
    const StepLog log = tr.step();
    std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g", static_cast<long long>(log.step), log.loss, log.lr);
    csv << buf << '\n';
    csv.flush();
    if (on_step) on_step(log);
    if (cfg.checkpoint_every > 0 && log.step % cfg.checkpoint_every == 0 && !tr.done())
      save("step_" + std::to_string(log.step) + ".ckpt");
  }
  save("final.ckpt");
}

}  // namespace nepa
