#include "nepa/transfer.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "nepa/ops.hpp"
#include "nepa/optim.hpp"
#include "nepa/pretrain.hpp"

namespace nepa {

ClassifierHead ClassifierHead::init(int dim, int classes, double std, Rng& rng, DType dtype) {
  std::vector<double> w(static_cast<std::size_t>(dim) * static_cast<std::size_t>(classes));
  for (auto& x : w) x = std > 0 ? rng.truncated_normal(std) : 0.0;
  ClassifierHead h;
  h.weight = Tensor::from_values({dim, classes}, w, dtype);
  h.bias = Tensor::zeros({classes}, dtype);
  return h;
}

std::vector<NamedTensor> ClassifierHead::named() const { return {{"head.weight", weight}, {"head.bias", bias}}; }

Tensor pooled_features(const Tensor& images, const BackboneParams& params, const BackboneConfig& cfg, Pooling pooling) {
  Tensor h = forward(images, params, cfg).h_out;
  const auto t = h.dim(1);
  if (pooling == Pooling::avg) return mean_dim(h, 1);
  return reshape(slice(h, 1, t - 1, t), {h.dim(0), h.dim(2)});
}

Tensor classify(const Tensor& images, const BackboneParams& params, const BackboneConfig& cfg,
                const ClassifierHead& head) {
  if (head.weight.dim(0) != cfg.dim)
    throw ConfigError("head input width " + std::to_string(head.weight.dim(0)) + " != backbone dim " +
                      std::to_string(cfg.dim));
  return add(matmul(pooled_features(images, params, cfg, Pooling::last), head.weight), head.bias);
}

void write_metric_csv(const std::vector<MetricRow>& rows, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,split,metric,value\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g", r.value);
    out << r.epoch << ',' << r.split << ',' << r.metric << ',' << buf << '\n';
  }
}

Pretrained load_pretrained(const std::filesystem::path& path, bool ema) {
  const Checkpoint ckpt = load_checkpoint(path);
  auto lb = load_backbone(ckpt, ema);
  return {lb.config, std::move(lb.params), ckpt.meta.value("normalize_pixels", true)};
}

namespace {

Tensor prepare(const Tensor& images, bool normalize, DType dtype) {
  Tensor x = normalize ? normalize_pixels(images) : images;
  return x.dtype() == dtype ? x : x.to(dtype);
}

int argmax_row(const std::vector<double>& v, std::int64_t row, std::int64_t k) {
  int best = 0;
  for (std::int64_t j = 1; j < k; ++j)
    if (v[static_cast<std::size_t>(row * k + j)] > v[static_cast<std::size_t>(row * k + best)]) best = static_cast<int>(j);
  return best;
}

int layer_of(const std::string& name, int depth) {
  if (name.rfind("patch_embed.", 0) == 0 || name == "pos_embed") return 0;
  if (name.rfind("blocks.", 0) == 0) return std::stoi(name.substr(7)) + 1;
  return depth + 1;  // final norm, head
}

}  // namespace

double evaluate_accuracy(const BackboneParams& params, const BackboneConfig& cfg, const ClassifierHead& head,
                         const Dataset& data, bool normalize, int batch_size) {
  if (data.size() == 0) return 0.0;
  std::int64_t correct = 0;
  for (const auto& idx : sequential_batches(data.size(), batch_size)) {
    auto logits = classify(prepare(data.images(idx), normalize, head.weight.dtype()), params, cfg, head).to_vector();
    const auto k = head.weight.dim(1);
    auto labels = data.labels(idx);
    for (std::size_t i = 0; i < idx.size(); ++i)
      correct += argmax_row(logits, static_cast<std::int64_t>(i), k) == labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

FinetuneResult finetune(const Pretrained& pretrained, const Dataset& train, const Dataset& test,
                        const FinetuneConfig& cfg) {
  cfg.validate();
  FinetuneResult r;
  r.config = pretrained.config;
  r.config.attention_mode = cfg.attention_mode;
  r.params = pretrained.params.clone();
  const DType dtype = r.params.patch_weight.dtype();
  const int classes = train.num_classes();
  if (classes < 2) throw ConfigError("fine-tuning needs at least 2 classes");
  if (train[0].pixels.dim(0) != r.config.channels || train[0].pixels.dim(1) != r.config.height() ||
      train[0].pixels.dim(2) != r.config.width())
    throw ConfigError("dataset images " + shape_str(train[0].pixels.shape()) + " do not match the backbone input");

  Rng rng = Rng::keyed(cfg.seed, 0xf1e7);
  r.head = ClassifierHead::init(r.config.dim, classes, cfg.head_init_std, rng, dtype);

  std::vector<NamedTensor> trainable;
  for (auto& nt : r.params.named()) {
    const bool frozen = cfg.freeze_patch_embed && nt.name.rfind("patch_embed.", 0) == 0;
    Tensor t = nt.tensor;
    t.set_requires_grad(!frozen);
    if (!frozen) trainable.push_back(nt);
  }
  for (auto& nt : r.head.named()) {
    Tensor t = nt.tensor;
    t.set_requires_grad(true);
    trainable.push_back(nt);
  }
  AdamW opt({cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay}, make_optim_params(trainable));
  std::vector<int> layers;
  for (const auto& p : opt.params()) layers.push_back(layer_of(p.name, r.config.depth));

  const std::int64_t per_epoch = train.size() / cfg.batch_size;
  if (cfg.epochs > 0 && per_epoch == 0) throw ConfigError("training set smaller than one fine-tune batch");
  ScheduleConfig sched;
  sched.base_lr = cfg.base_lr;
  sched.batch_size = cfg.batch_size;
  sched.total_steps = per_epoch * cfg.epochs;
  sched.warmup_steps = per_epoch * cfg.warmup_epochs;
  sched.min_lr = cfg.min_lr;
  sched.llrd_start = cfg.llrd_start;
  sched.llrd_end = cfg.llrd_end;
  sched.validate();

  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0;
    for (const auto& idx : batch_iter(train.size(), cfg.batch_size, cfg.seed, epoch)) {
      Tensor images = train.images(idx);
      Tensor targets = smooth_labels(train.labels(idx), cfg.augment.label_smoothing, classes);
      if (cfg.augment.mixup || cfg.augment.cutmix) {
        auto mixed = mixup_cutmix(images, targets, cfg.augment, rng);
        images = mixed.images;
        targets = mixed.targets;
      }
      images = prepare(images, pretrained.normalize_pixels, dtype);
      targets = targets.to(dtype);

      const double lr = lr_at(step, sched);
      const double progress = sched.total_steps > 0 ? static_cast<double>(step) / sched.total_steps : 1.0;
      for (std::size_t i = 0; i < layers.size(); ++i)
        opt.params()[i].lr_scale = llrd_factor(layers[i], r.config.depth + 1, progress, sched);

      GradTape tape;
      {
        TapeScope scope(tape);
        Tensor loss = cross_entropy(classify(images, r.params, r.config, r.head), targets);
        tape.backward(loss);
        loss_sum += loss.item();
      }
      opt.step(lr);
      opt.zero_grad();
      ++step;
    }
    const double acc = evaluate_accuracy(r.params, r.config, r.head, test, pretrained.normalize_pixels);
    r.trace.push_back({epoch + 1, "train", "loss", loss_sum / static_cast<double>(per_epoch)});
    r.trace.push_back({epoch + 1, "test", "accuracy", acc});
    spdlog::info("finetune epoch {}: train loss {:.4f}, test accuracy {:.4f}", epoch + 1,
                 loss_sum / static_cast<double>(per_epoch), acc);
  }
  r.test_accuracy = cfg.epochs > 0 ? r.trace.back().value
                                   : evaluate_accuracy(r.params, r.config, r.head, test, pretrained.normalize_pixels);
  for (auto& nt : r.params.named()) {
    Tensor t = nt.tensor;
    t.set_requires_grad(false);
    t.clear_grad();
  }
  return r;
}

ProbeResult linear_probe(const Pretrained& backbone, const Dataset& train, const Dataset& test, Pooling pooling,
                         const ProbeConfig& cfg) {
  cfg.validate();
  const int classes = train.num_classes();
  const int dim = backbone.config.dim;
  auto extract = [&](const Dataset& data) {
    std::vector<double> feats;
    feats.reserve(static_cast<std::size_t>(data.size() * dim));
    for (const auto& idx : sequential_batches(data.size(), 256)) {
      auto f = pooled_features(prepare(data.images(idx), backbone.normalize_pixels, backbone.params.patch_weight.dtype()),
                               backbone.params, backbone.config, pooling)
                   .to_vector();
      feats.insert(feats.end(), f.begin(), f.end());
    }
    return feats;
  };
  auto ftrain = extract(train);
  auto ftest = extract(test);

  if (cfg.standardize) {
    const auto n = train.size();
    for (int j = 0; j < dim; ++j) {
      double m = 0, v = 0;
      for (std::int64_t i = 0; i < n; ++i) m += ftrain[static_cast<std::size_t>(i * dim + j)];
      m /= static_cast<double>(n);
      for (std::int64_t i = 0; i < n; ++i) {
        const double c = ftrain[static_cast<std::size_t>(i * dim + j)] - m;
        v += c * c;
      }
      const double s = std::sqrt(v / static_cast<double>(n)) + 1e-6;
      for (auto* f : {&ftrain, &ftest})
        for (std::size_t i = static_cast<std::size_t>(j); i < f->size(); i += static_cast<std::size_t>(dim))
          (*f)[i] = ((*f)[i] - m) / s;
    }
  }

  Rng rng = Rng::keyed(cfg.seed, 0x9e0be);
  ClassifierHead head = ClassifierHead::init(dim, classes, 0.01, rng, DType::f64);
  head.weight.set_requires_grad(true);
  head.bias.set_requires_grad(true);
  AdamW opt({0.9, 0.999, 1e-8, cfg.weight_decay}, make_optim_params(head.named()));

  auto rows = [&](const std::vector<double>& f, const std::vector<std::int64_t>& idx) {
    std::vector<double> out;
    out.reserve(idx.size() * static_cast<std::size_t>(dim));
    for (auto i : idx) out.insert(out.end(), f.begin() + i * dim, f.begin() + (i + 1) * dim);
    return Tensor::from_vector({static_cast<std::int64_t>(idx.size()), dim}, std::move(out));
  };
  for (int epoch = 0; epoch < cfg.epochs; ++epoch)
    for (const auto& idx : batch_iter(train.size(), cfg.batch_size, cfg.seed, epoch, true)) {
      GradTape tape;
      TapeScope scope(tape);
      Tensor logits = add(matmul(rows(ftrain, idx), head.weight), head.bias);
      tape.backward(cross_entropy(logits, smooth_labels(train.labels(idx), 0.0, classes)));
      opt.step(cfg.lr);
      opt.zero_grad();
    }

  auto accuracy = [&](const std::vector<double>& f, const Dataset& data) {
    if (data.size() == 0) return 0.0;
    std::vector<std::int64_t> all(static_cast<std::size_t>(data.size()));
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<std::int64_t>(i);
    auto logits = add(matmul(rows(f, all), head.weight), head.bias).to_vector();
    auto labels = data.labels(all);
    std::int64_t correct = 0;
    for (std::size_t i = 0; i < all.size(); ++i) correct += argmax_row(logits, static_cast<std::int64_t>(i), classes) == labels[i];
    return static_cast<double>(correct) / static_cast<double>(data.size());
  };
  return {pooling, accuracy(ftrain, train), accuracy(ftest, test)};
}

Checkpoint finetune_checkpoint(const FinetuneResult& r, bool normalize_pixels) {
  Checkpoint c;
  c.tensors = with_prefix("model.", r.params.named());
  for (auto& nt : r.head.named()) c.tensors.push_back(nt);
  c.meta = {{"kind", "finetune"},
            {"dtype", r.params.patch_weight.dtype() == DType::f32 ? "f32" : "f64"},
            {"backbone", to_json(r.config)},
            {"normalize_pixels", normalize_pixels},
            {"test_accuracy", r.test_accuracy}};
  return c;
}

}  // namespace nepa
