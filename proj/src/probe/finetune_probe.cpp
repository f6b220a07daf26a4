#include "nup/finetune_probe.hpp"

#include <cstdio>

#include "nup/annotations_io.hpp"
#include "nup/evaluation.hpp"

namespace nup::probe {

namespace fs = std::filesystem;
using nlohmann::json;

data::Dataset make_probe_set(const ProbeSetSpec& spec, gen::CoModulatedGeneratorImpl* generator) {
  if (spec.count < 2) throw std::invalid_argument("probe set needs at least two images");
  if (generator && generator->cfg.image_size != spec.image_size)
    throw std::invalid_argument("probe image_size must match the generator's");
  data::Dataset d;
  std::vector<torch::Tensor> masks;
  for (int i = 0; i < spec.count; ++i) {
    synth::SynthConfig c;
    c.image_size = spec.image_size;
    c.rng_seed = spec.seed;
    const int glands = i % 2 ? 2 : 0;
    c.gland_count_range = {glands, glands};
    const auto s = synth::synthesize(c, static_cast<std::uint64_t>(i));
    if (generator)
      masks.push_back(data::normalize(synth::to_image(s.image)));
    else
      d.x_images.push_back(data::render_histology(s, spec.seed * 7919 + static_cast<std::uint64_t>(i)));
    d.x_annotations.push_back(s.annotations);
  }
  if (generator) {
    torch::NoGradGuard ng;
    const bool was_training = generator->is_training();
    generator->eval();
    auto gen = at::make_generator<at::CPUGeneratorImpl>(spec.seed * 7919 + 1);
    constexpr int64_t kChunk = 16;
    for (size_t a = 0; a < masks.size(); a += kChunk) {
      const auto x = torch::stack(std::vector<torch::Tensor>(masks.begin() + a, masks.begin() + std::min(masks.size(), a + kChunk)));
      const auto y = generator->forward(x, generator->sample_z(x.size(0), gen));
      for (int64_t k = 0; k < y.size(0); ++k) d.x_images.push_back(data::denormalize(y[k].clamp(-1, 1)));
    }
    generator->train(was_training);
  }
  return d;
}

fs::path write_probe_set(const fs::path& dir, const ProbeSetSpec& spec, gen::CoModulatedGeneratorImpl* generator) {
  const auto d = make_probe_set(spec, generator);
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "annotations");
  data::Manifest m;
  m.split = "probe";
  for (size_t i = 0; i < d.x_images.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%05zu", i);
    data::XEntry e{dir / "images" / (std::string(name) + ".png"), dir / "annotations" / (std::string(name) + ".json")};
    io::write_png(e.image, d.x_images[i]);
    synth::write_annotations(e.annotations, d.x_annotations[i]);
    m.domain_x.push_back(std::move(e));
  }
  const auto path = dir / "manifest.json";
  data::write_manifest(path, m);
  return path;
}

int gland_label(const synth::InstanceAnnotationSet& annotations) {
  for (const auto& inst : annotations.instances)
    if (inst.category == synth::NucleusCategory::Epithelial) return 1;
  return 0;
}

LabeledImages labeled_images(const data::Dataset& data) {
  if (data.x_images.empty()) throw data::DataError("no labeled images");
  std::vector<torch::Tensor> imgs;
  std::vector<int64_t> labels;
  for (size_t i = 0; i < data.x_images.size(); ++i) {
    imgs.push_back(data::normalize(data.x_images[i]));
    labels.push_back(gland_label(data.x_annotations[i]));
  }
  return {torch::stack(imgs), torch::tensor(labels, torch::kLong)};
}

json ProbeReport::to_json() const {
  return {{"task", "linear"}, {"accuracy", accuracy}, {"f1", f1}, {"n_train", n_train}, {"n_test", n_test},
          {"frozen_unchanged", frozen_unchanged}};
}

json DetectReport::to_json() const {
  return {{"task", "detect"},         {"loaded_bitwise", loaded_bitwise}, {"loaded_parameters", loaded.size()},
          {"initial_loss", initial_loss}, {"final_loss", final_loss},     {"n_train", n_train},
          {"n_test", n_test},          {"metrics", metrics}};
}

torch::Tensor encoder_features(seg::BackboneImpl& backbone, const torch::Tensor& images) {
  torch::NoGradGuard ng;
  std::vector<torch::Tensor> pooled;
  // small chunks keep peak memory flat for large probe sets
  for (int64_t i = 0; i < images.size(0); i += 32) {
    const auto levels = backbone.forward(images.narrow(0, i, std::min<int64_t>(32, images.size(0) - i)));
    std::vector<torch::Tensor> f;
    for (const auto& l : levels) f.push_back(l.mean({2, 3}));
    pooled.push_back(torch::cat(f, 1));
  }
  return torch::cat(pooled, 0);
}

std::pair<torch::Tensor, torch::Tensor> split_indices(int64_t n, double test_fraction, std::uint64_t seed) {
  if (test_fraction <= 0 || test_fraction >= 1) throw std::invalid_argument("test_fraction must be in (0, 1)");
  const int64_t n_test = std::max<int64_t>(1, std::llround(n * test_fraction));
  if (n_test >= n) throw std::invalid_argument("split leaves no training rows");
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  const auto perm = torch::randperm(n, gen, torch::kLong);
  return {perm.narrow(0, n_test, n - n_test), perm.narrow(0, 0, n_test)};
}

ProbeReport fit_linear_head(const torch::Tensor& train_x, const torch::Tensor& train_y, const torch::Tensor& test_x,
                            const torch::Tensor& test_y, const LinearProbeConfig& cfg) {
  const auto x_tr = train_x.to(torch::kFloat), x_te = test_x.to(torch::kFloat);
  const auto mean = x_tr.mean(0, true), std = x_tr.std(0, true, true).clamp_min(1e-6);
  const auto z_tr = (x_tr - mean) / std, z_te = (x_te - mean) / std;

  torch::manual_seed(cfg.seed);
  torch::nn::Linear head(z_tr.size(1), 2);
  torch::optim::Adam opt(head->parameters(), torch::optim::AdamOptions(cfg.lr).weight_decay(cfg.weight_decay));
  for (int it = 0; it < cfg.iters; ++it) {
    opt.zero_grad();
    torch::nn::functional::cross_entropy(head(z_tr), train_y).backward();
    opt.step();
  }
  torch::NoGradGuard ng;
  const auto pred = head(z_te).argmax(1);
  const auto y = test_y.to(torch::kLong);
  ProbeReport r;
  r.n_train = static_cast<int>(z_tr.size(0));
  r.n_test = static_cast<int>(z_te.size(0));
  r.accuracy = pred.eq(y).to(torch::kDouble).mean().item<double>();
  const double tp = (pred.eq(1) & y.eq(1)).sum().item<double>();
  const double fp = (pred.eq(1) & y.eq(0)).sum().item<double>();
  const double fn = (pred.eq(0) & y.eq(1)).sum().item<double>();
  r.f1 = tp + fp + fn == 0 ? 1.0 : 2 * tp / (2 * tp + fp + fn);
  return r;
}

ProbeReport linear_probe(seg::SegmentationGeneratorImpl& model, const LabeledImages& data,
                         const LinearProbeConfig& cfg) {
  auto& backbone = *model.backbone;
  std::vector<torch::Tensor> before;
  for (auto& p : backbone.parameters()) {
    before.push_back(p.detach().clone());
    p.set_requires_grad(false);
  }
  const auto feats = encoder_features(backbone, data.images);
  const auto [tr, te] = split_indices(feats.size(0), cfg.test_fraction, cfg.seed);
  auto r = fit_linear_head(feats.index_select(0, tr), data.labels.index_select(0, tr), feats.index_select(0, te),
                           data.labels.index_select(0, te), cfg);
  const auto after = backbone.parameters();
  for (size_t i = 0; i < after.size(); ++i) r.frozen_unchanged &= ckpt::bitwise_equal(after[i], before[i]);
  return r;
}

ProbeReport linear_probe(const ckpt::Archive& exported, const seg::SegConfig& seg_cfg, const LabeledImages& data,
                         const LinearProbeConfig& cfg) {
  torch::manual_seed(cfg.seed);
  seg::SegmentationGenerator model(seg_cfg);
  ckpt::load_export(exported, *model, ckpt::Scope::Encoder);
  return linear_probe(*model, data, cfg);
}

namespace {

double split_loss(seg::SegmentationGeneratorImpl& model, const torch::Tensor& images,
                  const std::vector<seg::SegTargets>& targets, int batch, std::uint64_t seed) {
  torch::NoGradGuard ng;
  // a fixed sampling stream makes before/after values comparable
  torch::Generator gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  double total = 0;
  int chunks = 0;
  for (int64_t i = 0; i < images.size(0); i += batch, ++chunks) {
    const int64_t n = std::min<int64_t>(batch, images.size(0) - i);
    const std::vector<seg::SegTargets> t(targets.begin() + i, targets.begin() + i + n);
    total += seg::seg_loss(model.instance_forward(images.narrow(0, i, n), t, gen)).item<double>();
  }
  return total / chunks;
}

}  // namespace

DetectReport detection_finetune(const ckpt::Archive& exported, seg::SegConfig seg_cfg, const data::Dataset& data,
                                const DetectConfig& cfg) {
  if (cfg.steps < 1 || cfg.batch_size < 1) throw std::invalid_argument("steps and batch_size must be positive");
  const auto metric_list = cfg.metrics;
  for (const auto& m : metric_list) metrics::parse_metric_list(m);

  seg_cfg.class_agnostic = !cfg.class_aware;
  torch::manual_seed(cfg.seed);
  seg::SegmentationGenerator model(seg_cfg);
  DetectReport r;
  r.loaded = ckpt::load_export(exported, *model, ckpt::Scope::Fpn);
  r.loaded_bitwise = true;
  const auto params = model->named_parameters();
  for (const auto& name : r.loaded) {
    const auto* src = exported.find(name);
    r.loaded_bitwise &= src && ckpt::bitwise_equal(*src, params[name]);
  }

  const auto all = labeled_images(data).images;
  std::vector<seg::SegTargets> targets;
  for (const auto& a : data.x_annotations) targets.push_back(seg::make_seg_targets(a, seg_cfg.class_agnostic));
  const auto [tr, te] = split_indices(all.size(0), cfg.test_fraction, cfg.seed);
  auto pick = [&](const torch::Tensor& idx) {
    std::vector<seg::SegTargets> t;
    const auto a = idx.accessor<int64_t, 1>();
    for (int64_t i = 0; i < idx.numel(); ++i) t.push_back(targets[a[i]]);
    return t;
  };
  const auto x_train = all.index_select(0, tr), x_test = all.index_select(0, te);
  const auto t_train = pick(tr);
  r.n_train = static_cast<int>(tr.numel());
  r.n_test = static_cast<int>(te.numel());

  std::vector<torch::Tensor> trainable;
  for (auto* m : std::initializer_list<torch::nn::Module*>{model->backbone.get(), model->fpn.get(),
                                                           model->rpn_head.get(), model->box_head.get(),
                                                           model->mask_head.get()})
    for (auto& p : m->parameters()) trainable.push_back(p);
  torch::optim::Adam opt(trainable, torch::optim::AdamOptions(cfg.lr));

  const std::uint64_t eval_seed = cfg.seed ^ 0xA5A5A5A5ULL;
  r.initial_loss = split_loss(*model, x_train, t_train, cfg.batch_size, eval_seed);
  torch::Generator gen = at::make_generator<at::CPUGeneratorImpl>(cfg.seed + 1);
  const int64_t b = std::min<int64_t>(cfg.batch_size, x_train.size(0));
  for (int s = 0; s < cfg.steps; ++s) {
    const auto idx = torch::randperm(x_train.size(0), gen, torch::kLong).narrow(0, 0, b);
    std::vector<seg::SegTargets> t;
    for (int64_t i = 0; i < b; ++i) t.push_back(t_train[idx[i].item<int64_t>()]);
    opt.zero_grad();
    const auto loss = seg::seg_loss(model->instance_forward(x_train.index_select(0, idx), t, gen));
    loss.backward();
    opt.step();
    r.loss_curve.push_back(loss.item<double>());
  }
  r.final_loss = split_loss(*model, x_train, t_train, cfg.batch_size, eval_seed);

  std::vector<metrics::InstanceLabeling> preds, gts;
  const auto te_a = te.accessor<int64_t, 1>();
  const auto dets = model->detect(x_test);
  for (int64_t i = 0; i < te.numel(); ++i) {
    preds.push_back(dets[i].labeling());
    auto gt = synth::to_labeling(data.x_annotations[te_a[i]]);
    if (seg_cfg.class_agnostic) gt.classes.clear(), preds.back().classes.clear();
    gts.push_back(std::move(gt));
  }
  r.metrics = metrics::metric_report(preds, gts, metric_list);
  return r;
}

}  // namespace nup::probe
