#include "nup/training.hpp"

#include <cmath>
#include <fstream>

#include "nup/errors.hpp"

namespace nup::train {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
  auto nonneg = [](double v, const char* field) {
    if (!(v >= 0) || !std::isfinite(v)) throw ConfigError(std::string("train.") + field + " must be finite and >= 0");
  };
  nonneg(lambda_gan_s, "lambda_gan_s");
  nonneg(lambda_cyc, "lambda_cyc");
  nonneg(lambda_seg, "lambda_seg");
  nonneg(gamma_g, "gamma_g");
  nonneg(gamma_s, "gamma_s");
  if (batch_size <= 0) throw ConfigError("train.batch_size must be positive");
  if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("train.beta1 must be in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("train.beta2 must be in [0, 1)");
  if (!(eps > 0)) throw ConfigError("train.eps must be positive");
  if (stages.empty()) throw ConfigError("train.stages needs at least one stage");
  for (size_t i = 0; i < stages.size(); ++i) {
    if (stages[i].iters < 0) throw ConfigError("train.stages[" + std::to_string(i) + "].iters must be >= 0");
    if (!(stages[i].lr > 0)) throw ConfigError("train.stages[" + std::to_string(i) + "].lr must be positive");
  }
  if (threads <= 0) throw ConfigError("train.threads must be positive");
}

void ModelConfig::validate() const {
  generator.validate();
  segmenter.validate();
  if (segmenter.image_size != generator.image_size || disc_image.image_size != generator.image_size)
    throw ConfigError("model.segmenter.image_size and model.disc_image.image_size must equal model.generator.image_size");
  if (segmenter.in_channels != generator.out_channels || segmenter.out_channels != generator.in_channels)
    throw ConfigError("model.segmenter channels must mirror model.generator channels");
  if (disc_image.in_channels != generator.out_channels)
    throw ConfigError("model.disc_image.in_channels must equal model.generator.out_channels");
  if (disc_patch.in_channels != generator.in_channels)
    throw ConfigError("model.disc_patch.in_channels must equal model.generator.in_channels");
  if (disc_patch.layers < 0 || disc_patch.base_channels <= 0) throw ConfigError("model.disc_patch is malformed");
}

torch::Tensor cycle_loss(const torch::Tensor& x, const torch::Tensor& x_rec, const torch::Tensor& y,
                         const torch::Tensor& y_rec) {
  if (x.sizes() != x_rec.sizes()) throw std::invalid_argument("cycle_loss: x and its reconstruction differ in shape");
  if (y.sizes() != y_rec.sizes()) throw std::invalid_argument("cycle_loss: y and its reconstruction differ in shape");
  return (x_rec - x).abs().mean() + (y_rec - y).abs().mean();
}

LossBundle total_loss(double a, double b, double c, double d, const TrainConfig& cfg) {
  const double in[] = {a, b, c, d};
  const char* names[] = {"l_gan_g", "l_gan_s", "l_cyc", "l_seg"};
  for (int i = 0; i < 4; ++i)
    if (!std::isfinite(in[i])) throw NonFiniteError(std::string(names[i]) + " is not finite");
  LossBundle out{a, b, c, d, 0.0};
  out.total = a + cfg.lambda_gan_s * b + cfg.lambda_cyc * c + cfg.lambda_seg * d;
  return out;
}

torch::Tensor total_objective(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& c,
                              const torch::Tensor& d, const TrainConfig& cfg) {
  auto t = a;
  if (cfg.lambda_gan_s != 0) t = t + cfg.lambda_gan_s * b;
  if (cfg.lambda_cyc != 0) t = t + cfg.lambda_cyc * c;
  if (cfg.lambda_seg != 0) t = t + cfg.lambda_seg * d;
  return t;
}

std::uint64_t init_seed(std::uint64_t seed, const std::string& name, int stage) {
  // splitmix64 over (seed, name, stage)
  std::uint64_t h = seed ^ 0x9e3779b97f4a7c15ULL;
  for (char ch : name) h = (h ^ static_cast<unsigned char>(ch)) * 0x100000001b3ULL;
  h += static_cast<std::uint64_t>(stage) * 0xbf58476d1ce4e5b9ULL;
  h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ULL;
  h = (h ^ (h >> 27)) * 0x94d049bb133111ebULL;
  return (h ^ (h >> 31)) & 0x7fffffffffffffffULL;
}

gen::CoModulatedGenerator make_generator(const ModelConfig& cfg, std::uint64_t seed) {
  torch::manual_seed(seed);
  return gen::CoModulatedGenerator(cfg.generator);
}
seg::SegmentationGenerator make_segmenter(const ModelConfig& cfg, std::uint64_t seed) {
  torch::manual_seed(seed);
  return seg::SegmentationGenerator(cfg.segmenter);
}
disc::ImageDiscriminator make_disc_image(const ModelConfig& cfg, std::uint64_t seed) {
  torch::manual_seed(seed);
  return disc::ImageDiscriminator(cfg.disc_image);
}
disc::PatchDiscriminator make_disc_patch(const ModelConfig& cfg, std::uint64_t seed) {
  torch::manual_seed(seed);
  return disc::PatchDiscriminator(cfg.disc_patch);
}

namespace {

// Freezes a module's parameters for the lifetime of the guard.
class FreezeGuard {
 public:
  explicit FreezeGuard(torch::nn::Module& m) : params_(m.parameters()) {
    for (auto& p : params_) p.requires_grad_(false);
  }
  ~FreezeGuard() {
    for (auto& p : params_) p.requires_grad_(true);
  }

 private:
  std::vector<torch::Tensor> params_;
};

void set_lr(torch::optim::Adam& opt, double lr) {
  for (auto& g : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(g.options()).lr(lr);
}

void save_optimizer(ckpt::Archive& a, const std::string& prefix, const torch::optim::Adam& opt) {
  const auto& params = opt.param_groups().at(0).params();
  for (size_t i = 0; i < params.size(); ++i) {
    const auto it = opt.state().find(params[i].unsafeGetTensorImpl());
    if (it == opt.state().end()) continue;
    const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
    const std::string k = prefix + "." + std::to_string(i);
    a.add(k + ".step", torch::tensor(s.step(), torch::kLong));
    a.add(k + ".exp_avg", s.exp_avg());
    a.add(k + ".exp_avg_sq", s.exp_avg_sq());
  }
}

void load_optimizer(const ckpt::Archive& a, const std::string& prefix, torch::optim::Adam& opt) {
  const auto& params = opt.param_groups().at(0).params();
  opt.state().clear();
  for (size_t i = 0; i < params.size(); ++i) {
    const std::string k = prefix + "." + std::to_string(i);
    const auto* step = a.find(k + ".step");
    if (!step) continue;
    const auto* m = a.find(k + ".exp_avg");
    const auto* v = a.find(k + ".exp_avg_sq");
    if (!m || !v || m->sizes() != params[i].sizes()) throw ckpt::FormatError("optimizer state for " + k + " is malformed");
    auto s = std::make_unique<torch::optim::AdamParamState>();
    s->step(step->item<int64_t>());
    s->exp_avg(m->clone());
    s->exp_avg_sq(v->clone());
    opt.state()[params[i].unsafeGetTensorImpl()] = std::move(s);
  }
}

std::vector<seg::SegTargets> targets_of(const data::Batch& b, bool class_agnostic) {
  std::vector<seg::SegTargets> t;
  for (const auto& ann : b.x_annotations) t.push_back(seg::make_seg_targets(ann, class_agnostic));
  return t;
}

}  // namespace

Trainer::Trainer(ModelConfig model, TrainConfig train)
    : model_(std::move(model)), train_(std::move(train)), rng_(torch::make_generator<torch::CPUGeneratorImpl>()) {
  model_.validate();
  train_.validate();
  torch::set_num_threads(train_.threads);
  rng_.set_current_seed(init_seed(train_.seed, "rng", 0));
  G = make_generator(model_, init_seed(train_.seed, "G", 0));
  S = make_segmenter(model_, init_seed(train_.seed, "S", 0));
  DG = make_disc_image(model_, init_seed(train_.seed, "D_G", 0));
  DS = make_disc_patch(model_, init_seed(train_.seed, "D_S", 0));
  torch::manual_seed(init_seed(train_.seed, "global", 0));
  const double lr = train_.stages[0].lr;
  opt_g_ = make_optimizer(*G, lr);
  opt_s_ = make_optimizer(*S, lr);
  opt_dg_ = make_optimizer(*DG, lr);
  opt_ds_ = make_optimizer(*DS, lr);
}

std::unique_ptr<torch::optim::Adam> Trainer::make_optimizer(torch::nn::Module& m, double lr) const {
  return std::make_unique<torch::optim::Adam>(
      m.parameters(), torch::optim::AdamOptions(lr).betas({train_.beta1, train_.beta2}).eps(train_.eps));
}

double Trainer::lr() const { return train_.stages.at(std::min<size_t>(stage_, train_.stages.size() - 1)).lr; }

void Trainer::enter_stage(int stage) {
  if (stage < 0 || stage >= static_cast<int>(train_.stages.size())) throw std::out_of_range("no such stage");
  if (stage > 0) {
    S = make_segmenter(model_, init_seed(train_.seed, "S", stage));
    DS = make_disc_patch(model_, init_seed(train_.seed, "D_S", stage));
    torch::manual_seed(init_seed(train_.seed, "global", stage));
    opt_s_ = make_optimizer(*S, train_.stages[stage].lr);
    opt_ds_ = make_optimizer(*DS, train_.stages[stage].lr);
  }
  stage_ = stage;
  stage_iter_ = 0;
  for (auto* o : {opt_g_.get(), opt_s_.get(), opt_dg_.get(), opt_ds_.get()}) set_lr(*o, train_.stages[stage].lr);
}

void Trainer::dump_nonfinite(const std::string& what, const json& detail) const {
  json j{{"error", what + " is not finite"}, {"iter", iter_}, {"stage", stage_ + 1}, {"detail", detail},
         {"ada_p", ada_.p(model_.ada)}, {"ada_rt", ada_.r_t}};
  std::error_code ec;
  fs::create_directories(diag_dir_, ec);
  std::ofstream(diag_dir_ / ("nonfinite_iter" + std::to_string(iter_) + ".json")) << j.dump(1) << '\n';
}

void Trainer::discriminator_phase(const torch::Tensor& x, const torch::Tensor& y) {
  const int64_t B = x.size(0);
  torch::Tensor y_fake, x_fake;
  {
    torch::NoGradGuard ng;
    y_fake = G->forward(x, G->sample_z(B, rng_));
    x_fake = S->decode_mask(y);
  }
  const double p = train_.ada ? ada_.p(model_.ada) : 0.0;
  ada::AugmentDecisions dec;
  const bool augment = p > 0;
  if (augment) dec = ada::sample_decisions(B, y.size(3), p, model_.ada, rng_);
  disc::DiscFn dg = [&](const torch::Tensor& t) { return DG->forward(augment ? ada::apply(t, dec) : t); };
  disc::DiscFn ds = [&](const torch::Tensor& t) { return DS->forward(t); };

  disc::GanLosses lg, ls;
  try {
    lg = disc::dg_loss(dg, y, y_fake, train_.gamma_g);
    ls = disc::ds_loss(ds, x, x_fake, train_.gamma_s);
  } catch (const NonFiniteError& e) {
    dump_nonfinite("discriminator loss", {{"message", e.what()}});
    throw;
  }
  opt_dg_->zero_grad();
  opt_ds_->zero_grad();
  (lg.disc + ls.disc).backward();
  opt_dg_->step();
  opt_ds_->step();
  last_disc_g_ = lg.disc.item<double>();
  last_disc_s_ = ls.disc.item<double>();
  if (train_.ada) ada::observe(ada_, lg.real_out, static_cast<int>(B), model_.ada);
}

LossBundle Trainer::generator_phase(const torch::Tensor& x, const std::vector<seg::SegTargets>& targets,
                                    const torch::Tensor& y) {
  FreezeGuard fg(*DG), fs_(*DS);
  const int64_t B = x.size(0);
  const auto z = G->sample_z(B, rng_);

  const auto y_hat = G->forward(x, z);
  const auto pyr = S->pyramid(y_hat);
  const auto x_rec = S->decode(pyr, {x.size(2), x.size(3)});
  torch::Tensor l_seg = torch::zeros({});
  seg::SegLossComponents parts;
  if (train_.lambda_seg != 0) {
    parts = S->instance_losses(pyr, targets, rng_);
  }
  const auto x_hat = S->decode_mask(y);
  const auto y_rec = G->forward(x_hat, z);
  const auto l_cyc = cycle_loss(x, x_rec, y, y_rec);

  const double p = train_.ada ? ada_.p(model_.ada) : 0.0;
  const auto y_hat_d = p > 0 ? ada::augment(y_hat, p, model_.ada, rng_) : y_hat;
  const auto l_gan_g = disc::ns_gen_loss(DG->forward(y_hat_d));
  const auto l_gan_s = disc::ls_gen_loss(DS->forward(x_hat));

  LossBundle out;
  try {
    if (train_.lambda_seg != 0) l_seg = seg::seg_loss(parts);
    out = total_loss(l_gan_g.item<double>(), l_gan_s.item<double>(), l_cyc.item<double>(), l_seg.item<double>(), train_);
  } catch (const NonFiniteError& e) {
    json detail{{"message", e.what()},
                {"l_gan_g", l_gan_g.item<double>()},
                {"l_gan_s", l_gan_s.item<double>()},
                {"l_cyc", l_cyc.item<double>()},
                {"y_hat_absmax", y_hat.detach().abs().max().item<double>()},
                {"x_hat_absmax", x_hat.detach().abs().max().item<double>()}};
    if (parts.anchor_cls.defined()) {
      const char* names[] = {"anchor_cls", "anchor_reg", "bbox_cls", "bbox_reg", "mask"};
      const auto terms = parts.terms();
      for (int i = 0; i < 5; ++i) detail[names[i]] = terms[i].item<double>();
    }
    dump_nonfinite("generator objective", detail);
    throw;
  }
  const auto total = total_objective(l_gan_g, l_gan_s, l_cyc, l_seg, train_);
  opt_g_->zero_grad();
  opt_s_->zero_grad();
  total.backward();
  opt_g_->step();
  opt_s_->step();
  out.total = total.item<double>();
  return out;
}

StepInfo Trainer::step(const data::Batch& batch) {
  discriminator_phase(batch.x, batch.y);
  StepInfo info;
  info.lr = lr();
  info.losses = generator_phase(batch.x, targets_of(batch, model_.segmenter.class_agnostic), batch.y);
  info.ada_p = ada_.p(model_.ada);
  info.ada_rt = ada_.r_t;
  info.disc_g = last_disc_g_;
  info.disc_s = last_disc_s_;
  ++iter_;
  ++stage_iter_;
  return info;
}

json step_log(const StepInfo& info, std::int64_t iter, int stage) {
  return {{"iter", iter},           {"stage", stage},           {"l_gan_g", info.losses.l_gan_g},
          {"l_gan_s", info.losses.l_gan_s}, {"l_cyc", info.losses.l_cyc}, {"l_seg", info.losses.l_seg},
          {"total", info.losses.total}, {"ada_p", info.ada_p},   {"ada_rt", info.ada_rt},
          {"lr", info.lr}};
}

void Trainer::run(data::UnpairedBatcher& batcher, std::ostream& log, const fs::path& out_dir,
                  const std::function<void(const StepInfo&)>& on_step) {
  const int n = static_cast<int>(train_.stages.size());
  while (true) {
    while (stage_iter_ < train_.stages[stage_].iters) {
      const auto info = step(batcher.next());
      log << step_log(info, iter_, stage_ + 1).dump() << std::endl;
      if (on_step) on_step(info);
    }
    if (!out_dir.empty()) save(out_dir / ("stage" + std::to_string(stage_ + 1) + ".nup"));
    if (stage_ + 1 >= n) break;
    enter_stage(stage_ + 1);
    log << json{{"event", "reinit"},
                {"iter", iter_},
                {"stage", stage_ + 1},
                {"networks", {"S", "D_S"}},
                {"seed_S", init_seed(train_.seed, "S", stage_)},
                {"seed_D_S", init_seed(train_.seed, "D_S", stage_)}}
               .dump()
        << std::endl;
  }
  if (!out_dir.empty()) save(out_dir / "final.nup");
}

ckpt::Archive Trainer::to_archive() const {
  ckpt::Archive a;
  ckpt::add_module(a, "G", *G);
  ckpt::add_module(a, "S", *S);
  ckpt::add_module(a, "D_G", *DG);
  ckpt::add_module(a, "D_S", *DS);
  save_optimizer(a, "opt.G", *opt_g_);
  save_optimizer(a, "opt.S", *opt_s_);
  save_optimizer(a, "opt.D_G", *opt_dg_);
  save_optimizer(a, "opt.D_S", *opt_ds_);
  a.add("rng.state", rng_.get_state());
  a.add("rng.global", at::detail::getDefaultCPUGenerator().get_state());  // dropout draws
  a.meta = {{"kind", "checkpoint"},
            {"iter", iter_},
            {"stage", stage_},
            {"stage_iter", stage_iter_},
            {"ada", {{"p_numerator", ada_.p_numerator},
                     {"minibatch_counter", ada_.minibatch_counter},
                     {"r_t", ada_.r_t},
                     {"window", ada_.window}}},
            {"config", snapshot_}};
  return a;
}

void Trainer::save(const fs::path& path) const { ckpt::write_archive(path, to_archive()); }

void Trainer::load(const ckpt::Archive& a) {
  if (a.meta.value("kind", "") != "checkpoint") throw ckpt::FormatError("not a training checkpoint");
  stage_ = a.meta.at("stage").get<int>();
  if (stage_ < 0 || stage_ >= static_cast<int>(train_.stages.size()))
    throw ckpt::FormatError("checkpoint stage " + std::to_string(stage_) + " is outside the configured schedule");
  ckpt::load_module(a, "G", *G);
  ckpt::load_module(a, "S", *S);
  ckpt::load_module(a, "D_G", *DG);
  ckpt::load_module(a, "D_S", *DS);
  load_optimizer(a, "opt.G", *opt_g_);
  load_optimizer(a, "opt.S", *opt_s_);
  load_optimizer(a, "opt.D_G", *opt_dg_);
  load_optimizer(a, "opt.D_S", *opt_ds_);
  if (const auto* st = a.find("rng.state")) rng_.set_state(*st);
  if (const auto* st = a.find("rng.global")) {
    auto g = at::detail::getDefaultCPUGenerator();
    g.set_state(*st);
  }
  iter_ = a.meta.at("iter").get<std::int64_t>();
  stage_iter_ = a.meta.at("stage_iter").get<std::int64_t>();
  const auto& ad = a.meta.at("ada");
  ada_.p_numerator = ad.at("p_numerator").get<std::int64_t>();
  ada_.minibatch_counter = ad.at("minibatch_counter").get<std::int64_t>();
  ada_.r_t = ad.at("r_t").get<double>();
  ada_.window = ad.at("window").get<std::vector<float>>();
  for (auto* o : {opt_g_.get(), opt_s_.get(), opt_dg_.get(), opt_ds_.get()}) set_lr(*o, train_.stages[stage_].lr);
}

}  // namespace nup::train
