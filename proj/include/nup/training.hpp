#pragma once

// Joint objective and the two-stage schedule.
//
// Per step: (a) D_G and D_S are updated on detached fakes (ADA on every D_G
// input, R1 on reals); (b) G and S take one joint Adam step on
//   l_gan_g + w_gan_s * l_gan_s + w_cyc * l_cyc + w_seg * l_seg
// where l_seg is the instance loss of S on G(x, z) against x's annotations.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "nup/ada.hpp"
#include "nup/checkpoint.hpp"
#include "nup/data_pipeline.hpp"
#include "nup/discriminators.hpp"
#include "nup/generator_comod.hpp"
#include "nup/generator_fpn.hpp"

namespace nup::train {

struct StageSchedule {
  int iters = 0;
  double lr = 0.0;
};

struct TrainConfig {
  double lambda_gan_s = 2.0;
  double lambda_cyc = 10.0;
  double lambda_seg = 2.0;
  double gamma_g = 1.0;
  double gamma_s = 1.0;
  int batch_size = 12;
  double beta1 = 0.0;
  double beta2 = 0.99;
  double eps = 1e-8;
  std::vector<StageSchedule> stages{{2000, 4e-4}, {1250, 1e-4}};
  std::uint64_t seed = 0;
  bool ada = true;
  int threads = 1;  // intra-op threads; 1 gives bit-reproducible runs

  void validate() const;  // throws ConfigError naming the field
};

struct ModelConfig {
  gen::GeneratorConfig generator;
  seg::SegConfig segmenter;
  disc::ImageDiscConfig disc_image;
  disc::PatchDiscConfig disc_patch;
  ada::AdaConfig ada;

  void validate() const;
};

struct LossBundle {
  double l_gan_g = 0, l_gan_s = 0, l_cyc = 0, l_seg = 0, total = 0;
};

/// Mean absolute error of both reconstructions, each averaged over pixels and batch.
torch::Tensor cycle_loss(const torch::Tensor& x, const torch::Tensor& x_rec, const torch::Tensor& y,
                         const torch::Tensor& y_rec);

/// Weighted sum; throws NonFiniteError on non-finite inputs.
LossBundle total_loss(double l_gan_g, double l_gan_s, double l_cyc, double l_seg, const TrainConfig& cfg);
/// Same weighting on graph tensors. A zero weight drops the term from the graph.
torch::Tensor total_objective(const torch::Tensor& l_gan_g, const torch::Tensor& l_gan_s, const torch::Tensor& l_cyc,
                              const torch::Tensor& l_seg, const TrainConfig& cfg);

/// Seed used to initialize network `name` ("G", "S", "D_G", "D_S") for a stage.
std::uint64_t init_seed(std::uint64_t seed, const std::string& name, int stage);

gen::CoModulatedGenerator make_generator(const ModelConfig& cfg, std::uint64_t seed);
seg::SegmentationGenerator make_segmenter(const ModelConfig& cfg, std::uint64_t seed);
disc::ImageDiscriminator make_disc_image(const ModelConfig& cfg, std::uint64_t seed);
disc::PatchDiscriminator make_disc_patch(const ModelConfig& cfg, std::uint64_t seed);

struct StepInfo {
  LossBundle losses;
  double ada_p = 0, ada_rt = 0, lr = 0;
  double disc_g = 0, disc_s = 0;  // discriminator objectives of phase (a)
};

class Trainer {
 public:
  Trainer(ModelConfig model, TrainConfig train);

  /// One alternating update at the current stage's learning rate.
  StepInfo step(const data::Batch& batch);

  /// Phase (a) only; exposed for isolation tests.
  void discriminator_phase(const torch::Tensor& x, const torch::Tensor& y);
  /// Phase (b) only; returns the losses that were back-propagated.
  LossBundle generator_phase(const torch::Tensor& x, const std::vector<seg::SegTargets>& targets,
                             const torch::Tensor& y);

  /// Moves to `stage`: from the second stage on, S and D_S are re-created
  /// from init_seed(seed, ..., stage) with fresh optimizer state; G and D_G
  /// keep parameters and moments. Learning rates follow the schedule.
  void enter_stage(int stage);

  /// Runs the configured schedule from the current position. Writes one JSON
  /// line per step (and one per reinit event) to `log`, checkpoints at stage
  /// ends into `out_dir` when non-empty.
  void run(data::UnpairedBatcher& batcher, std::ostream& log, const std::filesystem::path& out_dir = {},
           const std::function<void(const StepInfo&)>& on_step = {});

  ckpt::Archive to_archive() const;
  void save(const std::filesystem::path& path) const;
  /// Restores networks, optimizer moments, ADA state, counters and the RNG.
  void load(const ckpt::Archive& archive);

  const ModelConfig& model_config() const { return model_; }
  const TrainConfig& train_config() const { return train_; }
  std::int64_t iteration() const { return iter_; }
  int stage() const { return stage_; }
  std::int64_t stage_iteration() const { return stage_iter_; }
  double lr() const;
  const ada::AdaState& ada_state() const { return ada_; }
  /// Directory for non-finite diagnostics; defaults to the working directory.
  void set_diagnostics_dir(std::filesystem::path dir) { diag_dir_ = std::move(dir); }
  /// Stored in the "config" field of every checkpoint written.
  void set_config_snapshot(nlohmann::json j) { snapshot_ = std::move(j); }

  gen::CoModulatedGenerator G{nullptr};
  seg::SegmentationGenerator S{nullptr};
  disc::ImageDiscriminator DG{nullptr};
  disc::PatchDiscriminator DS{nullptr};

 private:
  std::unique_ptr<torch::optim::Adam> make_optimizer(torch::nn::Module& m, double lr) const;
  void dump_nonfinite(const std::string& what, const nlohmann::json& detail) const;

  ModelConfig model_;
  TrainConfig train_;
  std::unique_ptr<torch::optim::Adam> opt_g_, opt_s_, opt_dg_, opt_ds_;
  ada::AdaState ada_;
  torch::Generator rng_;
  std::int64_t iter_ = 0, stage_iter_ = 0;
  int stage_ = 0;
  double last_disc_g_ = 0, last_disc_s_ = 0;
  std::filesystem::path diag_dir_ = ".";
  nlohmann::json snapshot_ = nlohmann::json::object();
};

nlohmann::json step_log(const StepInfo& info, std::int64_t iter, int stage);

}  // namespace nup::train
