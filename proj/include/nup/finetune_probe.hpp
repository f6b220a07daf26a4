#pragma once

// Downstream checks for exported weights: a linear probe on a frozen encoder
// and a short detection fine-tune, both on synthetic stand-in histology.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "nup/checkpoint.hpp"
#include "nup/data_pipeline.hpp"
#include "nup/generator_comod.hpp"
#include "nup/generator_fpn.hpp"

namespace nup::probe {

// -- data ---------------------------------------------------------------------

/// Renders with annotations. Even indices are gland-free, odd ones carry two
/// glands; the classification label is "contains epithelium". With a
/// generator the images are G(mask, z) for seeded z, otherwise procedural
/// stand-ins.
struct ProbeSetSpec {
  int count = 200;
  int image_size = 64;
  std::uint64_t seed = 0;
};

data::Dataset make_probe_set(const ProbeSetSpec& spec, gen::CoModulatedGeneratorImpl* generator = nullptr);
/// Writes images/, annotations/ and a manifest whose domain_x lists
/// (render, annotations) pairs; returns the manifest path.
std::filesystem::path write_probe_set(const std::filesystem::path& dir, const ProbeSetSpec& spec,
                                      gen::CoModulatedGeneratorImpl* generator = nullptr);

/// 1 when any annotated nucleus is epithelial.
int gland_label(const synth::InstanceAnnotationSet& annotations);

struct LabeledImages {
  torch::Tensor images;  // [N, 3, H, W] in [-1, 1]
  torch::Tensor labels;  // [N] long
};
LabeledImages labeled_images(const data::Dataset& data);

// -- linear probe -------------------------------------------------------------

struct LinearProbeConfig {
  int iters = 300;
  double lr = 0.05;
  double weight_decay = 1e-4;
  double test_fraction = 0.3;
  std::uint64_t seed = 0;
};

struct ProbeReport {
  double accuracy = 0, f1 = 0;  // f1 of the positive class
  int n_train = 0, n_test = 0;
  bool frozen_unchanged = true;
  nlohmann::json to_json() const;
};

/// Global-average-pooled backbone stages, concatenated: [N, sum(channels)].
torch::Tensor encoder_features(seg::BackboneImpl& backbone, const torch::Tensor& images);

/// Logistic-regression head on standardized features; trained on the train
/// rows, scored on the test rows.
ProbeReport fit_linear_head(const torch::Tensor& train_x, const torch::Tensor& train_y, const torch::Tensor& test_x,
                            const torch::Tensor& test_y, const LinearProbeConfig& cfg);

/// Seeded train/test split; returns (train indices, test indices).
std::pair<torch::Tensor, torch::Tensor> split_indices(int64_t n, double test_fraction, std::uint64_t seed);

/// Probe on `model`'s backbone, which stays frozen (checked bitwise).
ProbeReport linear_probe(seg::SegmentationGeneratorImpl& model, const LabeledImages& data,
                         const LinearProbeConfig& cfg);
/// Requires an export covering the encoder; throws ckpt::ScopeError otherwise.
ProbeReport linear_probe(const ckpt::Archive& exported, const seg::SegConfig& seg_cfg, const LabeledImages& data,
                         const LinearProbeConfig& cfg);

// -- detection fine-tune --------------------------------------------------------

struct DetectConfig {
  int steps = 200;
  double lr = 1e-3;
  int batch_size = 4;
  double test_fraction = 0.25;
  bool class_aware = true;  // heads predict epithelial / other
  std::uint64_t seed = 0;
  std::vector<std::string> metrics{"aji", "f1", "mpq", "dice", "hausdorff"};
};

struct DetectReport {
  bool loaded_bitwise = false;
  std::vector<std::string> loaded;
  double initial_loss = 0, final_loss = 0;  // instance loss over the training split
  std::vector<double> loss_curve;
  int n_train = 0, n_test = 0;
  nlohmann::json metrics;
  nlohmann::json to_json() const;
};

/// Initializes backbone + pyramid from an export covering them (ScopeError
/// otherwise), fine-tunes every part the instance branch uses, then scores
/// detections on the held-out split.
DetectReport detection_finetune(const ckpt::Archive& exported, seg::SegConfig seg_cfg, const data::Dataset& data,
                                const DetectConfig& cfg);

}  // namespace nup::probe
