#pragma once

// Small network widths so training tests run in seconds.

#include "nup/annotations_io.hpp"
#include "nup/data_pipeline.hpp"
#include "nup/training.hpp"

namespace nup::testing {

inline train::ModelConfig tiny_model() {
  train::ModelConfig m;
  m.generator.base_channels = 4;
  m.generator.max_channels = 16;
  m.generator.z_dim = m.generator.w_dim = 16;
  m.segmenter.stem_channels = 4;
  m.segmenter.backbone_channels = {8, 8, 16, 16, 16};
  m.segmenter.fpn_channels = 8;
  m.segmenter.head_channels = 8;
  m.segmenter.box_fc = 16;
  m.segmenter.roi_batch_per_image = 16;
  m.segmenter.rpn_batch_per_image = 64;
  m.disc_image.base_channels = 4;
  m.disc_image.max_channels = 16;
  m.disc_patch.base_channels = 4;
  m.disc_patch.layers = 1;
  return m;
}

inline train::TrainConfig tiny_train(int batch = 2) {
  train::TrainConfig t;
  t.batch_size = batch;
  t.stages = {{3, 4e-4}, {2, 1e-4}};
  return t;
}

/// In-memory dataset: synthesized 80 px masks and their stand-in renders.
inline data::Dataset tiny_dataset(int nx, int ny, std::uint64_t seed = 0) {
  synth::SynthConfig sc;
  sc.image_size = 80;
  sc.rng_seed = seed;
  data::Dataset d;
  for (int i = 0; i < nx; ++i) {
    const auto s = synth::synthesize(sc, i);
    d.x_images.push_back(synth::to_image(s.image));
    d.x_annotations.push_back(s.annotations);
  }
  for (int i = 0; i < ny; ++i) d.y_images.push_back(data::render_histology(synth::synthesize(sc, 1000 + i), i));
  return d;
}

}  // namespace nup::testing
