#pragma once

// Independent checks of the mask/annotation invariants, written directly
// against the pixel buffers rather than through the synthesis helpers.

#include <cmath>
#include <string>
#include <vector>

#include "nup/mask_synthesis.hpp"

namespace nup::testing {

inline std::string check_sample_invariants(const synth::SynthSample& s, const synth::SynthConfig& cfg) {
  const auto& img = s.image;
  const auto& ann = s.annotations;
  const int H = img.height, W = img.width;
  if (ann.height != H || ann.width != W) return "annotation shape mismatch";
  if (static_cast<int>(ann.instances.size()) != s.report.kept) return "instance count != kept count";
  if (s.report.kept + s.report.dropped_overlap + s.report.dropped_empty != s.report.seeds_placed)
    return "report does not account for every seed";

  std::vector<int> cover(static_cast<std::size_t>(H) * W, 0);
  std::vector<int> contour(static_cast<std::size_t>(H) * W, 0);
  for (std::size_t k = 0; k < ann.instances.size(); ++k) {
    const auto& inst = ann.instances[k];
    int x0 = W, y0 = H, x1 = -1, y1 = -1;
    long area = 0;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        if (!inst.mask.at(y, x)) continue;
        ++area;
        ++cover[y * W + x];
        x0 = std::min(x0, x), y0 = std::min(y0, y), x1 = std::max(x1, x), y1 = std::max(y1, y);
        const bool edge = y == 0 || x == 0 || y == H - 1 || x == W - 1 || !inst.mask.at(y - 1, x) ||
                          !inst.mask.at(y + 1, x) || !inst.mask.at(y, x - 1) || !inst.mask.at(y, x + 1);
        if (edge) contour[y * W + x] = 1;
      }
    if (area == 0) return "empty instance " + std::to_string(k);
    const synth::BBox tight{x0, y0, x1 - x0 + 1, y1 - y0 + 1};
    if (!(inst.bbox == tight)) return "bbox not tight for instance " + std::to_string(k);
    // pairwise overlap tolerance
    for (std::size_t j = 0; j < k; ++j) {
      long shared = 0, other = 0;
      for (std::size_t i = 0; i < inst.mask.data.size(); ++i) {
        shared += inst.mask.data[i] && ann.instances[j].mask.data[i];
        other += ann.instances[j].mask.data[i] != 0;
      }
      if (shared > cfg.overlap_tolerance * std::min(area, other))
        return "overlap beyond tolerance between " + std::to_string(j) + " and " + std::to_string(k);
    }
  }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const bool c0 = img.at(y, x, 0) != 0, c1 = img.at(y, x, 1) != 0, c2 = img.at(y, x, 2) != 0;
      if (c0 && c1) return "fill channels intersect";
      if ((c0 || c1) != (cover[y * W + x] > 0)) return "annotation union != fill support";
      if (c2 != (contour[y * W + x] != 0)) return "boundary channel != instance contours";
      if (c2 && img.at(y, x, 2) != 255) return "boundary value not 255";
    }
  return {};
}

}  // namespace nup::testing
