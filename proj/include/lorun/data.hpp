#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "lorun/tensor.hpp"

namespace lorun {

/// One clean C x H x W image with values in [0, 1].
struct ImageSample {
  TensorF clean;
  std::string id;
};

enum class Layout { Auto, Pgm, TensorFile, Synthetic };

/// "synthetic:count=64,size=32,channels=1,seed=7" (height/width override size).
struct SyntheticSpec {
  Index count = 16;
  Index height = 32;
  Index width = 32;
  Index channels = 1;
  std::uint64_t seed = 0;
};

bool is_synthetic_spec(std::string_view source);
SyntheticSpec parse_synthetic(std::string_view source);

/// Seeded piecewise-smooth images: rectangles plus Gaussian blobs. Multi-channel
/// images give every shape its own smooth spectral profile.
std::vector<ImageSample> synthesize(const SyntheticSpec& spec);

/// Loads a PGM file, a TensorFile (H x W, C x H x W or N x C x H x W), a
/// directory of either, or a synthetic spec. Values are clamped to [0, 1].
std::vector<ImageSample> ingest(const std::string& source, Layout layout = Layout::Auto);

}  // namespace lorun
