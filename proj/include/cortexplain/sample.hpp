#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cortexplain/tensor.hpp"

namespace cx {

inline constexpr int kFullterm = 0;
inline constexpr int kPreterm = 1;
inline constexpr int kHemispheres = 2;  // 0 = left, 1 = right
inline constexpr int kInputChannels = 3;  // thickness (mm), mean curvature, convexity

using VertexMask = std::vector<std::uint8_t>;

// One subject: per-hemisphere V x C attributes on an icosphere level.
struct SurfaceSample {
  std::string subject_id;
  int label = kFullterm;
  int level = 0;
  std::array<Tensor, kHemispheres> features;
  // Synthetic data only; values are 0 or 1.
  std::optional<std::array<VertexMask, kHemispheres>> mask;

  std::size_t vertices() const { return features[0].rows(); }
  std::size_t channels() const { return features[0].cols(); }

  // Throws on inconsistent shapes, non-finite values or a bad label.
  void validate() const;
};

// Rows ordered (sample, hemisphere, vertex): (2B * V) x C.
Tensor stack_features(std::span<const SurfaceSample* const> batch);

}  // namespace cx
