#pragma once

#include <algorithm>

#include "relflow/core/grid.hpp"
#include "relflow/scenegen.hpp"

namespace relflow {

/// Channel layout of the flow state: albedo(3), depth(1), normals(3), irradiance(1).
inline constexpr int kStateChannels = 8;
inline constexpr int kCondChannels = 3;

namespace channel {
inline constexpr int albedo = 0;
inline constexpr int depth = 3;
inline constexpr int normals = 4;
inline constexpr int irradiance = 7;
}  // namespace channel

/// Smallest depth a decoded prediction may take.
inline constexpr double kMinDecodedDepth = 1e-6;

/// Maps a stack to the [-1, 1] flow space. Normals are kept as raw components.
inline Field encode_stack(const IntrinsicStack& s) {
  const int h = s.height(), w = s.width();
  Field x(h, w, kStateChannels);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      for (int k = 0; k < 3; ++k) {
        x(r, c, channel::albedo + k) = 2.0 * s.albedo(r, c, k) - 1.0;
        x(r, c, channel::normals + k) = s.normals(r, c, k);
      }
      x(r, c, channel::depth) = 2.0 * s.depth(r, c) - 1.0;
      x(r, c, channel::irradiance) = 2.0 * s.irradiance(r, c) - 1.0;
    }
  return x;
}

/// Inverse of encode_stack. Albedo and irradiance are clamped to [0,1] and depth to
/// [kMinDecodedDepth, 1]; normals are left unnormalized.
inline IntrinsicStack decode_stack(const Field& x) {
  if (x.channels != kStateChannels) throw ShapeError("decode_stack: expected 8 channels");
  IntrinsicStack s(x.height, x.width);
  auto unit = [](double v) { return static_cast<float>(std::clamp(0.5 * (v + 1.0), 0.0, 1.0)); };
  for (int r = 0; r < x.height; ++r)
    for (int c = 0; c < x.width; ++c) {
      for (int k = 0; k < 3; ++k) {
        s.albedo(r, c, k) = unit(x(r, c, channel::albedo + k));
        s.normals(r, c, k) = static_cast<float>(x(r, c, channel::normals + k));
      }
      s.depth(r, c) = static_cast<float>(std::clamp(0.5 * (x(r, c, channel::depth) + 1.0), kMinDecodedDepth, 1.0));
      s.irradiance(r, c) = unit(x(r, c, channel::irradiance));
    }
  return s;
}

inline Field encode_condition(const ImageF& rgb) {
  if (rgb.channels != 3) throw ShapeError("encode_condition: expected an RGB image");
  Field c(rgb.height, rgb.width, kCondChannels);
  for (std::size_t i = 0; i < rgb.data.size(); ++i) c.data[i] = 2.0 * rgb.data[i] - 1.0;
  return c;
}

}  // namespace relflow
