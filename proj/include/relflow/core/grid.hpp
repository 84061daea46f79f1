#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "relflow/core/error.hpp"

namespace relflow {

/// Dense H x W x C array, row-major with channels innermost.
template <typename T>
struct Grid {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(int h, int w, int c, T fill = T{})
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  std::size_t index(int r, int col, int k = 0) const noexcept {
    return (static_cast<std::size_t>(r) * width + col) * channels + k;
  }
  T& operator()(int r, int col, int k = 0) noexcept { return data[index(r, col, k)]; }
  const T& operator()(int r, int col, int k = 0) const noexcept { return data[index(r, col, k)]; }

  std::size_t size() const noexcept { return data.size(); }
  std::size_t pixels() const noexcept { return static_cast<std::size_t>(height) * width; }
  bool empty() const noexcept { return data.empty(); }

  bool same_shape(const Grid& o) const noexcept {
    return height == o.height && width == o.width && channels == o.channels;
  }
  bool same_extent(int h, int w) const noexcept { return height == h && width == w; }

  std::span<T> pixel(int r, int col) noexcept { return {data.data() + index(r, col), static_cast<std::size_t>(channels)}; }
  std::span<const T> pixel(int r, int col) const noexcept {
    return {data.data() + index(r, col), static_cast<std::size_t>(channels)};
  }

  bool operator==(const Grid&) const = default;
};

using Field = Grid<double>;
using ImageF = Grid<float>;

template <typename T>
bool all_finite(const Grid<T>& g) {
  for (const T& v : g.data)
    if (!std::isfinite(v)) return false;
  return true;
}

template <typename T>
void require_same_shape(const Grid<T>& a, const Grid<T>& b, const char* what) {
  if (!a.same_shape(b)) throw ShapeError(std::string(what) + ": shape mismatch");
}

}  // namespace relflow
