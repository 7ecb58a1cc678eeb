#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace fusenet {

/// 2-D raster plane, row-major so rows map directly onto file payloads.
template <typename T>
using Plane = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Plane8 = Plane<std::uint8_t>;
using Plane16 = Plane<std::uint16_t>;

constexpr int kIgnoreLabel = 255;

/// Batch of class-index rasters (batch, height, width). Values are class
/// indices in [0, K) or kIgnoreLabel.
struct LabelBatch {
  Eigen::Index n = 0;
  Eigen::Index h = 0;
  Eigen::Index w = 0;
  std::vector<std::uint8_t> values;

  LabelBatch() = default;
  LabelBatch(Eigen::Index n_, Eigen::Index h_, Eigen::Index w_, std::uint8_t fill = 0)
      : n(n_), h(h_), w(w_), values(size_t(n_ * h_ * w_), fill) {}

  Eigen::Index size() const { return n * h * w; }

  std::uint8_t& at(Eigen::Index i, Eigen::Index y, Eigen::Index x) {
    return values[size_t((i * h + y) * w + x)];
  }
  std::uint8_t at(Eigen::Index i, Eigen::Index y, Eigen::Index x) const {
    return values[size_t((i * h + y) * w + x)];
  }

  std::uint8_t& operator[](Eigen::Index i) { return values[size_t(i)]; }
  std::uint8_t operator[](Eigen::Index i) const { return values[size_t(i)]; }
};

}  // namespace fusenet
