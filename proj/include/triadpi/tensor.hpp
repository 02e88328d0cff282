#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "triadpi/errors.hpp"

namespace triadpi {

/// Spatial extent of a volume, in voxels (depth, height, width).
struct Grid3 {
  int d = 0;
  int h = 0;
  int w = 0;

  std::size_t voxels() const { return std::size_t(d) * std::size_t(h) * std::size_t(w); }
  bool operator==(const Grid3&) const = default;
  std::string str() const {
    return std::to_string(d) + "x" + std::to_string(h) + "x" + std::to_string(w);
  }
};

/// Dense channel-major volume [C, D, H, W] in C order.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(int channels, Grid3 grid, T fill = T(0))
      : channels_(channels), grid_(grid), data_(std::size_t(channels) * grid.voxels(), fill) {}

  int channels() const { return channels_; }
  const Grid3& grid() const { return grid_; }
  std::size_t voxels() const { return grid_.voxels(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  std::span<T> channel(int c) { return {data_.data() + std::size_t(c) * voxels(), voxels()}; }
  std::span<const T> channel(int c) const {
    return {data_.data() + std::size_t(c) * voxels(), voxels()};
  }

  T& at(int c, int z, int y, int x) { return data_[index(c, z, y, x)]; }
  const T& at(int c, int z, int y, int x) const { return data_[index(c, z, y, x)]; }

  std::size_t index(int c, int z, int y, int x) const {
    return ((std::size_t(c) * grid_.d + z) * grid_.h + y) * grid_.w + x;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const { return channels_ == o.channels_ && grid_ == o.grid_; }

  bool operator==(const Tensor&) const = default;

 private:
  int channels_ = 0;
  Grid3 grid_{};
  std::vector<T> data_;
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& src) {
  Tensor<To> out(src.channels(), src.grid());
  for (std::size_t i = 0; i < src.size(); ++i) out.data()[i] = static_cast<To>(src.data()[i]);
  return out;
}

inline std::string shape_str(int channels, const Grid3& g) {
  return "[" + std::to_string(channels) + ", " + g.str() + "]";
}

}  // namespace triadpi
