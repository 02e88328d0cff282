#pragma once

#include <cstddef>
#include <span>

#include "triadpi/random.hpp"
#include "triadpi/tensor.hpp"

namespace triadpi::layers {

/// Geometry of a 3D convolution plus the location of its weights inside a
/// flat parameter vector. Weights are stored as [kernel^3][out][in].
struct Conv3d {
  int in_ch = 0;
  int out_ch = 0;
  int kernel = 3;  // 1 or 3 (padding kernel/2)
  int stride = 1;  // 1 or 2
  std::size_t weight_offset = 0;
  std::size_t bias_offset = 0;

  int taps() const { return kernel * kernel * kernel; }
  std::size_t weight_count() const { return std::size_t(taps()) * out_ch * in_ch; }
  std::size_t param_count() const { return weight_count() + std::size_t(out_ch); }
  Grid3 out_grid(const Grid3& in) const;
};

/// Dense layer on a flat vector, weights [out][in].
struct Linear {
  int in_features = 0;
  int out_features = 0;
  std::size_t weight_offset = 0;
  std::size_t bias_offset = 0;

  std::size_t param_count() const { return std::size_t(in_features) * out_features + out_features; }
};

template <typename T>
void conv_forward(const Conv3d& conv, std::span<const T> params, const Tensor<T>& in, Tensor<T>& out);

/// Accumulates weight/bias gradients into `grads`; writes the input gradient
/// into `din` when non-null.
template <typename T>
void conv_backward(const Conv3d& conv, std::span<const T> params, const Tensor<T>& in,
                   const Tensor<T>& dout, Tensor<T>* din, std::span<T> grads);

/// Fan-in scaled uniform init, U(-sqrt(6/fan_in), +sqrt(6/fan_in)); zero bias.
template <typename T>
void conv_init(const Conv3d& conv, std::span<T> params, Rng& rng);

template <typename T>
void linear_forward(const Linear& fc, std::span<const T> params, std::span<const T> in, std::span<T> out);

template <typename T>
void linear_backward(const Linear& fc, std::span<const T> params, std::span<const T> in,
                     std::span<const T> dout, std::span<T> din, std::span<T> grads);

template <typename T>
void linear_init(const Linear& fc, std::span<T> params, Rng& rng);

template <typename T>
void relu_inplace(Tensor<T>& t);

/// dout *= (out > 0), in place.
template <typename T>
void relu_backward_inplace(const Tensor<T>& out, Tensor<T>& dout);

/// Inverted dropout mask: 0 with probability rate, 1/(1-rate) otherwise.
template <typename T>
Tensor<T> dropout_mask(int channels, const Grid3& grid, double rate, Rng& rng);

template <typename T>
void multiply_inplace(Tensor<T>& t, const Tensor<T>& mask);

/// Nearest-neighbour upsampling by 2 in every axis, cropped to `target`.
template <typename T>
Tensor<T> upsample2(const Tensor<T>& in, const Grid3& target);

template <typename T>
Tensor<T> upsample2_backward(const Tensor<T>& dout, const Grid3& in_grid);

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b);

/// Splits a gradient of concat(a, b) back into its two parts.
template <typename T>
void split(const Tensor<T>& d, int a_channels, Tensor<T>& da, Tensor<T>& db);

/// Channel-wise softmax at every voxel.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

/// Given probabilities p = softmax(z) and dL/dp, returns dL/dz.
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& probs, const Tensor<T>& dprobs);

}  // namespace triadpi::layers
