#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "triadpi/layers.hpp"
#include "triadpi/random.hpp"
#include "triadpi/tensor.hpp"

namespace triadpi::nets {

enum class HeadKind { segmentation, regression };

/// Fixed per-channel input affine, (x - mean) / sd, fitted once on the training
/// fold and stored with the checkpoint. Identity when empty.
struct InputNorm {
  std::vector<double> mean, sd;

  bool empty() const { return mean.empty(); }
  template <typename T>
  Tensor<T> apply(const Tensor<T>& x) const;
  bool operator==(const InputNorm&) const = default;
};

/// Per-channel mean and population standard deviation over all voxels of all
/// tensors (sd floored at 1e-6).
InputNorm fit_input_norm(std::span<const Tensor<float>* const> images);

struct NetSpec {
  int in_channels = 4;
  int n_classes = 4;
  int base_filters = 8;
  int depth = 3;
  int n_heads = 1;
  double dropout_rate = 0.0;
  HeadKind head_kind = HeadKind::segmentation;
  int regression_outputs = 0;  // 3 (N - 1) for the quantile regressor

  void validate() const;
  bool operator==(const NetSpec&) const = default;
};

/// Per-head class probabilities and the logits they came from. Heads are
/// ordered (lower, mean, upper) for the three-head network.
template <typename T>
struct SoftMaskSetT {
  std::vector<Tensor<T>> probs;   // each [N, D, H, W]
  std::vector<Tensor<T>> logits;  // each [N, D, H, W]
  std::vector<std::string> head_names;

  int n_heads() const { return int(probs.size()); }
  const Tensor<T>& head(const std::string& name) const;
};
using SoftMaskSet = SoftMaskSetT<float>;

enum class LossKind { dice, triad, pinball_compound };

struct TrainConfig {
  double learning_rate = 2e-4;
  int epochs = 10;
  int batch_size = 1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  LossKind loss = LossKind::dice;
  double gamma = 0.2;  // triad
  double alpha = 0.1;  // pinball compound
  /// Weight of a voxelwise cross-entropy term added to every head's
  /// segmentation loss. Overlap losses on a softmax cannot recover a class
  /// whose probability is already near zero where it lives (the gradient
  /// scales with that probability); this term keeps the signal alive.
  /// 0 trains on the overlap losses alone.
  double ce_weight = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Adam with bias correction over a flat parameter vector.
template <typename T>
class Adam {
 public:
  Adam(std::size_t n, double lr, double beta1, double beta2, double eps);
  void step(std::span<T> params, std::span<const T> grads);
  long steps() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::vector<T> m_, v_;
};

/// U-shaped encoder-decoder with skip connections.
///
/// Level 0 runs two 3x3x3 convolutions at full resolution; each deeper level
/// downsamples with a stride-2 convolution followed by a 3x3x3 convolution.
/// The decoder upsamples by nearest neighbour, applies a 1x1x1 convolution,
/// concatenates the skip tensor and fuses with a 3x3x3 convolution. Each head
/// is an identical output block (1x1x1 conv + ReLU + 1x1x1 conv to N logits)
/// on the shared trunk. With dropout_rate > 0 every encoder/decoder ReLU is
/// followed by inverted dropout.
template <typename T>
class SegNet {
 public:
  struct Unit {
    layers::Conv3d conv;
    bool relu = true;
    bool dropout = false;
  };

  /// Activations recorded during a training forward pass.
  struct Tape {
    struct UnitAct {
      Tensor<T> out;   // after ReLU and dropout
      Tensor<T> mask;  // empty without dropout
    };
    Tensor<T> input;
    std::vector<UnitAct> enc_a, enc_b;
    std::vector<Tensor<T>> up_in;
    std::vector<UnitAct> dec_up;
    std::vector<Tensor<T>> fuse_in;
    std::vector<UnitAct> dec_fuse;
    std::vector<UnitAct> head_hidden;
    SoftMaskSetT<T> masks;
  };

  SegNet() = default;
  SegNet(const NetSpec& spec, std::uint64_t seed);

  const NetSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t param_count() const { return params_.size(); }
  std::size_t head_param_count() const;
  std::span<T> params() { return params_; }
  std::span<const T> params() const { return params_; }
  const InputNorm& input_norm() const { return norm_; }
  void set_input_norm(InputNorm norm);

  /// Inference with dropout disabled. Thread-safe on a const net.
  SoftMaskSetT<T> forward(const Tensor<T>& input) const;

  /// One stochastic pass per sample with dropout active; pass t draws its masks
  /// from a stream derived from (seed, t).
  std::vector<SoftMaskSetT<T>> forward_mc(const Tensor<T>& input, int passes, std::uint64_t seed) const;

  /// Forward pass that records activations. `rng` drives dropout when non-null.
  Tape forward_train(const Tensor<T>& input, Rng* dropout_rng) const;

  /// Back-propagates dLoss/dlogits (one tensor per head) and accumulates into grads.
  void backward(const Tape& tape, const std::vector<Tensor<T>>& dlogits, std::span<T> grads) const;

 private:
  SoftMaskSetT<T> run(const Tensor<T>& input, Rng* dropout_rng, Tape* tape) const;
  void check_input(const Tensor<T>& input) const;

  NetSpec spec_{};
  std::uint64_t seed_ = 0;
  InputNorm norm_;
  std::vector<T> params_;
  std::vector<Unit> enc_a_, enc_b_, dec_up_, dec_fuse_, head_hidden_;
  std::vector<layers::Conv3d> head_out_;
};

/// Strided-convolution encoder, global average pooling and a two-layer
/// projection to `regression_outputs` values. Outputs are produced in a
/// standardised space and mapped back through a fixed per-output affine
/// (offset + scale * raw) set from the training targets.
template <typename T>
class RegNet {
 public:
  struct Tape {
    Tensor<T> input;
    std::vector<Tensor<T>> conv_out;
    std::vector<T> pooled, hidden, raw;
  };

  RegNet() = default;
  RegNet(const NetSpec& spec, std::uint64_t seed);

  const NetSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t param_count() const { return params_.size(); }
  std::span<T> params() { return params_; }
  std::span<const T> params() const { return params_; }
  const InputNorm& input_norm() const { return norm_; }
  void set_input_norm(InputNorm norm);

  std::vector<double>& output_offset() { return offset_; }
  std::vector<double>& output_scale() { return scale_; }
  const std::vector<double>& output_offset() const { return offset_; }
  const std::vector<double>& output_scale() const { return scale_; }

  /// Output in target units, laid out per class as (q_lo, q_mid, q_hi).
  std::vector<double> forward(const Tensor<T>& input) const;
  Tape forward_train(const Tensor<T>& input) const;
  /// dLoss/draw (standardised space) -> accumulated parameter grads.
  void backward(const Tape& tape, std::span<const double> draw, std::span<T> grads) const;

 private:
  std::vector<double> denormalise(std::span<const T> raw) const;

  NetSpec spec_{};
  std::uint64_t seed_ = 0;
  InputNorm norm_;
  std::vector<T> params_;
  std::vector<layers::Conv3d> convs_;
  layers::Linear fc1_, fc2_;
  std::vector<double> offset_, scale_;
};

template <typename T>
SegNet<T> build_net(const NetSpec& spec, std::uint64_t seed) {
  return SegNet<T>(spec, seed);
}

template <typename T>
RegNet<T> build_regressor(const NetSpec& spec, std::uint64_t seed) {
  return RegNet<T>(spec, seed);
}

/// Regressor input: image channels followed by the one-hot segmentation.
template <typename T>
Tensor<T> regressor_input(const Tensor<T>& intensities, const Tensor<T>& one_hot_segmentation);

/// Convenience wrapper matching the regressor contract.
template <typename T>
std::vector<double> regress(const RegNet<T>& net, const Tensor<T>& intensities, const Tensor<T>& one_hot_segmentation);

struct SegExample {
  const Tensor<float>* image = nullptr;
  const std::vector<std::uint8_t>* labels = nullptr;
};

struct RegExample {
  Tensor<float> input;  // regressor_input(...)
  std::vector<double> targets;  // per foreground class, mL
};

struct TrainResult {
  std::vector<double> loss_trace;  // mean loss per epoch
};

using EpochCallback = std::function<void(int epoch, double loss)>;

/// Full-batch-order mini-batch Adam. The shuffle order of every epoch and every
/// dropout mask is derived from cfg.seed. Throws NumericalError on a
/// non-finite loss.
TrainResult train(SegNet<float>& net, std::span<const SegExample> data, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});
TrainResult train_regressor(RegNet<float>& net, std::span<const RegExample> data, const TrainConfig& cfg,
                            const EpochCallback& on_epoch = {});

/// Training objective and dLoss/dlogits for one example: the loss selected by
/// cfg.loss plus the cross-entropy term weighted by cfg.ce_weight.
template <typename T>
double segmentation_loss(const SoftMaskSetT<T>& out, const Tensor<T>& target, const TrainConfig& cfg,
                         std::vector<Tensor<T>>* dlogits);

// --- checkpoints -------------------------------------------------------------

struct CheckpointInfo {
  std::string kind;  // "segmentation" or "regression"
  NetSpec spec;
  TrainConfig train;
  std::uint64_t seed = 0;
  InputNorm input_norm;
  std::vector<double> loss_trace;
  std::string content_hash;  // git blob SHA-1 of model.bin
};

void save_checkpoint(const std::filesystem::path& dir, const SegNet<float>& net, const TrainConfig& cfg,
                     const std::vector<double>& loss_trace);
void save_checkpoint(const std::filesystem::path& dir, const RegNet<float>& net, const TrainConfig& cfg,
                     const std::vector<double>& loss_trace);
CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir);
SegNet<float> load_segnet(const std::filesystem::path& dir);
RegNet<float> load_regnet(const std::filesystem::path& dir);

void to_json(nlohmann::json& j, const NetSpec& s);
void from_json(const nlohmann::json& j, NetSpec& s);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

}  // namespace triadpi::nets
