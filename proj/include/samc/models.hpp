#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include "samc/graph.hpp"

namespace samc {

/// Image geometry: channels, height, width.
struct ImageShape {
  std::size_t channels = 1;
  std::size_t height = 32;
  std::size_t width = 32;

  Shape chw() const { return {channels, height, width}; }
  std::size_t numel() const { return channels * height * width; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

class UnknownTaskError : public std::out_of_range {
 public:
  explicit UnknownTaskError(int task)
      : std::out_of_range("unknown task id " + std::to_string(task)), task_(task) {}
  int task() const { return task_; }

 private:
  int task_;
};

struct ClassifierConfig {
  ImageShape input;
  /// Filters per conv block. Every block but the last is conv3x3 -> ReLU ->
  /// 2x2 max pool; the last is conv3x3 -> ReLU (the saliency tap) -> pool.
  /// The paper's reduced ResNet-18 used [20, 40, 80, 160].
  std::vector<std::size_t> trunk_filters{8, 16, 16};
  std::size_t classes_per_task = 2;
  /// Subtracted from every pixel before the trunk (pixels are in [0, 1]).
  double input_offset = 0.5;
  std::uint64_t seed = 1;
};

struct ClassifierOutput {
  Tensor logits;  // [N, classes_per_task]
  Tape tape;
};

/// Shared convolutional trunk with one linear head per task. Parameters of all
/// heads live in one ParamSet ("trunk.*", then "head<t>.*" in creation order),
/// so gradients flatten over the full parameter vector.
class MultiHeadClassifier {
 public:
  explicit MultiHeadClassifier(ClassifierConfig config);

  /// Creates heads up to and including `task`. Returns the number created.
  std::size_t ensure_head(int task);
  bool has_head(int task) const { return task >= 0 && static_cast<std::size_t>(task) < graphs_.size(); }
  std::size_t num_heads() const { return graphs_.size(); }

  /// Forward pass through head `task`. x: [N, C, H, W].
  ClassifierOutput classify(const Tensor& x, int task) const;
  /// Same, with `params` (same layout as params()) in place of the model's own.
  ClassifierOutput classify(const Tensor& x, int task, const ParamSet& params) const;

  const ComputeGraph& graph(int task) const;
  NodeId saliency_tap() const { return tap_; }

  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  const ClassifierConfig& config() const { return config_; }

 private:
  ClassifierConfig config_;
  ParamSet params_;
  // node ids of the trunk are identical in every per-head graph
  std::vector<std::unique_ptr<ComputeGraph>> graphs_;
  NodeId tap_ = 0;
};

struct AutoencoderConfig {
  ImageShape image;
  std::vector<std::size_t> encoder_filters{8, 16, 32};
  std::vector<std::size_t> decoder_filters{32, 16, 8};
  double leaky_slope = 0.01;
  /// Add the network's output to its input before clamping, with the last
  /// conv zero-initialized, so an untrained model passes the coarse fill
  /// through unchanged.
  bool residual = true;
  std::uint64_t seed = 2;
};

/// Convolutional inpainting autoencoder: stride-2 3x3 convs each followed by
/// batch norm and LeakyReLU, mirrored by stride-2 transposed convs, then a
/// 3x3 conv to the image channels, an optional input skip, and a clamp to
/// [0, 1].
class InpaintAutoencoder {
 public:
  explicit InpaintAutoencoder(AutoencoderConfig config);

  /// Eval-mode reconstruction. x: [N, C, H, W] or [C, H, W].
  Tensor reconstruct(const Tensor& x_coarse) const;

  /// One SGD step on mean squared error against `target`. Returns the loss
  /// before the step.
  double train_step(const Tensor& input, const Tensor& target, double step_size);

  const ComputeGraph& graph() const { return graph_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  ParamSet& buffers() { return buffers_; }
  const ParamSet& buffers() const { return buffers_; }
  const AutoencoderConfig& config() const { return config_; }
  /// Spatial size of the bottleneck (height, width).
  std::pair<std::size_t, std::size_t> bottleneck() const { return bottleneck_; }

 private:
  AutoencoderConfig config_;
  ComputeGraph graph_;
  ParamSet params_;
  mutable ParamSet buffers_;  // eval-mode forward never writes them
  std::pair<std::size_t, std::size_t> bottleneck_;
};

/// Adds a leading batch dimension to a [C, H, W] tensor.
Tensor as_batch(const Tensor& image);

}  // namespace samc
