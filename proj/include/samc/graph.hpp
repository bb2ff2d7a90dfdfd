#pragma once

// Reverse-mode differentiation over a static, per-sample-shaped op list.
//
// Tensors flowing through a graph carry a leading batch dimension that the
// graph does not fix; every other dimension is declared at construction.
// Spatial tensors are laid out as [N, C, H, W].

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "samc/tensor.hpp"

namespace samc {

using NodeId = std::size_t;

/// Raised when a tape is used outside its forward/backward contract.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Named tensors with a stable (insertion) iteration order.
class ParamSet {
 public:
  void add(std::string name, Tensor value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;

  std::size_t count() const { return entries_.size(); }
  const std::string& name(std::size_t i) const { return entries_[i].first; }
  Tensor& at(std::size_t i) { return entries_[i].second; }
  const Tensor& at(std::size_t i) const { return entries_[i].second; }

  /// Total number of scalars across all entries.
  std::size_t flat_size() const;
  std::vector<double> flatten() const;
  void unflatten(std::span<const double> flat);

  /// Same names and shapes, every value zero.
  ParamSet zeros_like() const;
  bool same_layout(const ParamSet& other) const;

  friend bool operator==(const ParamSet&, const ParamSet&) = default;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

enum class OpKind {
  Input,
  Conv2d,
  ConvTranspose2d,
  MaxPool2d,
  GlobalAvgPool,
  Relu,
  LeakyRelu,
  BatchNorm2d,
  Linear,
  BilinearUpsample,
  Clamp,
  Add,
};

const char* op_name(OpKind kind);

struct Node {
  OpKind kind = OpKind::Input;
  NodeId input = 0;
  NodeId input2 = 0;  // second operand of Add
  Shape out_shape;  // per sample, without the batch dimension
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t out_pad = 0;
  double slope = 0.01;
  double lo = 0.0;
  double hi = 1.0;
  double eps = 1e-5;
  double momentum = 0.1;
  std::string weight;  // parameter names; empty when unused
  std::string bias;
  std::string running_mean;  // batch-norm buffers
  std::string running_var;
};

struct ParamSpec {
  std::string name;
  Shape shape;
};

/// Ordered op list. Node 0 is the input; insertion order is topological.
class ComputeGraph {
 public:
  explicit ComputeGraph(Shape input_shape);

  NodeId conv2d(NodeId in, const std::string& prefix, std::size_t out_channels,
                std::size_t kernel, std::size_t stride, std::size_t pad);
  NodeId conv_transpose2d(NodeId in, const std::string& prefix, std::size_t out_channels,
                          std::size_t kernel, std::size_t stride, std::size_t pad,
                          std::size_t out_pad);
  NodeId max_pool2d(NodeId in, std::size_t kernel, std::size_t stride);
  NodeId global_avg_pool(NodeId in);
  NodeId relu(NodeId in);
  NodeId leaky_relu(NodeId in, double slope);
  NodeId batch_norm2d(NodeId in, const std::string& prefix, double momentum = 0.1,
                      double eps = 1e-5);
  /// Fully connected layer; the input's per-sample dims are flattened.
  NodeId linear(NodeId in, const std::string& prefix, std::size_t out_features);
  NodeId bilinear_upsample(NodeId in, std::size_t out_h, std::size_t out_w);
  NodeId clamp(NodeId in, double lo, double hi);
  /// Elementwise sum of two nodes with equal shapes.
  NodeId add(NodeId a, NodeId b);

  /// Retain the gradient of the loss with respect to this node's output.
  void tap(NodeId id);

  const Shape& input_shape() const { return nodes_.front().out_shape; }
  const Shape& output_shape() const { return nodes_.back().out_shape; }
  NodeId output() const { return nodes_.size() - 1; }
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<NodeId>& taps() const { return taps_; }
  const std::vector<ParamSpec>& param_specs() const { return params_; }
  const std::vector<ParamSpec>& buffer_specs() const { return buffers_; }

 private:
  const Node& checked(NodeId id) const;
  NodeId push(Node node);

  std::vector<Node> nodes_;
  std::vector<NodeId> taps_;
  std::vector<ParamSpec> params_;
  std::vector<ParamSpec> buffers_;
};

enum class Mode { Train, Eval };

/// Activation record of one forward pass. Refers to (does not own) the graph
/// and parameters it was produced with; both must outlive the tape.
class Tape {
 public:
  bool valid() const { return graph_ != nullptr; }
  const Tensor& value(NodeId id) const { return values_.at(id); }
  const Tensor& output() const { return values_.back(); }
  std::size_t batch() const { return batch_; }

 private:
  friend struct TapeAccess;
  const ComputeGraph* graph_ = nullptr;
  const ParamSet* params_ = nullptr;
  Mode mode_ = Mode::Eval;
  std::size_t batch_ = 0;
  std::vector<Tensor> values_;
  std::vector<std::vector<std::size_t>> argmax_;  // max-pool winners
  std::vector<Tensor> xhat_;                      // batch-norm normalized input
  std::vector<std::vector<double>> inv_std_;
};

struct ForwardResult {
  Tensor output;
  Tape tape;
};

/// Runs the graph. In Train mode batch-norm nodes use batch statistics and
/// update the running statistics held in `buffers`; in Eval mode they read
/// them. `buffers` may be null only if the graph has no batch-norm nodes.
ForwardResult forward(const ComputeGraph& graph, const ParamSet& params, const Tensor& input,
                      Mode mode = Mode::Eval, ParamSet* buffers = nullptr);

struct Gradients {
  ParamSet params;                 // same layout as the forward ParamSet
  std::map<NodeId, Tensor> taps;   // d loss / d activation for each tap
  Tensor input;                    // d loss / d input
};

/// Back-propagates `loss_grad` (d loss / d output, same shape as the output).
Gradients backward(const Tape& tape, const Tensor& loss_grad);

/// p <- p - step_size * grad(p) for every entry.
void sgd_step(ParamSet& params, const ParamSet& grads, double step_size);

struct LossResult {
  double value = 0.0;
  Tensor grad;  // d value / d prediction
};

/// Mean softmax cross-entropy over the batch. logits: [N, K].
LossResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Mean of squared differences over all elements.
LossResult mean_squared_error(const Tensor& prediction, const Tensor& target);

/// Bilinear resize of the trailing two dims (half-pixel centers, edge clamp).
Tensor bilinear_resize(const Tensor& src, std::size_t out_h, std::size_t out_w);

/// Fills missing parameters and buffers of `graph` with He-normal weights,
/// zero biases, unit batch-norm scale and unit running variance.
void init_params(const ComputeGraph& graph, ParamSet& params, ParamSet* buffers,
                 std::uint64_t seed);

// Checkpoint file: "SAMC", u32 version, then records of
// (u64 name length, name bytes, u64 rank, u64 dims..., f64 data...) until EOF.
// All integers and floats little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const ParamSet& params);
ParamSet decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const ParamSet& params);
ParamSet load_checkpoint(const std::filesystem::path& path);

}  // namespace samc
