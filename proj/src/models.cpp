#include "samc/models.hpp"

#include <string>

namespace samc {

Tensor as_batch(const Tensor& image) {
  if (image.rank() != 3) throw ShapeError("as_batch expects [C,H,W], got " + shape_str(image.shape()));
  Shape s{1};
  s.insert(s.end(), image.shape().begin(), image.shape().end());
  return image.reshaped(std::move(s));
}

namespace {

std::unique_ptr<ComputeGraph> build_classifier(const ClassifierConfig& cfg, int task, NodeId& tap) {
  if (cfg.trunk_filters.empty()) throw std::invalid_argument("classifier needs at least one conv block");
  if (cfg.classes_per_task < 2) throw std::invalid_argument("classes_per_task must be >= 2");
  auto g = std::make_unique<ComputeGraph>(cfg.input.chw());
  NodeId x = 0;
  for (std::size_t i = 0; i < cfg.trunk_filters.size(); ++i) {
    x = g->conv2d(x, "trunk.conv" + std::to_string(i), cfg.trunk_filters[i], 3, 1, 1);
    x = g->relu(x);
    if (i + 1 == cfg.trunk_filters.size()) {
      tap = x;
      g->tap(x);
    }
    const auto& s = g->nodes()[x].out_shape;
    if (s[1] >= 2 && s[2] >= 2) x = g->max_pool2d(x, 2, 2);
  }
  g->linear(x, "head" + std::to_string(task), cfg.classes_per_task);
  return g;
}

}  // namespace

MultiHeadClassifier::MultiHeadClassifier(ClassifierConfig config) : config_(std::move(config)) {
  ensure_head(0);
}

std::size_t MultiHeadClassifier::ensure_head(int task) {
  if (task < 0) throw UnknownTaskError(task);
  std::size_t created = 0;
  while (graphs_.size() <= static_cast<std::size_t>(task)) {
    const int t = static_cast<int>(graphs_.size());
    graphs_.push_back(build_classifier(config_, t, tap_));
    init_params(*graphs_.back(), params_, nullptr, config_.seed * 7919 + static_cast<std::uint64_t>(t));
    ++created;
  }
  return created;
}

const ComputeGraph& MultiHeadClassifier::graph(int task) const {
  if (!has_head(task)) throw UnknownTaskError(task);
  return *graphs_[static_cast<std::size_t>(task)];
}

ClassifierOutput MultiHeadClassifier::classify(const Tensor& x, int task) const {
  return classify(x, task, params_);
}

ClassifierOutput MultiHeadClassifier::classify(const Tensor& x, int task, const ParamSet& params) const {
  const ComputeGraph& g = graph(task);
  if (&params != &params_ && !params.same_layout(params_))
    throw std::invalid_argument("classify: parameter layout differs");
  Tensor centered = x;
  if (config_.input_offset != 0.0)
    for (auto& v : centered.vec()) v -= config_.input_offset;
  auto r = forward(g, params, centered, Mode::Eval, nullptr);
  return {std::move(r.output), std::move(r.tape)};
}

InpaintAutoencoder::InpaintAutoencoder(AutoencoderConfig config)
    : config_(std::move(config)), graph_(config_.image.chw()) {
  if (config_.encoder_filters.size() != config_.decoder_filters.size() ||
      config_.encoder_filters.empty())
    throw std::invalid_argument("autoencoder needs matching, non-empty encoder/decoder plans");
  std::vector<std::pair<std::size_t, std::size_t>> sizes{{config_.image.height, config_.image.width}};
  NodeId x = 0;
  for (std::size_t i = 0; i < config_.encoder_filters.size(); ++i) {
    const std::string p = "enc" + std::to_string(i);
    x = graph_.conv2d(x, p + ".conv", config_.encoder_filters[i], 3, 2, 1);
    x = graph_.batch_norm2d(x, p + ".bn");
    x = graph_.leaky_relu(x, config_.leaky_slope);
    const auto& s = graph_.nodes()[x].out_shape;
    sizes.emplace_back(s[1], s[2]);
  }
  bottleneck_ = sizes.back();
  if (bottleneck_.first < 1 || bottleneck_.second < 1)
    throw std::invalid_argument("autoencoder bottleneck collapsed below 1x1");
  const std::size_t depth = config_.decoder_filters.size();
  for (std::size_t i = 0; i < depth; ++i) {
    const auto [in_h, in_w] = sizes[depth - i];
    const auto [to_h, to_w] = sizes[depth - i - 1];
    // (in-1)*2 - 2 + 3 + out_pad == to; out_pad is 0 or 1
    const std::size_t op_h = to_h + 1 - 2 * in_h, op_w = to_w + 1 - 2 * in_w;
    if (op_h != op_w || op_h > 1)
      throw std::invalid_argument("autoencoder: cannot mirror encoder for this resolution");
    x = graph_.conv_transpose2d(x, "dec" + std::to_string(i) + ".deconv",
                                config_.decoder_filters[i], 3, 2, 1, op_h);
    x = graph_.leaky_relu(x, config_.leaky_slope);
  }
  x = graph_.conv2d(x, "out.conv", config_.image.channels, 3, 1, 1);
  if (config_.residual) x = graph_.add(x, 0);
  graph_.clamp(x, 0.0, 1.0);
  init_params(graph_, params_, &buffers_, config_.seed);
  if (config_.residual)
    params_.get("out.conv.weight").fill(0.0);
  else
    params_.get("out.conv.bias").fill(0.5);
}

Tensor InpaintAutoencoder::reconstruct(const Tensor& x_coarse) const {
  if (x_coarse.rank() == 3)
    return reconstruct(as_batch(x_coarse)).reshaped(config_.image.chw());
  return forward(graph_, params_, x_coarse, Mode::Eval, &buffers_).output;
}

double InpaintAutoencoder::train_step(const Tensor& input, const Tensor& target, double step_size) {
  auto r = forward(graph_, params_, input, Mode::Train, &buffers_);
  auto loss = mean_squared_error(r.output, target);
  auto grads = backward(r.tape, loss.grad);
  sgd_step(params_, grads.params, step_size);
  return loss.value;
}

}  // namespace samc
