#include "samc/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace samc {

Tensor normalize_map(const Tensor& raw) {
  const auto [lo, hi] = std::minmax_element(raw.vec().begin(), raw.vec().end());
  const double range = *hi - *lo;
  Tensor out(raw.shape(), 0.0);
  if (!(range > 1e-12 * std::max(std::abs(*hi), 1e-300))) return out;
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - *lo) / range;
  return out;
}

Tensor grad_cam_map(const Tensor& activation, const Tensor& score_grad, std::size_t out_h,
                    std::size_t out_w) {
  if (activation.rank() != 3 || activation.shape() != score_grad.shape())
    throw ShapeError("grad_cam_map: activation " + shape_str(activation.shape()) +
                     " vs gradient " + shape_str(score_grad.shape()));
  const std::size_t k = activation.dim(0), h = activation.dim(1), w = activation.dim(2);
  const std::size_t hw = h * w;
  Tensor cam({h, w}, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    double alpha = 0.0;
    for (std::size_t i = 0; i < hw; ++i) alpha += score_grad[c * hw + i];
    alpha /= static_cast<double>(hw);
    for (std::size_t i = 0; i < hw; ++i) cam[i] += alpha * activation[c * hw + i];
  }
  for (auto& v : cam.vec()) v = std::max(v, 0.0);
  return normalize_map(bilinear_resize(cam, out_h, out_w));
}

std::vector<SaliencyMap> grad_cam(const MultiHeadClassifier& model, const Tensor& x,
                                  std::span<const int> classes, int task) {
  const auto& cfg = model.config();
  if (x.rank() != 4 || x.dim(0) != classes.size())
    throw ShapeError("grad_cam: batch " + shape_str(x.shape()) + " vs " +
                     std::to_string(classes.size()) + " classes");
  const std::size_t n = x.dim(0), k = cfg.classes_per_task;
  auto out = model.classify(x, task);
  // samples are independent (no batch statistics in the trunk), so one
  // backward of sum_i f_{c_i}(x_i) yields every per-image score gradient
  Tensor seed(out.logits.shape(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (classes[i] < 0 || static_cast<std::size_t>(classes[i]) >= k)
      throw std::out_of_range("grad_cam: class " + std::to_string(classes[i]) +
                              " invalid for task " + std::to_string(task));
    seed[i * k + static_cast<std::size_t>(classes[i])] = 1.0;
  }
  const auto grads = backward(out.tape, seed);
  const NodeId tap = model.saliency_tap();
  const Tensor& act = out.tape.value(tap);
  const Tensor& dact = grads.taps.at(tap);

  std::vector<SaliencyMap> maps;
  maps.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    maps.push_back({grad_cam_map(unstack_one(act, i), unstack_one(dact, i), cfg.input.height,
                                 cfg.input.width),
                    classes[i], task});
  return maps;
}

SaliencyMap grad_cam(const MultiHeadClassifier& model, const Tensor& image, int cls, int task) {
  const int c[] = {cls};
  return std::move(grad_cam(model, as_batch(image), c, task).front());
}

PixelMask threshold_mask(const SaliencyMap& m, double mu) {
  if (!(mu >= 0.0 && mu <= 1.0)) throw std::invalid_argument("threshold must lie in [0,1]");
  const std::size_t h = m.values.dim(0), w = m.values.dim(1);
  PixelMask mask(h, w);
  for (std::size_t i = 0; i < h * w; ++i) mask.set(i, m.values[i] > mu);
  return mask;
}

Extraction extract(const Tensor& image, const SaliencyMap& m, double mu) {
  if (m.values.rank() != 2 || image.rank() != 3 || image.dim(1) != m.values.dim(0) ||
      image.dim(2) != m.values.dim(1))
    throw ShapeError("extract: image " + shape_str(image.shape()) + " vs saliency " +
                     shape_str(m.values.shape()));
  Extraction e{threshold_mask(m, mu), 0.0};
  if (e.mask.none()) {
    const auto it = std::max_element(m.values.vec().begin(), m.values.vec().end());
    e.mask.set(static_cast<std::size_t>(it - m.values.vec().begin()), true);
  }
  e.kept_fraction = static_cast<double>(e.mask.count()) / static_cast<double>(e.mask.size());
  return e;
}

}  // namespace samc
