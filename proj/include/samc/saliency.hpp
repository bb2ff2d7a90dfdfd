#pragma once

#include <span>
#include <vector>

#include "samc/image.hpp"
#include "samc/models.hpp"

namespace samc {

/// Per-image relevance field in [0, 1], shape [H, W].
struct SaliencyMap {
  Tensor values;
  int cls = 0;
  int task = 0;
};

/// Grad-CAM from one image's last-conv activations A and dScore/dA, both
/// [K, h, w]: weights alpha_k = spatial mean of dA^k, map = ReLU(sum_k
/// alpha_k A^k), bilinearly resized to out_h x out_w and min-max normalized.
/// A constant map normalizes to all zeros.
Tensor grad_cam_map(const Tensor& activation, const Tensor& score_grad, std::size_t out_h,
                    std::size_t out_w);

/// Min-max normalization to [0, 1]; constant input gives all zeros.
Tensor normalize_map(const Tensor& raw);

/// Grad-CAM for each image of a batch x: [N, C, H, W], using the model's
/// saliency tap and the class score (logit) of classes[i] on head `task`.
std::vector<SaliencyMap> grad_cam(const MultiHeadClassifier& model, const Tensor& x,
                                  std::span<const int> classes, int task);

SaliencyMap grad_cam(const MultiHeadClassifier& model, const Tensor& image, int cls, int task);

struct Extraction {
  PixelMask mask;
  double kept_fraction = 0.0;
};

/// Strict threshold m > mu, without the empty-mask fallback.
PixelMask threshold_mask(const SaliencyMap& m, double mu);

/// Keeps pixels whose saliency exceeds mu (all channels). An empty result
/// falls back to the single most salient pixel, first in row-major order.
Extraction extract(const Tensor& image, const SaliencyMap& m, double mu);

}  // namespace samc
