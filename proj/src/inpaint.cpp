#include "samc/inpaint.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace samc {

const char* completion_mode_name(CompletionMode mode) {
  switch (mode) {
    case CompletionMode::ZeroPadding: return "zero_padding";
    case CompletionMode::RuleOnly: return "rule_only";
    case CompletionMode::AeOnly: return "ae_only";
    case CompletionMode::RulePlusAe: return "rule_plus_ae";
  }
  return "?";
}

std::optional<CompletionMode> parse_completion_mode(const std::string& name) {
  for (auto m : {CompletionMode::ZeroPadding, CompletionMode::RuleOnly, CompletionMode::AeOnly,
                 CompletionMode::RulePlusAe})
    if (name == completion_mode_name(m)) return m;
  return std::nullopt;
}

bool uses_autoencoder(CompletionMode mode) {
  return mode == CompletionMode::AeOnly || mode == CompletionMode::RulePlusAe;
}

namespace {

void check_mask(const Tensor& sparse, const PixelMask& mask) {
  if (sparse.rank() != 3 || mask.rows() != sparse.dim(1) || mask.cols() != sparse.dim(2))
    throw ShapeError("fill: image " + shape_str(sparse.shape()) + " vs mask " +
                     std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()));
}

}  // namespace

Tensor rule_fill(const Tensor& sparse, const PixelMask& mask, double tol, std::size_t max_iters) {
  check_mask(sparse, mask);
  if (mask.none()) throw std::invalid_argument("rule_fill: no known pixels");
  if (!(tol > 0.0)) throw std::invalid_argument("rule_fill: tolerance must be positive");
  const std::size_t c = sparse.dim(0), h = sparse.dim(1), w = sparse.dim(2);
  Tensor out = sparse;
  std::vector<std::size_t> unknown;
  for (std::size_t i = 0; i < h * w; ++i)
    if (!mask.get(i)) unknown.push_back(i);
  if (unknown.empty()) return out;

  for (std::size_t ch = 0; ch < c; ++ch) {
    double* p = out.data().data() + ch * h * w;
    double mean = 0.0, lo = 1.0, hi = 0.0;
    for (std::size_t i = 0; i < h * w; ++i)
      if (mask.get(i)) mean += p[i], lo = std::min(lo, p[i]), hi = std::max(hi, p[i]);
    mean /= static_cast<double>(mask.count());
    for (auto i : unknown) p[i] = std::clamp(mean, lo, hi);

    for (std::size_t it = 0; it < max_iters; ++it) {
      double max_change = 0.0;
      for (auto i : unknown) {
        const std::size_t r = i / w, col = i % w;
        double s = 0.0;
        int n = 0;
        if (r > 0) s += p[i - w], ++n;
        if (r + 1 < h) s += p[i + w], ++n;
        if (col > 0) s += p[i - 1], ++n;
        if (col + 1 < w) s += p[i + 1], ++n;
        if (n == 0) continue;  // 1x1 image
        // the clamp only absorbs rounding; harmonic averages stay in [lo, hi]
        const double v = std::clamp(s / n, lo, hi);
        max_change = std::max(max_change, std::abs(v - p[i]));
        p[i] = v;
      }
      if (max_change < tol) break;
    }
  }
  return out;
}

Tensor zero_fill(const Tensor& sparse, const PixelMask& mask) {
  check_mask(sparse, mask);
  const std::size_t c = sparse.dim(0), hw = sparse.dim(1) * sparse.dim(2);
  Tensor out = sparse;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < hw; ++i)
      if (!mask.get(i)) out[ch * hw + i] = 0.0;
  return out;
}

Tensor coarse_fill(const Tensor& sparse, const PixelMask& mask, const CompletionConfig& cfg) {
  switch (cfg.mode) {
    case CompletionMode::RuleOnly:
    case CompletionMode::RulePlusAe:
      return rule_fill(sparse, mask, cfg.diffusion_tol, cfg.diffusion_max_iters);
    case CompletionMode::ZeroPadding:
    case CompletionMode::AeOnly:
      return zero_fill(sparse, mask);
  }
  return zero_fill(sparse, mask);
}

std::vector<CompletedSample> complete(const EpisodicMemory& mem, const InpaintAutoencoder& ae,
                                      const CompletionConfig& cfg, int task) {
  const auto& stored = mem.samples(task);
  std::vector<CompletedSample> out;
  out.reserve(stored.size());
  std::vector<Tensor> coarse;
  for (const auto& s : stored) {
    auto d = coo_decode(s);
    coarse.push_back(coarse_fill(d.image, d.mask, cfg));
    out.push_back({Tensor(), s.label});
  }
  if (!uses_autoencoder(cfg.mode)) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i].image = std::move(coarse[i]);
    return out;
  }
  const Tensor refined = ae.reconstruct(stack(coarse));
  for (std::size_t i = 0; i < out.size(); ++i) out[i].image = unstack_one(refined, i);
  return out;
}

std::vector<double> finetune_ae(InpaintAutoencoder& ae, std::span<const Tensor> images,
                                std::span<const int> labels, const MaskFn& mask_fn,
                                const CompletionConfig& cfg, std::uint64_t seed) {
  std::vector<double> trace;
  if (!uses_autoencoder(cfg.mode) || cfg.ae_steps == 0) return trace;
  if (images.empty() || images.size() != labels.size())
    throw std::invalid_argument("finetune_ae: need a non-empty, labelled task set");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, images.size() - 1);
  const std::size_t bsz = std::max<std::size_t>(1, std::min(cfg.ae_batch, images.size()));
  trace.reserve(cfg.ae_steps);
  for (std::size_t step = 0; step < cfg.ae_steps; ++step) {
    std::vector<Tensor> clean;
    std::vector<int> ys;
    for (std::size_t k = 0; k < bsz; ++k) {
      const std::size_t i = pick(rng);
      clean.push_back(images[i]);
      ys.push_back(labels[i]);
    }
    const Tensor batch = stack(clean);
    const auto masks = mask_fn(batch, ys);
    std::vector<Tensor> coarse;
    coarse.reserve(bsz);
    for (std::size_t k = 0; k < bsz; ++k) coarse.push_back(coarse_fill(clean[k], masks[k], cfg));
    trace.push_back(ae.train_step(stack(coarse), batch, cfg.ae_step));
  }
  return trace;
}

}  // namespace samc
