#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "samc/memory.hpp"
#include "samc/models.hpp"

namespace samc {

enum class CompletionMode { ZeroPadding, RuleOnly, AeOnly, RulePlusAe };

const char* completion_mode_name(CompletionMode mode);
std::optional<CompletionMode> parse_completion_mode(const std::string& name);
bool uses_autoencoder(CompletionMode mode);

struct CompletionConfig {
  CompletionMode mode = CompletionMode::RulePlusAe;
  double diffusion_tol = 1e-4;
  std::size_t diffusion_max_iters = 500;
  double ae_step = 0.5;        // beta, on the per-pixel mean squared error
  std::size_t ae_steps = 50;   // early-stopping budget per task
  std::size_t ae_batch = 10;
};

/// Harmonic fill: unknown pixels start at the per-channel mean of the known
/// ones, then Gauss-Seidel sweeps replace each unknown by the mean of its
/// in-bounds 4-neighbours until the largest change is below `tol`. Channels
/// are filled independently; known pixels are never modified.
Tensor rule_fill(const Tensor& sparse, const PixelMask& mask, double tol = 1e-4,
                 std::size_t max_iters = 500);

/// Unknown pixels set to zero.
Tensor zero_fill(const Tensor& sparse, const PixelMask& mask);

/// The coarse stage for `cfg.mode`: rule fill for rule_only / rule_plus_ae,
/// zero fill otherwise.
Tensor coarse_fill(const Tensor& sparse, const PixelMask& mask, const CompletionConfig& cfg);

struct CompletedSample {
  Tensor image;  // [C, H, W]
  int label = 0;
};

/// Decodes, coarse-fills and (if the mode includes it) refines every stored
/// sample of `task`, in FIFO order.
std::vector<CompletedSample> complete(const EpisodicMemory& mem, const InpaintAutoencoder& ae,
                                      const CompletionConfig& cfg, int task);

/// Masks the current task's images by saliency.
using MaskFn = std::function<std::vector<PixelMask>(const Tensor& batch, std::span<const int> labels)>;

/// cfg.ae_steps SGD steps of the autoencoder on random mini-batches of the
/// current task: input coarse_fill(x masked by mask_fn), target x. Returns
/// the per-step loss trace. A no-op for modes without an autoencoder.
std::vector<double> finetune_ae(InpaintAutoencoder& ae, std::span<const Tensor> images,
                                std::span<const int> labels, const MaskFn& mask_fn,
                                const CompletionConfig& cfg, std::uint64_t seed);

}  // namespace samc
