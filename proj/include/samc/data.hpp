#pragma once

#include <cstdint>
#include <filesystem>

#include "samc/bytes.hpp"
#include "samc/dataset.hpp"

namespace samc {

/// Reads the CIFAR binary layout: per record one label byte, then 1024 red,
/// 1024 green and 1024 blue bytes. Images come back as [3, 32, 32] in [0, 1].
/// Throws FormatError on a truncated file or a label >= num_classes.
LabeledSet load_cifar_binary(const std::filesystem::path& path, int num_classes = 10);
LabeledSet parse_cifar_binary(std::span<const std::uint8_t> bytes, int num_classes = 10);

/// Groups global labels into tasks of `classes_per_task` consecutive classes
/// (after a seeded class permutation); labels become task-local.
TaskStream split_into_tasks(const LabeledSet& train, const LabeledSet& test, std::size_t tasks,
                            std::size_t classes_per_task, std::uint64_t seed, ImageShape shape);

struct SyntheticConfig {
  std::size_t tasks = 5;
  std::size_t classes_per_task = 2;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 100;
  ImageShape shape{1, 32, 32};
  double noise = 0.1;
  std::uint64_t seed = 1;
};

/// Every class is a textured blob (position, radius, grating orientation and
/// frequency, polarity drawn per class) on a mid-gray background; samples add
/// position jitter, a random grating phase and Gaussian pixel noise.
TaskStream make_synthetic_stream(const SyntheticConfig& cfg);

}  // namespace samc
