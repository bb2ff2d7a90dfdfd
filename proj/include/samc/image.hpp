#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "samc/tensor.hpp"

namespace samc {

/// Boolean H x W field; true marks a kept (known) pixel.
class PixelMask {
 public:
  PixelMask() = default;
  PixelMask(std::size_t rows, std::size_t cols, bool value = false)
      : rows_(rows), cols_(cols), bits_(rows * cols, value ? 1 : 0) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return bits_.size(); }

  bool operator()(std::size_t r, std::size_t c) const { return bits_[r * cols_ + c] != 0; }
  bool get(std::size_t i) const { return bits_[i] != 0; }
  void set(std::size_t r, std::size_t c, bool v) { bits_[r * cols_ + c] = v ? 1 : 0; }
  void set(std::size_t i, bool v) { bits_[i] = v ? 1 : 0; }

  std::size_t count() const;
  bool none() const { return count() == 0; }
  bool all() const { return count() == size(); }
  /// True if every kept pixel of this mask is also kept in `other`.
  bool subset_of(const PixelMask& other) const;

  friend bool operator==(const PixelMask&, const PixelMask&) = default;

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// Writes an [H, W] (or [1, H, W]) tensor in [0, 1] as binary 8-bit PGM.
void write_pgm(const std::string& path, const Tensor& gray);
/// Writes a [C, H, W] tensor in [0, 1] as binary PPM; C = 1 is replicated.
void write_ppm(const std::string& path, const Tensor& image);

}  // namespace samc
