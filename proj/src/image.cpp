#include "samc/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace samc {

std::size_t PixelMask::count() const {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

bool PixelMask::subset_of(const PixelMask& other) const {
  if (rows_ != other.rows_ || cols_ != other.cols_) return false;
  for (std::size_t i = 0; i < bits_.size(); ++i)
    if (bits_[i] && !other.bits_[i]) return false;
  return true;
}

namespace {

unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

void write_pgm(const std::string& path, const Tensor& gray) {
  if (gray.rank() < 2 || (gray.rank() == 3 && gray.dim(0) != 1) || gray.rank() > 3)
    throw ShapeError("write_pgm expects [H,W] or [1,H,W], got " + shape_str(gray.shape()));
  const std::size_t h = gray.dim(gray.rank() - 2), w = gray.dim(gray.rank() - 1);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << "P5\n" << w << ' ' << h << "\n255\n";
  for (double v : gray.data()) out.put(static_cast<char>(to_byte(v)));
}

void write_ppm(const std::string& path, const Tensor& image) {
  if (image.rank() != 3) throw ShapeError("write_ppm expects [C,H,W], got " + shape_str(image.shape()));
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << "P6\n" << w << ' ' << h << "\n255\n";
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t ch = 0; ch < 3; ++ch)
      out.put(static_cast<char>(to_byte(image[(c == 1 ? 0 : std::min(ch, c - 1)) * h * w + i])));
}

}  // namespace samc
