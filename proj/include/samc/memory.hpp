#pragma once

// Sparse episodic storage.
//
// A MaskedSample is the COO form of a saliency-masked image. Its storage cost
// is a 16-byte header plus 9 bytes per entry:
//
//   header: H u16 | W u16 | C u8 | flags u8 | label u32 | task u16 | count u32
//   entry:  row u16 | col u16 | channel u8 | value f32
//
// Memory dump file (all little-endian):
//   "SAMM" | version u32 | task count u32 | budget bytes u64 | slot cap u64
//   then per task: task id u32 | sample count u32 | samples (header + entries)

#include <cstdint>
#include <deque>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "samc/bytes.hpp"
#include "samc/image.hpp"
#include "samc/models.hpp"

namespace samc {

inline constexpr std::size_t kSampleHeaderBytes = 16;
inline constexpr std::size_t kEntryBytes = 9;
inline constexpr std::uint32_t kMemoryFileVersion = 1;

struct CooEntry {
  std::uint16_t row = 0;
  std::uint16_t col = 0;
  std::uint8_t channel = 0;
  float value = 0.0F;
  friend bool operator==(const CooEntry&, const CooEntry&) = default;
};

struct MaskedSample {
  std::vector<CooEntry> entries;  // sorted by (row, col, channel)
  int label = 0;
  int task = 0;
  ImageShape shape;

  std::size_t bytes() const { return kSampleHeaderBytes + kEntryBytes * entries.size(); }
  friend bool operator==(const MaskedSample&, const MaskedSample&) = default;
};

class CorruptSampleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Storage cost of one sample holding every pixel of `shape`.
std::size_t dense_sample_bytes(const ImageShape& shape);

/// COO-encodes the masked pixels of x ([C, H, W], values in [0, 1]).
MaskedSample coo_encode(const Tensor& x, const PixelMask& mask, int label, int task);

struct DecodedSample {
  Tensor image;  // zeros at missing positions
  PixelMask mask;
};

DecodedSample coo_decode(const MaskedSample& s);

/// Throws CorruptSampleError unless every MaskedSample invariant holds.
void validate(const MaskedSample& s);

/// Per-task FIFO queues under a per-task byte budget and an optional per-task
/// sample cap.
class EpisodicMemory {
 public:
  explicit EpisodicMemory(std::size_t budget_bytes,
                          std::size_t max_samples = std::numeric_limits<std::size_t>::max());

  /// Appends s to its task queue and evicts that task's oldest samples until
  /// the budget holds. Returns the number evicted.
  std::size_t push(MaskedSample s);

  bool contains(int task) const { return queues_.count(task) != 0; }
  const std::deque<MaskedSample>& samples(int task) const;
  std::size_t task_bytes(int task) const;
  std::vector<int> tasks() const;
  std::size_t budget_bytes() const { return budget_; }
  std::size_t max_samples() const { return max_samples_; }

  friend bool operator==(const EpisodicMemory&, const EpisodicMemory&) = default;

 private:
  std::size_t budget_;
  std::size_t max_samples_;
  std::map<int, std::deque<MaskedSample>> queues_;
  std::map<int, std::size_t> used_;
};

/// floor(budget / (header + 9 * kept_fraction * H * W * C)).
std::size_t capacity_model(std::size_t budget_bytes, double mean_kept_fraction,
                           const ImageShape& shape);

std::vector<std::uint8_t> encode_memory(const EpisodicMemory& mem);
EpisodicMemory decode_memory(std::span<const std::uint8_t> bytes);

}  // namespace samc
