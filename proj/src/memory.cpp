#include "samc/memory.hpp"

#include <cmath>
#include <string>
#include <tuple>

namespace samc {

std::size_t dense_sample_bytes(const ImageShape& shape) {
  return kSampleHeaderBytes + kEntryBytes * shape.numel();
}

MaskedSample coo_encode(const Tensor& x, const PixelMask& mask, int label, int task) {
  if (x.rank() != 3 || mask.rows() != x.dim(1) || mask.cols() != x.dim(2))
    throw ShapeError("coo_encode: image " + shape_str(x.shape()) + " vs mask " +
                     std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()));
  if (x.dim(0) > 255 || x.dim(1) > 65535 || x.dim(2) > 65535)
    throw ShapeError("coo_encode: image too large for u16/u8 coordinates");
  if (mask.none()) throw std::invalid_argument("coo_encode: empty mask");
  if (label < 0 || task < 0 || task > 65535)
    throw std::invalid_argument("coo_encode: label/task out of range");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  MaskedSample s;
  s.label = label;
  s.task = task;
  s.shape = {c, h, w};
  s.entries.reserve(mask.count() * c);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t col = 0; col < w; ++col) {
      if (!mask(r, col)) continue;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v = x[(ch * h + r) * w + col];
        if (!(v >= 0.0 && v <= 1.0))
          throw std::invalid_argument("coo_encode: pixel value outside [0,1]");
        s.entries.push_back({static_cast<std::uint16_t>(r), static_cast<std::uint16_t>(col),
                             static_cast<std::uint8_t>(ch), static_cast<float>(v)});
      }
    }
  return s;
}

void validate(const MaskedSample& s) {
  if (s.entries.empty()) throw CorruptSampleError("sample has no entries");
  const auto key = [](const CooEntry& e) { return std::tuple(e.row, e.col, e.channel); };
  for (std::size_t i = 0; i < s.entries.size(); ++i) {
    const auto& e = s.entries[i];
    if (e.row >= s.shape.height || e.col >= s.shape.width || e.channel >= s.shape.channels)
      throw CorruptSampleError("entry " + std::to_string(i) + " at (" + std::to_string(e.row) +
                               "," + std::to_string(e.col) + "," + std::to_string(e.channel) +
                               ") outside " + shape_str(s.shape.chw()));
    if (!(e.value >= 0.0F && e.value <= 1.0F))
      throw CorruptSampleError("entry " + std::to_string(i) + " value outside [0,1]");
    if (i > 0 && !(key(s.entries[i - 1]) < key(e)))
      throw CorruptSampleError("entries not strictly sorted at " + std::to_string(i));
  }
}

DecodedSample coo_decode(const MaskedSample& s) {
  validate(s);
  const std::size_t h = s.shape.height, w = s.shape.width;
  DecodedSample d{Tensor(s.shape.chw(), 0.0), PixelMask(h, w)};
  for (const auto& e : s.entries) {
    d.image[(e.channel * h + e.row) * w + e.col] = static_cast<double>(e.value);
    d.mask.set(e.row, e.col, true);
  }
  return d;
}

EpisodicMemory::EpisodicMemory(std::size_t budget_bytes, std::size_t max_samples)
    : budget_(budget_bytes), max_samples_(max_samples) {
  if (max_samples_ == 0) throw std::invalid_argument("memory sample cap must be positive");
}

std::size_t EpisodicMemory::push(MaskedSample s) {
  const std::size_t size = s.bytes();
  if (size > budget_)
    throw std::invalid_argument("sample of " + std::to_string(size) +
                                " bytes exceeds the per-task budget of " +
                                std::to_string(budget_));
  const int task = s.task;
  auto& q = queues_[task];
  auto& used = used_[task];
  q.push_back(std::move(s));
  used += size;
  std::size_t evicted = 0;
  while (used > budget_ || q.size() > max_samples_) {
    used -= q.front().bytes();
    q.pop_front();
    ++evicted;
  }
  return evicted;
}

const std::deque<MaskedSample>& EpisodicMemory::samples(int task) const {
  auto it = queues_.find(task);
  if (it == queues_.end()) throw UnknownTaskError(task);
  return it->second;
}

std::size_t EpisodicMemory::task_bytes(int task) const {
  auto it = used_.find(task);
  return it == used_.end() ? 0 : it->second;
}

std::vector<int> EpisodicMemory::tasks() const {
  std::vector<int> out;
  for (const auto& [t, _] : queues_) out.push_back(t);
  return out;
}

std::size_t capacity_model(std::size_t budget_bytes, double mean_kept_fraction,
                           const ImageShape& shape) {
  if (!(mean_kept_fraction > 0.0 && mean_kept_fraction <= 1.0))
    throw std::invalid_argument("kept fraction must lie in (0,1]");
  const double per = static_cast<double>(kSampleHeaderBytes) +
                     static_cast<double>(kEntryBytes) * mean_kept_fraction *
                         static_cast<double>(shape.numel());
  return static_cast<std::size_t>(std::floor(static_cast<double>(budget_bytes) / per));
}

namespace {

void write_sample(ByteWriter& w, const MaskedSample& s) {
  w.u16(static_cast<std::uint16_t>(s.shape.height));
  w.u16(static_cast<std::uint16_t>(s.shape.width));
  w.u8(static_cast<std::uint8_t>(s.shape.channels));
  w.u8(0);
  w.u32(static_cast<std::uint32_t>(s.label));
  w.u16(static_cast<std::uint16_t>(s.task));
  w.u32(static_cast<std::uint32_t>(s.entries.size()));
  for (const auto& e : s.entries) {
    w.u16(e.row);
    w.u16(e.col);
    w.u8(e.channel);
    w.f32(e.value);
  }
}

MaskedSample read_sample(ByteReader& r) {
  MaskedSample s;
  s.shape.height = r.u16();
  s.shape.width = r.u16();
  s.shape.channels = r.u8();
  if (r.u8() != 0) throw FormatError("memory file: unknown sample flags");
  s.label = static_cast<int>(r.u32());
  s.task = r.u16();
  const std::uint32_t n = r.u32();
  if (static_cast<std::size_t>(n) * kEntryBytes > r.remaining())
    throw FormatError("memory file: entry count exceeds file size");
  s.entries.resize(n);
  for (auto& e : s.entries) {
    e.row = r.u16();
    e.col = r.u16();
    e.channel = r.u8();
    e.value = r.f32();
  }
  try {
    validate(s);
  } catch (const CorruptSampleError& err) {
    throw FormatError(std::string("memory file: ") + err.what());
  }
  return s;
}

}  // namespace

std::vector<std::uint8_t> encode_memory(const EpisodicMemory& mem) {
  ByteWriter w;
  w.raw("SAMM");
  w.u32(kMemoryFileVersion);
  const auto tasks = mem.tasks();
  w.u32(static_cast<std::uint32_t>(tasks.size()));
  w.u64(mem.budget_bytes());
  w.u64(mem.max_samples());
  for (int t : tasks) {
    const auto& q = mem.samples(t);
    w.u32(static_cast<std::uint32_t>(t));
    w.u32(static_cast<std::uint32_t>(q.size()));
    for (const auto& s : q) write_sample(w, s);
  }
  return std::move(w.bytes());
}

EpisodicMemory decode_memory(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.raw(4) != "SAMM") throw FormatError("memory file: bad magic");
  const auto version = r.u32();
  if (version != kMemoryFileVersion)
    throw FormatError("memory file: unsupported version " + std::to_string(version));
  const auto ntasks = r.u32();
  const auto budget = r.u64();
  const auto cap = r.u64();
  if (cap == 0) throw FormatError("memory file: zero sample cap");
  EpisodicMemory mem(budget, cap);
  for (std::uint32_t i = 0; i < ntasks; ++i) {
    const int task = static_cast<int>(r.u32());
    const auto count = r.u32();
    for (std::uint32_t k = 0; k < count; ++k) {
      MaskedSample s = read_sample(r);
      if (s.task != task) throw FormatError("memory file: sample task does not match its block");
      if (mem.push(std::move(s)) != 0) throw FormatError("memory file: contents exceed budget");
    }
  }
  if (!r.done()) throw FormatError("memory file: trailing bytes");
  return mem;
}

}  // namespace samc
