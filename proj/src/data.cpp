#include "samc/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

namespace samc {

namespace {

constexpr std::size_t kCifarRecord = 1 + 3 * 32 * 32;

}  // namespace

LabeledSet parse_cifar_binary(std::span<const std::uint8_t> bytes, int num_classes) {
  if (bytes.size() % kCifarRecord != 0)
    throw FormatError("CIFAR file truncated: " + std::to_string(bytes.size()) +
                      " bytes is not a multiple of " + std::to_string(kCifarRecord));
  LabeledSet out;
  const std::size_t n = bytes.size() / kCifarRecord;
  out.images.reserve(n);
  out.labels.reserve(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecord;
    if (rec[0] >= num_classes)
      throw FormatError("CIFAR record " + std::to_string(r) + ": label " + std::to_string(rec[0]) +
                        " out of range for " + std::to_string(num_classes) + " classes");
    Tensor img({3, 32, 32});
    for (std::size_t i = 0; i < 3 * 32 * 32; ++i) img[i] = rec[1 + i] / 255.0;
    out.images.push_back(std::move(img));
    out.labels.push_back(rec[0]);
  }
  return out;
}

LabeledSet load_cifar_binary(const std::filesystem::path& path, int num_classes) {
  return parse_cifar_binary(read_file(path.string()), num_classes);
}

TaskStream split_into_tasks(const LabeledSet& train, const LabeledSet& test, std::size_t tasks,
                            std::size_t classes_per_task, std::uint64_t seed, ImageShape shape) {
  const std::size_t total = tasks * classes_per_task;
  std::vector<int> perm(total);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);

  TaskStream s;
  s.shape = shape;
  s.classes_per_task = classes_per_task;
  s.tasks.resize(tasks);
  std::vector<int> task_of(total, -1), local_of(total, -1);
  for (std::size_t t = 0; t < tasks; ++t) {
    s.tasks[t].id = static_cast<int>(t);
    for (std::size_t k = 0; k < classes_per_task; ++k) {
      const int c = perm[t * classes_per_task + k];
      s.tasks[t].classes.push_back(c);
      task_of[static_cast<std::size_t>(c)] = static_cast<int>(t);
      local_of[static_cast<std::size_t>(c)] = static_cast<int>(k);
    }
  }
  auto route = [&](const LabeledSet& src, bool is_train) {
    for (std::size_t i = 0; i < src.size(); ++i) {
      const int y = src.labels[i];
      if (y < 0 || static_cast<std::size_t>(y) >= total) continue;  // class not in the stream
      auto& task = s.tasks[static_cast<std::size_t>(task_of[static_cast<std::size_t>(y)])];
      auto& dst = is_train ? task.train : task.test;
      dst.images.push_back(src.images[i]);
      dst.labels.push_back(local_of[static_cast<std::size_t>(y)]);
    }
  };
  route(train, true);
  route(test, false);
  return s;
}

namespace {

struct ClassPattern {
  double cy, cx, radius, theta, freq, polarity;
};

ClassPattern draw_pattern(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> pos(0.3, 0.7), rad(0.15, 0.25), ang(0.0, std::numbers::pi),
      freq(2.0, 4.0);
  std::bernoulli_distribution pol(0.5);
  return {pos(rng), pos(rng), rad(rng), ang(rng), freq(rng), pol(rng) ? 1.0 : -1.0};
}

bool distinct(const ClassPattern& p, const std::vector<ClassPattern>& others) {
  for (const auto& o : others) {
    const double dist = std::hypot(p.cy - o.cy, p.cx - o.cx);
    double dtheta = std::abs(p.theta - o.theta);
    dtheta = std::min(dtheta, std::numbers::pi - dtheta);
    if (dist < 0.2 && dtheta < std::numbers::pi / 4 && p.polarity == o.polarity) return false;
  }
  return true;
}

Tensor render(const ClassPattern& p, const ImageShape& shape, double noise, std::mt19937_64& rng) {
  const double h = static_cast<double>(shape.height), w = static_cast<double>(shape.width);
  std::uniform_real_distribution<double> jitter(-0.06, 0.06), phase(0.0, 2 * std::numbers::pi);
  std::normal_distribution<double> gauss(0.0, noise);
  const double cy = (p.cy + jitter(rng)) * h, cx = (p.cx + jitter(rng)) * w, ph = phase(rng);
  const double r = p.radius * std::min(h, w);
  const double ct = std::cos(p.theta), st = std::sin(p.theta);
  Tensor img(shape.chw());
  for (std::size_t c = 0; c < shape.channels; ++c)
    for (std::size_t y = 0; y < shape.height; ++y)
      for (std::size_t x = 0; x < shape.width; ++x) {
        const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
        const double blob = std::exp(-(dy * dy + dx * dx) / (2 * r * r));
        const double u = (static_cast<double>(x) * ct + static_cast<double>(y) * st) / w;
        const double grating = 0.5 + 0.5 * std::sin(2 * std::numbers::pi * p.freq * u + ph);
        const double v = 0.5 + p.polarity * 0.4 * blob * grating + gauss(rng);
        img[(c * shape.height + y) * shape.width + x] = std::clamp(v, 0.0, 1.0);
      }
  return img;
}

}  // namespace

TaskStream make_synthetic_stream(const SyntheticConfig& cfg) {
  if (cfg.tasks == 0 || cfg.classes_per_task < 2 || cfg.train_per_class == 0 || cfg.test_per_class == 0)
    throw std::invalid_argument("synthetic stream needs tasks >= 1, >= 2 classes per task and samples");
  TaskStream s;
  s.shape = cfg.shape;
  s.classes_per_task = cfg.classes_per_task;
  std::mt19937_64 rng(cfg.seed);
  for (std::size_t t = 0; t < cfg.tasks; ++t) {
    TaskData task;
    task.id = static_cast<int>(t);
    std::vector<ClassPattern> patterns;
    for (std::size_t k = 0; k < cfg.classes_per_task; ++k) {
      task.classes.push_back(static_cast<int>(t * cfg.classes_per_task + k));
      // redraw until the pattern is clearly apart from the task's others
      ClassPattern p = draw_pattern(rng);
      for (int tries = 0; tries < 100 && !distinct(p, patterns); ++tries) p = draw_pattern(rng);
      patterns.push_back(p);
    }
    for (auto* set : {&task.train, &task.test}) {
      const std::size_t per = set == &task.train ? cfg.train_per_class : cfg.test_per_class;
      for (std::size_t i = 0; i < per; ++i)
        for (std::size_t k = 0; k < cfg.classes_per_task; ++k) {
          set->images.push_back(render(patterns[k], cfg.shape, cfg.noise, rng));
          set->labels.push_back(static_cast<int>(k));
        }
      // interleaved by construction; shuffle so batches are not class-periodic
      std::vector<std::size_t> idx(set->size());
      std::iota(idx.begin(), idx.end(), 0);
      std::shuffle(idx.begin(), idx.end(), rng);
      LabeledSet shuffled;
      for (auto i : idx) {
        shuffled.images.push_back(std::move(set->images[i]));
        shuffled.labels.push_back(set->labels[i]);
      }
      *set = std::move(shuffled);
    }
    s.tasks.push_back(std::move(task));
  }
  return s;
}

}  // namespace samc
