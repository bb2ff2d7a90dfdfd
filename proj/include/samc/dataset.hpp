#pragma once

#include <vector>

#include "samc/models.hpp"

namespace samc {

struct LabeledSet {
  std::vector<Tensor> images;  // each [C, H, W] in [0, 1]
  std::vector<int> labels;     // task-local class index

  std::size_t size() const { return images.size(); }
};

struct TaskData {
  int id = 0;
  std::vector<int> classes;  // global class ids; labels index into this
  LabeledSet train;
  LabeledSet test;
};

struct TaskStream {
  ImageShape shape;
  std::size_t classes_per_task = 2;
  std::vector<TaskData> tasks;
};

}  // namespace samc
