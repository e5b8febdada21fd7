#pragma once

#include <string>
#include <vector>

#include "mantis/preprocessing.hpp"

namespace mantis {

// Labeled collection of equal-shape (d x t) series. Labels are remapped to a
// contiguous 0-based range; label_values keeps the original values by class.
struct Dataset {
  std::string name;
  int num_classes = 0;
  int channels = 1;
  int length = 0;
  std::vector<RawSeries> samples;
  std::vector<double> label_values;

  std::size_t size() const { return samples.size(); }
};

// Resizes every sample to target_length (values stay raw-scale).
Dataset resize_dataset(const Dataset& ds, int target_length);

}  // namespace mantis
