#pragma once

#include <vector>

namespace mantis {

// Multinomial logistic classifier over frozen embeddings.
struct LinearProbe {
  int input_dim = 0;
  int num_classes = 0;
  std::vector<float> w;  // (num_classes, input_dim)
  std::vector<float> b;  // (num_classes)
};

}  // namespace mantis
