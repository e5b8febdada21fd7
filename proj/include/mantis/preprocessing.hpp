#pragma once

#include <optional>
#include <vector>

namespace mantis {

// One multichannel series with raw-scale values, row-major (channel, time).
struct RawSeries {
  int channels = 0;
  int length = 0;
  std::vector<float> values;
  std::optional<int> label;

  float* channel(int c) { return values.data() + static_cast<std::size_t>(c) * length; }
  const float* channel(int c) const {
    return values.data() + static_cast<std::size_t>(c) * length;
  }
};

struct PreprocConfig {
  int target_length = 512;
  float eps = 1e-5f;
};

// Per-channel 1-D linear interpolation onto a uniform grid mapping
// [0, t-1] -> [0, target_length-1]; endpoints are preserved exactly.
RawSeries resize_linear(const RawSeries& series, int target_length);
std::vector<float> resize_linear_channel(const float* values, int length,
                                         int target_length);

// Per-channel z-scoring with population std: (x - mean) / (std + eps).
RawSeries instance_norm(const RawSeries& series, float eps = 1e-5f);

// Adjacent differences, left-padded with a single 0 to preserve the length.
RawSeries differential(const RawSeries& series);

}  // namespace mantis
