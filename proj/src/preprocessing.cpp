#include "mantis/preprocessing.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace mantis {

std::vector<float> resize_linear_channel(const float* values, int length,
                                         int target_length) {
  if (length < 2)
    throw std::invalid_argument("resize_linear: series length " +
                                std::to_string(length) + " < 2");
  if (target_length < 2)
    throw std::invalid_argument("resize_linear: target length " +
                                std::to_string(target_length) + " < 2");
  std::vector<float> out(static_cast<std::size_t>(target_length));
  const double scale = double(length - 1) / double(target_length - 1);
  for (int i = 0; i < target_length; ++i) {
    const double pos = i * scale;
    int lo = static_cast<int>(pos);
    if (lo >= length - 1) lo = length - 2;
    const double frac = pos - lo;
    out[static_cast<std::size_t>(i)] = static_cast<float>(
        double(values[lo]) * (1.0 - frac) + double(values[lo + 1]) * frac);
  }
  // guard endpoint rounding
  out.front() = values[0];
  out.back() = values[length - 1];
  return out;
}

RawSeries resize_linear(const RawSeries& series, int target_length) {
  RawSeries out;
  out.channels = series.channels;
  out.length = target_length;
  out.label = series.label;
  out.values.reserve(static_cast<std::size_t>(series.channels) * target_length);
  for (int c = 0; c < series.channels; ++c) {
    auto ch = resize_linear_channel(series.channel(c), series.length, target_length);
    out.values.insert(out.values.end(), ch.begin(), ch.end());
  }
  return out;
}

RawSeries instance_norm(const RawSeries& series, float eps) {
  RawSeries out = series;
  const int t = series.length;
  for (int c = 0; c < series.channels; ++c) {
    const float* src = series.channel(c);
    float* dst = out.channel(c);
    double mean = 0;
    for (int i = 0; i < t; ++i) mean += src[i];
    mean /= t;
    double var = 0;
    for (int i = 0; i < t; ++i) {
      const double d = src[i] - mean;
      var += d * d;
    }
    var /= t;
    const double denom = std::sqrt(var) + double(eps);
    for (int i = 0; i < t; ++i)
      dst[i] = static_cast<float>((src[i] - mean) / denom);
  }
  return out;
}

RawSeries differential(const RawSeries& series) {
  if (series.length < 2)
    throw std::invalid_argument("differential: series length " +
                                std::to_string(series.length) + " < 2");
  RawSeries out = series;
  const int t = series.length;
  for (int c = 0; c < series.channels; ++c) {
    const float* src = series.channel(c);
    float* dst = out.channel(c);
    dst[0] = 0.0f;
    for (int i = 1; i < t; ++i) dst[i] = src[i] - src[i - 1];
  }
  return out;
}

}  // namespace mantis
