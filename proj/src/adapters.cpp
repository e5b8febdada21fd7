#include "mantis/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "mantis/rng.hpp"

namespace mantis {

const char* adapter_kind_name(AdapterKind k) {
  switch (k) {
    case AdapterKind::pca: return "pca";
    case AdapterKind::svd: return "svd";
    case AdapterKind::rand_proj: return "randproj";
    case AdapterKind::var_selector: return "varsel";
    case AdapterKind::lcomb: return "lcomb";
  }
  return "?";
}

AdapterKind adapter_kind_from_name(const std::string& name) {
  if (name == "pca") return AdapterKind::pca;
  if (name == "svd") return AdapterKind::svd;
  if (name == "randproj" || name == "rand_proj") return AdapterKind::rand_proj;
  if (name == "varsel" || name == "var_selector") return AdapterKind::var_selector;
  if (name == "lcomb") return AdapterKind::lcomb;
  throw std::invalid_argument("unknown adapter kind: " + name);
}

int default_d_new(int d, AdapterKind kind) {
  if (kind == AdapterKind::lcomb) return 10;
  return std::min(d, 10);
}

ReshapedDesign reshape_for_fit(const Dataset& ds) {
  if (ds.samples.empty())
    throw std::invalid_argument("reshape_for_fit: empty dataset");
  const int d = ds.channels, t = ds.length;
  for (const auto& s : ds.samples)
    if (s.channels != d || s.length != t)
      throw std::invalid_argument(
          "reshape_for_fit: ragged dataset (resize first)");
  ReshapedDesign r;
  r.rows = static_cast<int>(ds.samples.size()) * t;
  r.cols = d;
  r.m.resize(std::size_t(r.rows) * d);
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    for (int s = 0; s < t; ++s)
      for (int c = 0; c < d; ++c)
        r.m[(i * t + s) * d + c] = double(ds.samples[i].values[std::size_t(c) * t + s]);
  return r;
}

void eigen_symmetric(const std::vector<double>& a, int d,
                     std::vector<double>& eigvals,
                     std::vector<double>& eigvecs) {
  std::vector<double> m = a;  // working copy, becomes diagonal
  std::vector<double> v(std::size_t(d) * d, 0.0);
  for (int i = 0; i < d; ++i) v[std::size_t(i) * d + i] = 1.0;

  auto off_norm = [&]() {
    double s = 0;
    for (int i = 0; i < d; ++i)
      for (int j = i + 1; j < d; ++j) s += m[std::size_t(i) * d + j] * m[std::size_t(i) * d + j];
    return std::sqrt(2.0 * s);
  };
  double fro = 0;
  for (double x : m) fro += x * x;
  fro = std::sqrt(fro);
  const double tol = 1e-14 * std::max(fro, 1.0);

  for (int sweep = 0; sweep < 100 && off_norm() > tol; ++sweep) {
    for (int p = 0; p < d - 1; ++p)
      for (int q = p + 1; q < d; ++q) {
        const double apq = m[std::size_t(p) * d + q];
        if (std::abs(apq) < 1e-300) continue;
        const double app = m[std::size_t(p) * d + p];
        const double aqq = m[std::size_t(q) * d + q];
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < d; ++k) {
          const double mkp = m[std::size_t(k) * d + p];
          const double mkq = m[std::size_t(k) * d + q];
          m[std::size_t(k) * d + p] = c * mkp - s * mkq;
          m[std::size_t(k) * d + q] = s * mkp + c * mkq;
        }
        for (int k = 0; k < d; ++k) {
          const double mpk = m[std::size_t(p) * d + k];
          const double mqk = m[std::size_t(q) * d + k];
          m[std::size_t(p) * d + k] = c * mpk - s * mqk;
          m[std::size_t(q) * d + k] = s * mpk + c * mqk;
        }
        for (int k = 0; k < d; ++k) {
          const double vkp = v[std::size_t(k) * d + p];
          const double vkq = v[std::size_t(k) * d + q];
          v[std::size_t(k) * d + p] = c * vkp - s * vkq;
          v[std::size_t(k) * d + q] = s * vkp + c * vkq;
        }
      }
  }

  std::vector<int> order(static_cast<std::size_t>(d));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int i, int j) {
    return m[std::size_t(i) * d + i] > m[std::size_t(j) * d + j];
  });
  eigvals.resize(static_cast<std::size_t>(d));
  eigvecs.assign(std::size_t(d) * d, 0.0);
  for (int k = 0; k < d; ++k) {
    eigvals[k] = m[std::size_t(order[k]) * d + order[k]];
    for (int i = 0; i < d; ++i)
      eigvecs[std::size_t(k) * d + i] = v[std::size_t(i) * d + order[k]];
  }
}

namespace {

// Gram-matrix route: right singular vectors of X are the eigenvectors of
// X^T X, which is d x d and independent of n*t after one accumulation pass.
Adapter fit_projection(const ReshapedDesign& design, int d_new, bool center) {
  const int d = design.cols;
  if (d_new < 1 || d_new > d)
    throw std::invalid_argument("fit: d_new " + std::to_string(d_new) +
                                " outside [1, " + std::to_string(d) + "]");
  if (design.rows < 2)
    throw std::invalid_argument("fit: need at least 2 rows");

  std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
  if (center) {
    for (int r = 0; r < design.rows; ++r)
      for (int c = 0; c < d; ++c) mean[c] += design.at(r, c);
    for (int c = 0; c < d; ++c) mean[c] /= design.rows;
  }

  std::vector<double> gram(std::size_t(d) * d, 0.0);
  for (int r = 0; r < design.rows; ++r)
    for (int i = 0; i < d; ++i) {
      const double xi = design.at(r, i) - mean[i];
      for (int j = i; j < d; ++j)
        gram[std::size_t(i) * d + j] += xi * (design.at(r, j) - mean[j]);
    }
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < i; ++j)
      gram[std::size_t(i) * d + j] = gram[std::size_t(j) * d + i];

  std::vector<double> eigvals, eigvecs;
  eigen_symmetric(gram, d, eigvals, eigvecs);

  Adapter a;
  a.kind = center ? AdapterKind::pca : AdapterKind::svd;
  a.d = d;
  a.d_new = d_new;
  a.w.resize(std::size_t(d_new) * d);
  for (int k = 0; k < d_new; ++k) {
    // sign convention: the entry of largest magnitude is positive
    int arg = 0;
    double best = 0;
    for (int i = 0; i < d; ++i) {
      const double mag = std::abs(eigvecs[std::size_t(k) * d + i]);
      if (mag > best) {
        best = mag;
        arg = i;
      }
    }
    const double sign = eigvecs[std::size_t(k) * d + arg] < 0 ? -1.0 : 1.0;
    for (int i = 0; i < d; ++i)
      a.w[std::size_t(k) * d + i] =
          static_cast<float>(sign * eigvecs[std::size_t(k) * d + i]);
  }
  if (center) {
    a.mean.resize(static_cast<std::size_t>(d));
    for (int c = 0; c < d; ++c) a.mean[c] = static_cast<float>(mean[c]);
  }
  return a;
}

}  // namespace

Adapter fit_pca(const ReshapedDesign& design, int d_new) {
  return fit_projection(design, d_new, /*center=*/true);
}

Adapter fit_svd(const ReshapedDesign& design, int d_new) {
  return fit_projection(design, d_new, /*center=*/false);
}

Adapter fit_rand_proj(int d, int d_new, std::uint64_t seed) {
  if (d_new < 1 || d_new > d)
    throw std::invalid_argument("fit_rand_proj: d_new " + std::to_string(d_new) +
                                " outside [1, " + std::to_string(d) + "]");
  Adapter a;
  a.kind = AdapterKind::rand_proj;
  a.d = d;
  a.d_new = d_new;
  a.w.resize(std::size_t(d_new) * d);
  auto rng = make_rng(derive_seed(seed, 0x72616e64));
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(double(d_new)));
  for (auto& x : a.w) x = static_cast<float>(dist(rng));
  return a;
}

Adapter fit_var_selector(const ReshapedDesign& design, int d_new) {
  const int d = design.cols;
  if (d_new < 1 || d_new > d)
    throw std::invalid_argument("fit_var_selector: d_new " +
                                std::to_string(d_new) + " outside [1, " +
                                std::to_string(d) + "]");
  std::vector<double> var(static_cast<std::size_t>(d), 0.0);
  std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
  for (int r = 0; r < design.rows; ++r)
    for (int c = 0; c < d; ++c) mean[c] += design.at(r, c);
  for (int c = 0; c < d; ++c) mean[c] /= design.rows;
  for (int r = 0; r < design.rows; ++r)
    for (int c = 0; c < d; ++c) {
      const double x = design.at(r, c) - mean[c];
      var[c] += x * x;
    }
  for (int c = 0; c < d; ++c) var[c] /= design.rows;

  std::vector<int> order(static_cast<std::size_t>(d));
  std::iota(order.begin(), order.end(), 0);
  // ties -> lower index first (stable sort on descending variance)
  std::stable_sort(order.begin(), order.end(),
                   [&](int i, int j) { return var[i] > var[j]; });

  Adapter a;
  a.kind = AdapterKind::var_selector;
  a.d = d;
  a.d_new = d_new;
  a.indices.assign(order.begin(), order.begin() + d_new);
  return a;
}

RawSeries apply_adapter(const Adapter& a, const RawSeries& series) {
  if (series.channels != a.d)
    throw std::invalid_argument("apply_adapter: series has " +
                                std::to_string(series.channels) +
                                " channels, adapter expects " +
                                std::to_string(a.d));
  const int t = series.length;
  RawSeries out;
  out.channels = a.d_new;
  out.length = t;
  out.label = series.label;
  out.values.assign(std::size_t(a.d_new) * t, 0.0f);

  if (a.kind == AdapterKind::var_selector) {
    for (int k = 0; k < a.d_new; ++k) {
      const float* src = series.channel(a.indices[std::size_t(k)]);
      std::copy(src, src + t, out.channel(k));
    }
    return out;
  }

  const bool centered = a.kind == AdapterKind::pca;
  for (int k = 0; k < a.d_new; ++k) {
    float* dst = out.channel(k);
    for (int c = 0; c < a.d; ++c) {
      const float wkc = a.w[std::size_t(k) * a.d + c];
      const float mu = centered ? a.mean[std::size_t(c)] : 0.0f;
      const float* src = series.channel(c);
      for (int s = 0; s < t; ++s) dst[s] += wkc * (src[s] - mu);
    }
  }
  return out;
}

Dataset apply_adapter(const Adapter& a, const Dataset& ds) {
  Dataset out = ds;
  out.channels = a.d_new;
  for (auto& s : out.samples) s = apply_adapter(a, s);
  return out;
}

}  // namespace mantis
