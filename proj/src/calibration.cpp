#include "mantis/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace mantis {

namespace {

int bin_index(double conf, int bins) {
  // left-open right-closed intervals; conf = 0 goes to bin 0
  if (conf <= 0.0) return 0;
  int j = static_cast<int>(std::ceil(conf * bins)) - 1;
  return std::clamp(j, 0, bins - 1);
}

}  // namespace

ProbabilityMatrix make_probability_matrix(std::vector<double> probs, int n,
                                          int k, std::vector<int> labels) {
  if (static_cast<int>(probs.size()) != n * k)
    throw std::invalid_argument("probability matrix: buffer size mismatch");
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("probability matrix: label count mismatch");
  ProbabilityMatrix pm;
  pm.n = n;
  pm.k = k;
  pm.probs = std::move(probs);
  pm.labels = std::move(labels);
  pm.confidences.resize(static_cast<std::size_t>(n));
  pm.predictions.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double* row = pm.probs.data() + std::size_t(i) * k;
    int arg = 0;
    for (int j = 1; j < k; ++j)
      if (row[j] > row[arg]) arg = j;  // ties stay at the lowest index
    pm.predictions[std::size_t(i)] = arg;
    pm.confidences[std::size_t(i)] = row[arg];
  }
  return pm;
}

double ece(const ProbabilityMatrix& pm, int bins) {
  if (pm.n < 1) throw std::invalid_argument("ece: empty probability matrix");
  std::vector<double> gap(static_cast<std::size_t>(bins), 0.0);
  for (int i = 0; i < pm.n; ++i) {
    const int j = bin_index(pm.confidences[std::size_t(i)], bins);
    const double correct =
        pm.predictions[std::size_t(i)] == pm.labels[std::size_t(i)] ? 1.0 : 0.0;
    gap[std::size_t(j)] += correct - pm.confidences[std::size_t(i)];
  }
  double total = 0.0;
  for (double g : gap) total += std::abs(g);
  return total / pm.n;
}

BinStats reliability_bins(const ProbabilityMatrix& pm, int bins) {
  BinStats bs;
  bs.bins = bins;
  bs.counts.assign(static_cast<std::size_t>(bins), 0);
  bs.avg_confidence.assign(static_cast<std::size_t>(bins), 0.0);
  bs.avg_accuracy.assign(static_cast<std::size_t>(bins), 0.0);
  for (int i = 0; i < pm.n; ++i) {
    const int j = bin_index(pm.confidences[std::size_t(i)], bins);
    bs.counts[std::size_t(j)] += 1;
    bs.avg_confidence[std::size_t(j)] += pm.confidences[std::size_t(i)];
    bs.avg_accuracy[std::size_t(j)] +=
        pm.predictions[std::size_t(i)] == pm.labels[std::size_t(i)] ? 1.0 : 0.0;
  }
  for (int j = 0; j < bins; ++j) {
    if (bs.counts[std::size_t(j)] == 0) continue;
    bs.avg_confidence[std::size_t(j)] /= bs.counts[std::size_t(j)];
    bs.avg_accuracy[std::size_t(j)] /= bs.counts[std::size_t(j)];
  }
  return bs;
}

double mean_nll(const std::vector<double>& logits, int n, int k,
                const std::vector<int>& labels, double temperature) {
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const double* row = logits.data() + std::size_t(i) * k;
    double mx = row[0] / temperature;
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j] / temperature);
    double denom = 0.0;
    for (int j = 0; j < k; ++j) denom += std::exp(row[j] / temperature - mx);
    total += mx + std::log(denom) -
             row[labels[std::size_t(i)]] / temperature;
  }
  return total / n;
}

TemperatureCorrector fit_temperature(const std::vector<double>& logits, int n,
                                     int k, const std::vector<int>& labels) {
  if (n < 1) throw std::invalid_argument("fit_temperature: no samples");
  const double lo = std::log(0.05), hi = std::log(20.0);
  auto nll_at = [&](double u) { return mean_nll(logits, n, k, labels, std::exp(u)); };

  // golden-section search on log T
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double c = b - phi * (b - a), d = a + phi * (b - a);
  double fc = nll_at(c), fd = nll_at(d);
  while (b - a > 1e-4) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - phi * (b - a);
      fc = nll_at(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + phi * (b - a);
      fd = nll_at(d);
    }
  }
  double best_u = 0.5 * (a + b);
  double best = nll_at(best_u);

  // fallback for non-unimodal surfaces: if an endpoint region won, scan
  if (best_u <= lo + 2e-4 || best_u >= hi - 2e-4) {
    for (int i = 0; i < 200; ++i) {
      const double u = lo + (hi - lo) * i / 199.0;
      const double v = nll_at(u);
      if (v < best) {
        best = v;
        best_u = u;
      }
    }
  }
  // T = 1 is in the domain; never do worse than the identity
  if (nll_at(0.0) < best) best_u = 0.0;
  return TemperatureCorrector{std::exp(best_u)};
}

ProbabilityMatrix apply_temperature(const TemperatureCorrector& c,
                                    const std::vector<double>& logits, int n,
                                    int k, std::vector<int> labels) {
  if (c.t <= 0) throw std::invalid_argument("apply_temperature: T must be > 0");
  std::vector<double> probs(std::size_t(n) * k);
  for (int i = 0; i < n; ++i) {
    const double* row = logits.data() + std::size_t(i) * k;
    double* prow = probs.data() + std::size_t(i) * k;
    double mx = row[0] / c.t;
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j] / c.t);
    double denom = 0.0;
    for (int j = 0; j < k; ++j) {
      prow[j] = std::exp(row[j] / c.t - mx);
      denom += prow[j];
    }
    for (int j = 0; j < k; ++j) prow[j] /= denom;
  }
  return make_probability_matrix(std::move(probs), n, k, std::move(labels));
}

std::vector<double> pav_fit(const std::vector<double>& y) {
  // stack of blocks (value, count), merged while decreasing
  std::vector<double> value;
  std::vector<long> count;
  for (double yi : y) {
    value.push_back(yi);
    count.push_back(1);
    while (value.size() > 1 && value[value.size() - 2] >= value.back()) {
      const double merged =
          (value[value.size() - 2] * count[count.size() - 2] +
           value.back() * count.back()) /
          (count[count.size() - 2] + count.back());
      count[count.size() - 2] += count.back();
      value[value.size() - 2] = merged;
      value.pop_back();
      count.pop_back();
    }
  }
  std::vector<double> fitted;
  fitted.reserve(y.size());
  for (std::size_t b = 0; b < value.size(); ++b)
    fitted.insert(fitted.end(), static_cast<std::size_t>(count[b]), value[b]);
  return fitted;
}

double IsotonicCorrector::map_class(int cls, double p) const {
  const auto& x = xs[std::size_t(cls)];
  const auto& yv = ys[std::size_t(cls)];
  if (x.empty()) return p;  // identity map
  // piecewise constant: value of the block holding the largest x_i <= p
  auto it = std::upper_bound(x.begin(), x.end(), p);
  if (it == x.begin()) return yv.front();
  return yv[static_cast<std::size_t>(it - x.begin()) - 1];
}

IsotonicCorrector fit_isotonic_multiclass(const ProbabilityMatrix& pm) {
  if (pm.n < 2)
    throw std::invalid_argument("fit_isotonic_multiclass: need >= 2 samples");
  IsotonicCorrector c;
  c.k = pm.k;
  c.xs.resize(static_cast<std::size_t>(pm.k));
  c.ys.resize(static_cast<std::size_t>(pm.k));
  for (int cls = 0; cls < pm.k; ++cls) {
    long members = 0;
    for (int i = 0; i < pm.n; ++i)
      if (pm.labels[std::size_t(i)] == cls) ++members;
    if (members < 2) continue;  // identity map for under-represented classes

    std::vector<int> order(static_cast<std::size_t>(pm.n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return pm.at(a, cls) < pm.at(b, cls);
    });
    std::vector<double> y(static_cast<std::size_t>(pm.n));
    std::vector<double> x(static_cast<std::size_t>(pm.n));
    for (int i = 0; i < pm.n; ++i) {
      x[std::size_t(i)] = pm.at(order[std::size_t(i)], cls);
      y[std::size_t(i)] =
          pm.labels[std::size_t(order[std::size_t(i)])] == cls ? 1.0 : 0.0;
    }
    auto fitted = pav_fit(y);
    // collapse duplicate x to the last fitted value (maps must be functions)
    auto& cx = c.xs[std::size_t(cls)];
    auto& cy = c.ys[std::size_t(cls)];
    for (int i = 0; i < pm.n; ++i) {
      if (!cx.empty() && cx.back() == x[std::size_t(i)])
        cy.back() = fitted[std::size_t(i)];
      else {
        cx.push_back(x[std::size_t(i)]);
        cy.push_back(fitted[std::size_t(i)]);
      }
    }
  }
  return c;
}

ProbabilityMatrix apply_isotonic(const IsotonicCorrector& c,
                                 const ProbabilityMatrix& pm) {
  if (c.k != pm.k)
    throw std::invalid_argument("apply_isotonic: class count mismatch: " +
                                std::to_string(c.k) + " vs " +
                                std::to_string(pm.k));
  std::vector<double> probs(std::size_t(pm.n) * pm.k);
  for (int i = 0; i < pm.n; ++i) {
    double* row = probs.data() + std::size_t(i) * pm.k;
    double total = 0.0;
    for (int j = 0; j < pm.k; ++j) {
      row[j] = std::clamp(c.map_class(j, pm.at(i, j)), 1e-6, 1.0);
      total += row[j];
    }
    for (int j = 0; j < pm.k; ++j) row[j] /= total;
  }
  return make_probability_matrix(std::move(probs), pm.n, pm.k, pm.labels);
}

}  // namespace mantis
