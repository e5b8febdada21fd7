#pragma once

// Expected Calibration Error over 10 equal-width bins, reliability tables,
// and the two post-hoc correctors: temperature scaling and one-vs-rest
// isotonic regression with renormalization.

#include <vector>

namespace mantis {

// Row-simplex probabilities with labels; confidences/predictions derived as
// row max / row argmax (argmax ties toward the lowest class index).
struct ProbabilityMatrix {
  int n = 0;
  int k = 0;
  std::vector<double> probs;  // (n, k) row-major
  std::vector<int> labels;    // (n)
  std::vector<double> confidences;
  std::vector<int> predictions;

  double at(int i, int j) const { return probs[std::size_t(i) * k + j]; }
};

ProbabilityMatrix make_probability_matrix(std::vector<double> probs, int n,
                                          int k, std::vector<int> labels);

struct BinStats {
  int bins = 10;
  std::vector<long> counts;
  std::vector<double> avg_confidence;  // 0 for empty bins
  std::vector<double> avg_accuracy;    // 0 for empty bins
};

// Binned absolute-sum formula:
// ECE = (1/n) * sum_j | sum_{i: conf_i in B_j} (1{pred_i == y_i} - conf_i) |.
// Bins are left-open right-closed; confidence 0 falls into bin 0.
double ece(const ProbabilityMatrix& pm, int bins = 10);

BinStats reliability_bins(const ProbabilityMatrix& pm, int bins = 10);

struct TemperatureCorrector {
  double t = 1.0;
};

// Minimizes validation NLL of softmax(logits / T) by golden-section search
// on log T in [ln 0.05, ln 20] (grid-scan fallback if a bracket endpoint
// wins). T = 1 lies inside the domain, so the fitted NLL never exceeds the
// uncorrected one.
TemperatureCorrector fit_temperature(const std::vector<double>& logits, int n,
                                     int k, const std::vector<int>& labels);

// softmax(logits / T); argmax is unchanged for any T > 0.
ProbabilityMatrix apply_temperature(const TemperatureCorrector& c,
                                    const std::vector<double>& logits, int n,
                                    int k, std::vector<int> labels);

double mean_nll(const std::vector<double>& logits, int n, int k,
                const std::vector<int>& labels, double temperature = 1.0);

// Per-class monotone step map fitted by pool-adjacent-violators.
struct IsotonicCorrector {
  int k = 0;
  // per class: sorted breakpoints with fitted values; empty map = identity
  std::vector<std::vector<double>> xs;
  std::vector<std::vector<double>> ys;

  double map_class(int cls, double p) const;
};

// One-vs-rest PAV of 1{y == k} against probs[:, k]; at apply time corrected
// scores are clipped to [1e-6, 1] and renormalized to the simplex.
IsotonicCorrector fit_isotonic_multiclass(const ProbabilityMatrix& pm);

ProbabilityMatrix apply_isotonic(const IsotonicCorrector& c,
                                 const ProbabilityMatrix& pm);

// Pool-adjacent-violators: least-squares monotone fit of y against ascending
// x. Returns the fitted value for each input point (in the given order,
// which must be sorted by x).
std::vector<double> pav_fit(const std::vector<double>& y);

}  // namespace mantis
