#pragma once

// Channel adapters a: R^d -> R^d_new applied independently at every time
// step. The four standalone kinds are fitted unsupervised on the dataset
// reshaped to (n*t, d); the linear combiner is trained by backpropagation.

#include <cstdint>
#include <string>
#include <vector>

#include "mantis/dataset.hpp"

namespace mantis {

enum class AdapterKind { pca, svd, rand_proj, var_selector, lcomb };

const char* adapter_kind_name(AdapterKind k);
AdapterKind adapter_kind_from_name(const std::string& name);

// Default output width: min{d, 10} for the standalone kinds, always 10 for
// the learnable combiner.
int default_d_new(int d, AdapterKind kind);

struct Adapter {
  AdapterKind kind = AdapterKind::pca;
  int d = 0;
  int d_new = 0;
  std::vector<float> w;       // (d_new, d) row-major; unused for var_selector
  std::vector<float> mean;    // column means, pca only
  std::vector<int> indices;   // var_selector only, descending variance order
};

// (n*t, d) design matrix: row (i*t + s) holds the d channel values of sample
// i at time step s.
struct ReshapedDesign {
  int rows = 0;
  int cols = 0;
  std::vector<double> m;  // row-major

  double at(int r, int c) const { return m[std::size_t(r) * cols + c]; }
};

ReshapedDesign reshape_for_fit(const Dataset& ds);

Adapter fit_pca(const ReshapedDesign& design, int d_new);
Adapter fit_svd(const ReshapedDesign& design, int d_new);
Adapter fit_rand_proj(int d, int d_new, std::uint64_t seed);
Adapter fit_var_selector(const ReshapedDesign& design, int d_new);

// Per-time-step application; the time axis is untouched.
RawSeries apply_adapter(const Adapter& a, const RawSeries& series);
Dataset apply_adapter(const Adapter& a, const Dataset& ds);

// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major d x d).
// Returns eigenvalues in descending order; eigvecs row k is the k-th
// eigenvector.
void eigen_symmetric(const std::vector<double>& a, int d,
                     std::vector<double>& eigvals,
                     std::vector<double>& eigvecs);

}  // namespace mantis
