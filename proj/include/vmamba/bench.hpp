#pragma once
// Quadratic attention baseline and the length-scaling benchmark that sets it
// against the selective scan.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vmamba/tensor.hpp"

namespace vmamba::bench {

struct Attention {
  Tensor output;   // [L, E]
  Tensor weights;  // [L, L], rows sum to one
};

// Single head: softmax(Q K^T / sqrt(E)) V with Q = x Wq, K = x Wk, V = x Wv.
// The full L x L weight matrix is materialised.
Attention reference_attention(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv);

// The mixing step alone on precomputed q, k, v ([L, E] row-major); writes
// `out` [L, E] and uses `scores` [L, L] as scratch.
template <typename T>
void attention_mix(const T* q, const T* k, const T* v, std::size_t length, std::size_t dim, T* scores, T* out);

enum class Mechanism { attention, scan_sequential, scan_parallel };
std::string_view to_string(Mechanism m);

struct BenchRecord {
  Mechanism mechanism;
  std::size_t length;
  double median_seconds;
  std::size_t model_dim;
};

struct BenchConfig {
  std::vector<std::size_t> lengths{256, 512, 1024, 2048, 4096};
  std::size_t model_dim = 16;
  std::size_t state_dim = 16;
  std::size_t repetitions = 5;
  bool single_precision = false;
  std::uint64_t seed = 0;

  void validate() const;
};

// Times each mechanism at each length, single-threaded, projections
// excluded. Rows are grouped by mechanism in enum order.
std::vector<BenchRecord> run_bench(const BenchConfig& config);

std::string bench_csv(std::span<const BenchRecord> records);

// Least-squares slope of log(seconds) against log(L) over the longer half of
// the lengths recorded for `mechanism` (the upper ceil(n/2) lengths, at
// least two).
double fitted_slope(std::span<const BenchRecord> records, Mechanism mechanism);

// Slope of log y on log x, plain least squares.
double loglog_slope(std::span<const double> x, std::span<const double> y);

}  // namespace vmamba::bench
