#pragma once
// Selective state space primitive.
//
// Each of the E model channels runs its own diagonal recurrence over an
// N-dimensional state:
//
//   delta_t = softplus(x_t W_delta + b_delta)          (one step per channel)
//   B_t = x_t W_B,  C_t = x_t W_C                      (shared across channels)
//   A_bar = exp(delta_t * A),  B_bar = delta_t * B_t
//   h_t = A_bar (.) h_{t-1} + B_bar x_t,  h_{-1} = 0
//   y_t = <C_t, h_t> + D x_t
//
// The recurrence is evaluated either left to right or as a work-efficient
// (Blelloch) prefix scan over ScanElements; both agree to rounding.

#include <cstddef>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "vmamba/autodiff.hpp"
#include "vmamba/tensor.hpp"

namespace vmamba::ssm {

enum class ScanMode { sequential, parallel };

std::string_view to_string(ScanMode mode);
ScanMode parse_scan_mode(std::string_view text);

// Diagonal real HiPPO approximation: A[n] = -(n + 1).
std::vector<double> hippo_diag_init(std::size_t state_dim);

// One element of the first-order recurrence h -> a (.) h + b.
template <typename T>
struct ScanElement {
  std::vector<T> a;
  std::vector<T> b;
};

// Apply `first`, then `second`: (a2 a1, a2 b1 + b2).
template <typename T>
ScanElement<T> combine(const ScanElement<T>& first, const ScanElement<T>& second);

// h[t] = a_bar[t] (.) h[t-1] + u[t] for `lanes` independent lanes; rows are
// contiguous. `h_init` may be empty (zero initial state).
template <typename T>
void scan_sequential(std::span<const T> a_bar, std::span<const T> u, std::span<T> h, std::size_t lanes,
                     std::span<const T> h_init = {});

// Same contract, evaluated as an up-sweep/down-sweep prefix scan. Each tree
// level may be split across `threads` workers.
template <typename T>
void scan_parallel(std::span<const T> a_bar, std::span<const T> u, std::span<T> h, std::size_t lanes,
                   std::span<const T> h_init = {}, std::size_t threads = 1);

// Tensor forms over [L, K].
Tensor scan_sequential(const Tensor& a_bar, const Tensor& u);
Tensor scan_parallel(const Tensor& a_bar, const Tensor& u, std::size_t threads = 1);

struct SsmParams {
  Tensor a;        // [N], strictly negative
  Tensor w_delta;  // [E, E]
  Tensor b_delta;  // [E]
  Tensor w_b;      // [E, N]
  Tensor w_c;      // [E, N]
  Tensor d;        // [E]

  std::size_t state_dim() const { return a.size(); }
  std::size_t model_dim() const { return d.size(); }

  // Throws ShapeError / ValidationError on inconsistent shapes or A >= 0.
  void validate() const;

  // HiPPO A, small random projections, step bias giving softplus(b) in
  // [1e-3, 1e-1], D = 1.
  static SsmParams init(std::size_t model_dim, std::size_t state_dim, std::mt19937_64& rng);
};

struct Projections {
  std::vector<double> delta;  // [E], all > 0
  std::vector<double> b;      // [N]
  std::vector<double> c;      // [N]
};

Projections selective_projections(std::span<const double> x_t, const SsmParams& params);

struct Discretized {
  std::vector<double> a_bar;
  std::vector<double> b_bar;
};

// A_bar = exp(delta A), B_bar = delta B. Throws ValidationError for delta < 0.
Discretized discretize(std::span<const double> a, std::span<const double> b_t, double delta_t);

template <typename T>
void discretize_into(std::span<const T> a, std::span<const T> b_t, T delta_t, std::span<T> a_bar,
                     std::span<T> b_bar);

// <C_t, h_t> + D x_t for one channel.
double ssm_output(std::span<const double> h_t, std::span<const double> c_t, double d, double x_t);

// x: [L, E] -> y: [L, E].
Tensor selective_scan(const Tensor& x, const SsmParams& params, ScanMode mode);

// Closed-form double sum
//   y_t = sum_{s<=t} C_t . (prod_{s<r<=t} A_bar_r) (.) B_bar_s x_s + D x_t,
// evaluated directly in O(L^2 E N) without any scan. Intended for L <= 256.
Tensor unrolled_oracle(const Tensor& x, const SsmParams& params);

// Precomputed projections for one sequence; the arithmetic kernel shared by
// the model, the pure API and the benchmark. Pointers are row-major:
// x, delta: [L, E]; a: [N]; b, c: [L, N]; d: [E].
template <typename T>
struct ScanProblem {
  std::size_t length = 0;
  std::size_t channels = 0;
  std::size_t state = 0;
  const T* x = nullptr;
  const T* delta = nullptr;
  const T* a = nullptr;
  const T* b = nullptr;
  const T* c = nullptr;
  const T* d = nullptr;
};

// Writes y [L, E]. When non-null, a_bar_out and h_out receive [L, E, N];
// when both are null the sequential mode streams with O(E N) state.
template <typename T>
void scan_core(const ScanProblem<T>& problem, ScanMode mode, T* y, T* a_bar_out = nullptr,
               T* h_out = nullptr);

// Recurrent inference: one token at a time, keeping only the current state.
template <typename T>
void scan_recurrent(const ScanProblem<T>& problem, T* y);

// Graph bindings -----------------------------------------------------------

// Parameters of one scan as graph nodes. A is stored as a_log with
// A = -exp(a_log), keeping it strictly negative under any update.
struct SsmVars {
  Var w_delta, b_delta, w_b, w_c, a_log, d;
};

// Fused discretize + scan + readout. x, delta: [B, L, E] or [L, E];
// b, c: matching [B, L, N] or [L, N]; a_log: [N]; d: [E].
Var ssm_scan(Graph& g, Var x, Var delta, Var a_log, Var b, Var c, Var d, ScanMode mode);

// Projections followed by ssm_scan.
Var selective_scan(Graph& g, Var x, const SsmVars& vars, ScanMode mode);

}  // namespace vmamba::ssm
