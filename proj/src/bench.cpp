#include "vmamba/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>

#include "vmamba/error.hpp"
#include "vmamba/kernels.hpp"
#include "vmamba/ssm.hpp"

namespace vmamba::bench {

using vmamba::to_string;

template <typename T>
void attention_mix(const T* q, const T* k, const T* v, std::size_t length, std::size_t dim, T* scores, T* out) {
  const auto& kern = kernels::active<T>();
  const T scale = T(1) / std::sqrt(static_cast<T>(dim));
  std::fill(out, out + length * dim, T(0));
  for (std::size_t i = 0; i < length; ++i) {
    T* row = scores + i * length;
    T top = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < length; ++j) {
      row[j] = kern.dot(q + i * dim, k + j * dim, dim) * scale;
      top = std::max(top, row[j]);
    }
    T total = 0;
    for (std::size_t j = 0; j < length; ++j) {
      row[j] = std::exp(row[j] - top);
      total += row[j];
    }
    for (std::size_t j = 0; j < length; ++j) {
      row[j] /= total;
      kern.axpy(row[j], v + j * dim, out + i * dim, dim);
    }
  }
}

template void attention_mix<float>(const float*, const float*, const float*, std::size_t, std::size_t, float*, float*);
template void attention_mix<double>(const double*, const double*, const double*, std::size_t, std::size_t, double*,
                                    double*);

namespace {

Tensor matmul(const Tensor& x, const Tensor& w) {
  const std::size_t l = x.dim(0), e = x.dim(1), f = w.dim(1);
  Tensor out({l, f});
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t j = 0; j < e; ++j)
      for (std::size_t c = 0; c < f; ++c) out[i * f + c] += x[i * e + j] * w[j * f + c];
  return out;
}

}  // namespace

Attention reference_attention(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv) {
  if (x.rank() != 2) throw ShapeError("attention: expected x [L, E], got " + to_string(x.shape()));
  const std::size_t l = x.dim(0), e = x.dim(1);
  for (const Tensor* w : {&wq, &wk, &wv})
    if (w->shape() != Shape{e, e})
      throw ShapeError("attention: projection " + to_string(w->shape()) + " does not match E = " + std::to_string(e));
  const Tensor q = matmul(x, wq), k = matmul(x, wk), v = matmul(x, wv);
  Attention a{Tensor({l, e}), Tensor({l, l})};
  attention_mix(q.ptr(), k.ptr(), v.ptr(), l, e, a.weights.ptr(), a.output.ptr());
  return a;
}

std::string_view to_string(Mechanism m) {
  switch (m) {
    case Mechanism::attention: return "attention";
    case Mechanism::scan_sequential: return "scan_sequential";
    case Mechanism::scan_parallel: return "scan_parallel";
  }
  return "?";
}

void BenchConfig::validate() const {
  if (lengths.size() < 2) throw ValidationError("bench: need at least two lengths to fit a slope");
  for (auto l : lengths)
    if (l == 0) throw ValidationError("bench: lengths must be positive");
  if (!std::is_sorted(lengths.begin(), lengths.end()) ||
      std::adjacent_find(lengths.begin(), lengths.end()) != lengths.end())
    throw ValidationError("bench: lengths must be strictly increasing");
  if (model_dim == 0 || state_dim == 0) throw ValidationError("bench: model and state dims must be positive");
  if (repetitions < 5) throw ValidationError("bench: at least 5 repetitions are required for a stable median");
}

namespace {

// Each repetition loops the call until it spans at least kMinRepSeconds so
// microsecond-scale kernels are not lost in timer and scheduler noise.
constexpr double kMinRepSeconds = 0.05;

template <typename Fn>
double median_seconds(std::size_t reps, Fn&& fn) {
  using clock = std::chrono::steady_clock;
  auto t0 = clock::now();
  fn();  // also warms caches and pages in buffers
  const double once = std::chrono::duration<double>(clock::now() - t0).count();
  const auto inner = static_cast<std::size_t>(std::clamp(std::ceil(kMinRepSeconds / std::max(once, 1e-9)), 1.0, 1e5));
  std::vector<double> times;
  for (std::size_t r = 0; r < reps; ++r) {
    t0 = clock::now();
    for (std::size_t i = 0; i < inner; ++i) fn();
    times.push_back(std::chrono::duration<double>(clock::now() - t0).count() / static_cast<double>(inner));
  }
  std::nth_element(times.begin(), times.begin() + static_cast<std::ptrdiff_t>(reps / 2), times.end());
  return times[reps / 2];
}

template <typename T>
std::vector<T> random_vector(std::size_t n, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> out(n);
  for (auto& v : out) v = static_cast<T>(dist(rng));
  return out;
}

template <typename T>
std::vector<BenchRecord> run_typed(const BenchConfig& c) {
  std::mt19937_64 rng(c.seed);
  const std::size_t e = c.model_dim, n = c.state_dim;
  std::vector<BenchRecord> attention, sequential, parallel;
  for (std::size_t l : c.lengths) {
    const auto q = random_vector<T>(l * e, rng, -1, 1);
    const auto k = random_vector<T>(l * e, rng, -1, 1);
    const auto v = random_vector<T>(l * e, rng, -1, 1);
    std::vector<T> scores(l * l), out(l * e);
    attention.push_back({Mechanism::attention, l, median_seconds(c.repetitions, [&] {
                           attention_mix(q.data(), k.data(), v.data(), l, e, scores.data(), out.data());
                         }),
                         e});

    const auto x = random_vector<T>(l * e, rng, -1, 1);
    const auto delta = random_vector<T>(l * e, rng, 1e-3, 1e-1);
    const auto b = random_vector<T>(l * n, rng, -1, 1);
    const auto cc = random_vector<T>(l * n, rng, -1, 1);
    const auto d = random_vector<T>(e, rng, 0.5, 1.5);
    std::vector<T> a;
    for (double av : ssm::hippo_diag_init(n)) a.push_back(static_cast<T>(av));
    const ssm::ScanProblem<T> problem{l, e, n, x.data(), delta.data(), a.data(), b.data(), cc.data(), d.data()};
    // The parallel form needs the full state history; its buffers are reused
    // across calls as the score matrix is for attention.
    std::vector<T> y(l * e), a_bar(l * e * n), h(l * e * n);
    sequential.push_back({Mechanism::scan_sequential, l, median_seconds(c.repetitions, [&] {
                            ssm::scan_core(problem, ssm::ScanMode::sequential, y.data());
                          }),
                          e});
    parallel.push_back({Mechanism::scan_parallel, l, median_seconds(c.repetitions, [&] {
                          ssm::scan_core(problem, ssm::ScanMode::parallel, y.data(), a_bar.data(), h.data());
                        }),
                        e});
  }
  std::vector<BenchRecord> all = std::move(attention);
  all.insert(all.end(), sequential.begin(), sequential.end());
  all.insert(all.end(), parallel.begin(), parallel.end());
  return all;
}

}  // namespace

std::vector<BenchRecord> run_bench(const BenchConfig& config) {
  config.validate();
  return config.single_precision ? run_typed<float>(config) : run_typed<double>(config);
}

std::string bench_csv(std::span<const BenchRecord> records) {
  std::string out = "mechanism,L,median_seconds\n";
  char buf[96];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, ",%zu,%.9g\n", r.length, r.median_seconds);
    out += std::string(to_string(r.mechanism)) + buf;
  }
  return out;
}

double loglog_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw ValidationError("slope fit needs at least two points");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0) || !(y[i] > 0)) throw ValidationError("slope fit needs positive values");
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  if (sxx == 0) throw ValidationError("slope fit needs at least two distinct lengths");
  return sxy / sxx;
}

double fitted_slope(std::span<const BenchRecord> records, Mechanism mechanism) {
  std::vector<const BenchRecord*> rows;
  for (const auto& r : records)
    if (r.mechanism == mechanism) rows.push_back(&r);
  std::sort(rows.begin(), rows.end(), [](auto* a, auto* b) { return a->length < b->length; });
  const std::size_t keep = std::min(rows.size(), std::max<std::size_t>(2, (rows.size() + 1) / 2));
  std::vector<double> x, y;
  for (std::size_t i = rows.size() - keep; i < rows.size(); ++i) {
    x.push_back(static_cast<double>(rows[i]->length));
    y.push_back(rows[i]->median_seconds);
  }
  return loglog_slope(x, y);
}

}  // namespace vmamba::bench
