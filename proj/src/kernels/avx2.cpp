// Compiled with -mavx2 -mfma; only reached through the dispatch table after a
// CPUID check, so nothing here may run on a CPU without those extensions.
#include <immintrin.h>

#include "tables.hpp"

namespace vmamba::kernels::detail {
namespace {

template <typename T>
struct Vec;

template <>
struct Vec<double> {
  using type = __m256d;
  static constexpr std::size_t width = 4;
  static type load(const double* p) { return _mm256_loadu_pd(p); }
  static void store(double* p, type v) { _mm256_storeu_pd(p, v); }
  static type set1(double v) { return _mm256_set1_pd(v); }
  static type zero() { return _mm256_setzero_pd(); }
  static type mul(type a, type b) { return _mm256_mul_pd(a, b); }
  static type add(type a, type b) { return _mm256_add_pd(a, b); }
  static type fmadd(type a, type b, type c) { return _mm256_fmadd_pd(a, b, c); }
  static double hsum(type v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d swapped = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, swapped));
  }
};

template <>
struct Vec<float> {
  using type = __m256;
  static constexpr std::size_t width = 8;
  static type load(const float* p) { return _mm256_loadu_ps(p); }
  static void store(float* p, type v) { _mm256_storeu_ps(p, v); }
  static type set1(float v) { return _mm256_set1_ps(v); }
  static type zero() { return _mm256_setzero_ps(); }
  static type mul(type a, type b) { return _mm256_mul_ps(a, b); }
  static type add(type a, type b) { return _mm256_add_ps(a, b); }
  static type fmadd(type a, type b, type c) { return _mm256_fmadd_ps(a, b, c); }
  static float hsum(type v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    __m128 shuf = _mm_movehdup_ps(lo);
    __m128 sums = _mm_add_ps(lo, shuf);
    shuf = _mm_movehl_ps(shuf, sums);
    return _mm_cvtss_f32(_mm_add_ss(sums, shuf));
  }
};

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  using V = Vec<T>;
  constexpr std::size_t w = V::width;
  auto acc0 = V::zero();
  auto acc1 = V::zero();
  std::size_t i = 0;
  for (; i + 2 * w <= n; i += 2 * w) {
    acc0 = V::fmadd(V::load(a + i), V::load(b + i), acc0);
    acc1 = V::fmadd(V::load(a + i + w), V::load(b + i + w), acc1);
  }
  for (; i + w <= n; i += w) acc0 = V::fmadd(V::load(a + i), V::load(b + i), acc0);
  T acc = V::hsum(V::add(acc0, acc1));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  using V = Vec<T>;
  constexpr std::size_t w = V::width;
  const auto va = V::set1(alpha);
  std::size_t i = 0;
  for (; i + w <= n; i += w) V::store(y + i, V::fmadd(va, V::load(x + i), V::load(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void fma(const T* a, const T* b, const T* c, T* out, std::size_t n) {
  using V = Vec<T>;
  constexpr std::size_t w = V::width;
  std::size_t i = 0;
  for (; i + w <= n; i += w)
    V::store(out + i, V::fmadd(V::load(a + i), V::load(b + i), V::load(c + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i] + c[i];
}

template <typename T>
void combine(const T* a1, const T* b1, T* a2, T* b2, std::size_t n) {
  using V = Vec<T>;
  constexpr std::size_t w = V::width;
  std::size_t i = 0;
  for (; i + w <= n; i += w) {
    const auto va2 = V::load(a2 + i);
    V::store(b2 + i, V::fmadd(va2, V::load(b1 + i), V::load(b2 + i)));
    V::store(a2 + i, V::mul(va2, V::load(a1 + i)));
  }
  for (; i < n; ++i) {
    b2[i] = a2[i] * b1[i] + b2[i];
    a2[i] = a2[i] * a1[i];
  }
}

template <typename T>
void recurrence(const T* a, const T* u, const T* h0, T* h, std::size_t steps,
                std::size_t lanes) {
  using V = Vec<T>;
  constexpr std::size_t w = V::width;
  for (std::size_t t = 0; t < steps; ++t) {
    const T* prev = t == 0 ? h0 : h + (t - 1) * lanes;
    const T* at = a + t * lanes;
    const T* ut = u + t * lanes;
    T* ht = h + t * lanes;
    std::size_t k = 0;
    if (prev == nullptr) {
      for (; k < lanes; ++k) ht[k] = ut[k];
      continue;
    }
    for (; k + w <= lanes; k += w)
      V::store(ht + k, V::fmadd(V::load(at + k), V::load(prev + k), V::load(ut + k)));
    for (; k < lanes; ++k) ht[k] = at[k] * prev[k] + ut[k];
  }
}

}  // namespace

template <typename T>
const Table<T>& avx2_table() {
  static const Table<T> table{&dot<T>, &axpy<T>, &fma<T>, &combine<T>, &recurrence<T>};
  return table;
}

template const Table<float>& avx2_table<float>();
template const Table<double>& avx2_table<double>();

}  // namespace vmamba::kernels::detail
