#include "tables.hpp"

namespace vmamba::kernels::detail {
namespace {

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void fma(const T* a, const T* b, const T* c, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i] + c[i];
}

template <typename T>
void combine(const T* a1, const T* b1, T* a2, T* b2, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    b2[i] = a2[i] * b1[i] + b2[i];
    a2[i] = a2[i] * a1[i];
  }
}

template <typename T>
void recurrence(const T* a, const T* u, const T* h0, T* h, std::size_t steps,
                std::size_t lanes) {
  for (std::size_t t = 0; t < steps; ++t) {
    const T* prev = t == 0 ? h0 : h + (t - 1) * lanes;
    const T* at = a + t * lanes;
    const T* ut = u + t * lanes;
    T* ht = h + t * lanes;
    if (prev == nullptr) {
      for (std::size_t k = 0; k < lanes; ++k) ht[k] = ut[k];
    } else {
      for (std::size_t k = 0; k < lanes; ++k) ht[k] = at[k] * prev[k] + ut[k];
    }
  }
}

}  // namespace

template <typename T>
const Table<T>& scalar_table() {
  static const Table<T> table{&dot<T>, &axpy<T>, &fma<T>, &combine<T>, &recurrence<T>};
  return table;
}

template const Table<float>& scalar_table<float>();
template const Table<double>& scalar_table<double>();

}  // namespace vmamba::kernels::detail
