#pragma once
// Data-parallel inner loops shared by the tensor ops, the selective scan and
// the attention baseline. Every kernel has a portable scalar reference and an
// AVX2+FMA variant; the active table is chosen once at startup from CPUID and
// can be overridden with VMAMBA_ISA=scalar|avx2 or kernels::select().

#include <cstddef>
#include <string_view>

namespace vmamba::kernels {

enum class Isa { scalar, avx2 };

std::string_view to_string(Isa isa);

template <typename T>
struct Table {
  T (*dot)(const T* a, const T* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(T alpha, const T* x, T* y, std::size_t n);
  // out = a * b + c (out may alias c)
  void (*fma)(const T* a, const T* b, const T* c, T* out, std::size_t n);
  // Scan-element composition, first (a1, b1) then (a2, b2):
  //   b2 <- a2 * b1 + b2,  a2 <- a2 * a1
  void (*combine)(const T* a1, const T* b1, T* a2, T* b2, std::size_t n);
  // h[t] = a[t] * h[t-1] + u[t] over `steps` rows of `lanes` values each;
  // h[-1] is h0, or zero when h0 is null.
  void (*recurrence)(const T* a, const T* u, const T* h0, T* h, std::size_t steps,
                     std::size_t lanes);
};

// True when the ISA was compiled in and the running CPU supports it.
bool supported(Isa isa);

Isa active_isa();

// Throws ValidationError when `isa` is not supported.
void select(Isa isa);

template <typename T>
const Table<T>& table(Isa isa);

template <typename T>
const Table<T>& active() {
  return table<T>(active_isa());
}

// RAII override used by tests and benchmarks.
class ScopedIsa {
 public:
  explicit ScopedIsa(Isa isa) : previous_(active_isa()) { select(isa); }
  ~ScopedIsa() { select(previous_); }
  ScopedIsa(const ScopedIsa&) = delete;
  ScopedIsa& operator=(const ScopedIsa&) = delete;

 private:
  Isa previous_;
};

}  // namespace vmamba::kernels
