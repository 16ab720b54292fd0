#include <atomic>
#include <cstdlib>
#include <string>

#include "tables.hpp"
#include "vmamba/error.hpp"

namespace vmamba::kernels {
namespace {

bool cpu_has_avx2() {
#if defined(VMAMBA_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Isa detect() {
  if (const char* env = std::getenv("VMAMBA_ISA")) {
    const std::string requested(env);
    if (requested == "scalar") return Isa::scalar;
    if (requested == "avx2" && cpu_has_avx2()) return Isa::avx2;
  }
  return cpu_has_avx2() ? Isa::avx2 : Isa::scalar;
}

std::atomic<Isa>& current() {
  static std::atomic<Isa> isa{detect()};
  return isa;
}

}  // namespace

std::string_view to_string(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return "scalar";
    case Isa::avx2:
      return "avx2";
  }
  return "unknown";
}

bool supported(Isa isa) { return isa == Isa::scalar || cpu_has_avx2(); }

Isa active_isa() { return current().load(std::memory_order_relaxed); }

void select(Isa isa) {
  if (!supported(isa))
    throw ValidationError("kernel ISA '" + std::string(to_string(isa)) + "' is not supported on this CPU");
  current().store(isa, std::memory_order_relaxed);
}

template <typename T>
const Table<T>& table(Isa isa) {
#if defined(VMAMBA_HAVE_AVX2)
  if (isa == Isa::avx2 && supported(isa)) return detail::avx2_table<T>();
#endif
  (void)isa;
  return detail::scalar_table<T>();
}

template const Table<float>& table<float>(Isa);
template const Table<double>& table<double>(Isa);

}  // namespace vmamba::kernels
