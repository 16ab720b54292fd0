#pragma once

#include "vmamba/kernels.hpp"

namespace vmamba::kernels::detail {

template <typename T>
const Table<T>& scalar_table();

// Only defined when the AVX2 translation unit is built.
template <typename T>
const Table<T>& avx2_table();

}  // namespace vmamba::kernels::detail
