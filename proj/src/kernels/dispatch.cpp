#include <cstdlib>
#include <cstring>

#include "dselect/kernels.hpp"

namespace dselect::kernels {

#if defined(DSELECT_HAVE_AVX2)
const KernelTable& avx2_table_unchecked();
#endif

const KernelTable* avx2_table() {
#if defined(DSELECT_HAVE_AVX2)
  static const bool supported = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  return supported ? &avx2_table_unchecked() : nullptr;
#else
  return nullptr;
#endif
}

const KernelTable& active() {
  static const KernelTable& table = [&]() -> const KernelTable& {
    const char* forced = std::getenv("DSELECT_KERNELS");
    if (forced != nullptr && std::strcmp(forced, "scalar") == 0) return scalar_table();
    if (const KernelTable* fast = avx2_table()) return *fast;
    return scalar_table();
  }();
  return table;
}

}  // namespace dselect::kernels
