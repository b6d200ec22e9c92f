#pragma once

// Data-parallel inner loops used by the differentiation engine. Every kernel
// has a portable scalar reference implementation; an AVX2/FMA variant is
// compiled on x86-64 and selected at runtime when the CPU supports it.
// Setting DSELECT_KERNELS=scalar in the environment forces the reference set.

#include <cstddef>

namespace dselect::kernels {

struct KernelTable {
  const char* name;

  // c = op(a) * op(b), or c += ... when accumulate. op(a) is m x k, op(b) is
  // k x n. trans_a and trans_b must not both be set.
  void (*gemm)(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
               const double* a, const double* b, double* c, bool accumulate);

  void (*add)(std::size_t n, const double* x, const double* y, double* out);
  void (*sub)(std::size_t n, const double* x, const double* y, double* out);
  void (*mul)(std::size_t n, const double* x, const double* y, double* out);
  // y += alpha * x
  void (*axpy)(std::size_t n, double alpha, const double* x, double* y);
  // out += x * y
  void (*mul_acc)(std::size_t n, const double* x, const double* y, double* out);

  void (*relu)(std::size_t n, const double* x, double* out);
  // dx += g where x > 0
  void (*relu_backward)(std::size_t n, const double* x, const double* g, double* dx);

  void (*smooth_step)(std::size_t n, double gamma, const double* x, double* out);
  // dx += g * S'(x)
  void (*smooth_step_backward)(std::size_t n, double gamma, const double* x, const double* g,
                               double* dx);

  double (*sum)(std::size_t n, const double* x);
  double (*dot)(std::size_t n, const double* x, const double* y);
};

const KernelTable& scalar_table();

// nullptr when the variant was not compiled in or the CPU lacks AVX2/FMA.
const KernelTable* avx2_table();

// The table chosen for this process. Fixed after the first call.
const KernelTable& active();

}  // namespace dselect::kernels
