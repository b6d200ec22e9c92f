#include <immintrin.h>

#include <cstring>

#include "dselect/kernels.hpp"

namespace dselect::kernels {

namespace {

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d shuf = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, shuf));
}

double dot(std::size_t n, const double* x, const double* y) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
  }
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

double sum(std::size_t n, const double* x) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(x + i));
    acc1 = _mm256_add_pd(acc1, _mm256_loadu_pd(x + i + 4));
  }
  for (; i + 4 <= n; i += 4) acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(x + i));
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += x[i];
  return acc;
}

void axpy(std::size_t n, double alpha, const double* x, double* y) {
  const __m256d a = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(a, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,
          const double* b, double* c, bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(double) * m * n);
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      double* c_row = c + i * n;
      for (std::size_t p = 0; p < k; ++p) axpy(n, a[i * k + p], b + p * n, c_row);
    }
  } else if (!trans_a && trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* a_row = a + i * k;
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += dot(k, a_row, b + j * k);
    }
  } else {
    for (std::size_t p = 0; p < k; ++p) {
      const double* a_row = a + p * m;
      const double* b_row = b + p * n;
      for (std::size_t i = 0; i < m; ++i) axpy(n, a_row[i], b_row, c + i * n);
    }
  }
}

template <typename VecOp, typename ScalarOp>
inline void binary(std::size_t n, const double* x, const double* y, double* out, VecOp vop, ScalarOp sop) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, vop(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) out[i] = sop(x[i], y[i]);
}

void add(std::size_t n, const double* x, const double* y, double* out) {
  binary(n, x, y, out, [](__m256d a, __m256d b) { return _mm256_add_pd(a, b); },
         [](double a, double b) { return a + b; });
}

void sub(std::size_t n, const double* x, const double* y, double* out) {
  binary(n, x, y, out, [](__m256d a, __m256d b) { return _mm256_sub_pd(a, b); },
         [](double a, double b) { return a - b; });
}

void mul(std::size_t n, const double* x, const double* y, double* out) {
  binary(n, x, y, out, [](__m256d a, __m256d b) { return _mm256_mul_pd(a, b); },
         [](double a, double b) { return a * b; });
}

void mul_acc(std::size_t n, const double* x, const double* y, double* out) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i),
                                              _mm256_loadu_pd(out + i)));
  }
  for (; i < n; ++i) out[i] += x[i] * y[i];
}

void relu(std::size_t n, const double* x, double* out) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d v = _mm256_loadu_pd(x + i);
    // max_pd returns the second operand when comparing against NaN or -0.0;
    // an explicit mask keeps the scalar semantics (x > 0 ? x : 0).
    const __m256d keep = _mm256_cmp_pd(v, zero, _CMP_GT_OQ);
    _mm256_storeu_pd(out + i, _mm256_and_pd(v, keep));
  }
  for (; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward(std::size_t n, const double* x, const double* g, double* dx) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d keep = _mm256_cmp_pd(_mm256_loadu_pd(x + i), zero, _CMP_GT_OQ);
    const __m256d contrib = _mm256_and_pd(_mm256_loadu_pd(g + i), keep);
    _mm256_storeu_pd(dx + i, _mm256_add_pd(_mm256_loadu_pd(dx + i), contrib));
  }
  for (; i < n; ++i) {
    if (x[i] > 0.0) dx[i] += g[i];
  }
}

void smooth_step(std::size_t n, double gamma, const double* x, double* out) {
  const double half = 0.5 * gamma;
  const double c3 = -2.0 / (gamma * gamma * gamma);
  const double c1 = 1.5 / gamma;
  const __m256d v_lo = _mm256_set1_pd(-half);
  const __m256d v_hi = _mm256_set1_pd(half);
  const __m256d v_c3 = _mm256_set1_pd(c3);
  const __m256d v_c1 = _mm256_set1_pd(c1);
  const __m256d v_half = _mm256_set1_pd(0.5);
  const __m256d v_one = _mm256_set1_pd(1.0);
  const __m256d v_zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d t = _mm256_loadu_pd(x + i);
    const __m256d t2 = _mm256_mul_pd(t, t);
    __m256d s = _mm256_fmadd_pd(_mm256_fmadd_pd(v_c3, t2, v_c1), t, v_half);
    s = _mm256_blendv_pd(s, v_zero, _mm256_cmp_pd(t, v_lo, _CMP_LE_OQ));
    s = _mm256_blendv_pd(s, v_one, _mm256_cmp_pd(t, v_hi, _CMP_GE_OQ));
    _mm256_storeu_pd(out + i, s);
  }
  for (; i < n; ++i) {
    const double t = x[i];
    if (t <= -half) {
      out[i] = 0.0;
    } else if (t >= half) {
      out[i] = 1.0;
    } else {
      out[i] = (c3 * t * t + c1) * t + 0.5;
    }
  }
}

void smooth_step_backward(std::size_t n, double gamma, const double* x, const double* g, double* dx) {
  const double half = 0.5 * gamma;
  const double c2 = -6.0 / (gamma * gamma * gamma);
  const double c0 = 1.5 / gamma;
  const __m256d v_lo = _mm256_set1_pd(-half);
  const __m256d v_hi = _mm256_set1_pd(half);
  const __m256d v_c2 = _mm256_set1_pd(c2);
  const __m256d v_c0 = _mm256_set1_pd(c0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d t = _mm256_loadu_pd(x + i);
    const __m256d inside = _mm256_and_pd(_mm256_cmp_pd(t, v_lo, _CMP_GT_OQ),
                                         _mm256_cmp_pd(t, v_hi, _CMP_LT_OQ));
    const __m256d deriv = _mm256_fmadd_pd(v_c2, _mm256_mul_pd(t, t), v_c0);
    const __m256d contrib = _mm256_and_pd(_mm256_mul_pd(_mm256_loadu_pd(g + i), deriv), inside);
    _mm256_storeu_pd(dx + i, _mm256_add_pd(_mm256_loadu_pd(dx + i), contrib));
  }
  for (; i < n; ++i) {
    const double t = x[i];
    if (t > -half && t < half) dx[i] += g[i] * (c2 * t * t + c0);
  }
}

}  // namespace

const KernelTable& avx2_table_unchecked() {
  static const KernelTable table{"avx2", gemm, add, sub, mul, axpy, mul_acc, relu, relu_backward,
                                 smooth_step, smooth_step_backward, sum, dot};
  return table;
}

}  // namespace dselect::kernels
