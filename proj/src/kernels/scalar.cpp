#include <cstring>

#include "dselect/kernels.hpp"

namespace dselect::kernels {
namespace {

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,
          const double* b, double* c, bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(double) * m * n);
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      double* c_row = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double a_ip = a[i * k + p];
        const double* b_row = b + p * n;
        for (std::size_t j = 0; j < n; ++j) c_row[j] += a_ip * b_row[j];
      }
    }
  } else if (!trans_a && trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* a_row = a + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const double* b_row = b + j * k;
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += a_row[p] * b_row[p];
        c[i * n + j] += acc;
      }
    }
  } else {
    // a is stored k x m
    for (std::size_t p = 0; p < k; ++p) {
      const double* a_row = a + p * m;
      const double* b_row = b + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const double a_pi = a_row[i];
        double* c_row = c + i * n;
        for (std::size_t j = 0; j < n; ++j) c_row[j] += a_pi * b_row[j];
      }
    }
  }
}

void add(std::size_t n, const double* x, const double* y, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + y[i];
}

void sub(std::size_t n, const double* x, const double* y, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] - y[i];
}

void mul(std::size_t n, const double* x, const double* y, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * y[i];
}

void axpy(std::size_t n, double alpha, const double* x, double* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void mul_acc(std::size_t n, const double* x, const double* y, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] += x[i] * y[i];
}

void relu(std::size_t n, const double* x, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward(std::size_t n, const double* x, const double* g, double* dx) {
  for (std::size_t i = 0; i < n; ++i) {
    if (x[i] > 0.0) dx[i] += g[i];
  }
}

void smooth_step(std::size_t n, double gamma, const double* x, double* out) {
  const double half = 0.5 * gamma;
  const double c3 = -2.0 / (gamma * gamma * gamma);
  const double c1 = 1.5 / gamma;
  for (std::size_t i = 0; i < n; ++i) {
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
  for (std::size_t i = 0; i < n; ++i) {
    const double t = x[i];
    if (t > -half && t < half) dx[i] += g[i] * (c2 * t * t + c0);
  }
}

double sum(std::size_t n, const double* x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

double dot(std::size_t n, const double* x, const double* y) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable table{"scalar", gemm, add, sub, mul, axpy, mul_acc, relu, relu_backward,
                                 smooth_step, smooth_step_backward, sum, dot};
  return table;
}

}  // namespace dselect::kernels
