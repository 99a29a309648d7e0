// OpenMP kernels. Parallelism is over independent output rows (or fixed
// reduction blocks); per-element accumulation order matches the serial
// reference exactly, so results are bit-identical in both modes and for any
// thread count. Small problems skip the parallel region via the if clause.

#include <algorithm>
#include <cmath>
#include <vector>

#include "kernels_impl.hpp"

namespace fsrl::kern::omp {

namespace {
constexpr int64_t kParThreshold = 16 * 1024;  // flops-ish below which forking costs more
}

void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static) if (m > 1 && m * k * n >= kParThreshold)
  for (int64_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    std::fill(ci, ci + n, 0.0);
    for (int64_t l = 0; l < k; ++l) {
      const double ail = a[i * k + l];
      const double* bl = b + l * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += ail * bl[j];
    }
  }
}

void matmul_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static) if (m > 1 && m * k * n >= kParThreshold)
  for (int64_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (int64_t l = 0; l < k; ++l) {
      const double ail = a[i * k + l];
      const double* bl = b + l * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += ail * bl[j];
    }
  }
}

void matmul_nt_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static) if (m > 1 && m * k * n >= kParThreshold)
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (int64_t l = 0; l < k; ++l) acc += ai[l] * bj[l];
      ci[j] += acc;
    }
  }
}

void matmul_tn_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static) if (k > 1 && m * k * n >= kParThreshold)
  for (int64_t i = 0; i < k; ++i) {
    double* ci = c + i * n;
    for (int64_t l = 0; l < m; ++l) {
      const double ali = a[l * k + i];
      const double* bl = b + l * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += ali * bl[j];
    }
  }
}

double sum(const double* x, int64_t n) {
  const int64_t nb = (n + kSumBlock - 1) / kSumBlock;
  if (nb <= 1) {
    double part = 0.0;
    for (int64_t i = 0; i < n; ++i) part += x[i];
    return part;
  }
  std::vector<double> parts(static_cast<size_t>(nb));
#pragma omp parallel for schedule(static) if (nb > 2)
  for (int64_t b = 0; b < nb; ++b) {
    const int64_t lo = b * kSumBlock;
    const int64_t hi = std::min(n, lo + kSumBlock);
    double part = 0.0;
    for (int64_t i = lo; i < hi; ++i) part += x[i];
    parts[static_cast<size_t>(b)] = part;
  }
  double total = 0.0;
  for (int64_t b = 0; b < nb; ++b) total += parts[static_cast<size_t>(b)];
  return total;
}

void axpy(double alpha, const double* x, double* y, int64_t n) {
#pragma omp parallel for schedule(static) if (n >= kParThreshold)
  for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void relu(const double* x, double* y, int64_t n) {
#pragma omp parallel for schedule(static) if (n >= kParThreshold)
  for (int64_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void exp(const double* x, double* y, int64_t n) {
#pragma omp parallel for schedule(static) if (n >= kParThreshold / 8)
  for (int64_t i = 0; i < n; ++i) y[i] = std::exp(x[i]);
}

void sigmoid(const double* x, double* y, int64_t n) {
#pragma omp parallel for schedule(static) if (n >= kParThreshold / 8)
  for (int64_t i = 0; i < n; ++i) y[i] = 1.0 / (1.0 + std::exp(-x[i]));
}

namespace {

inline void softmax_row(const double* x, double* y, int64_t n, bool log_form) {
  double mx = x[0];
  for (int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  double z = 0.0;
  for (int64_t j = 0; j < n; ++j) z += std::exp(x[j] - mx);
  if (log_form) {
    const double lz = std::log(z);
    for (int64_t j = 0; j < n; ++j) y[j] = x[j] - mx - lz;
  } else {
    const double inv = 1.0 / z;
    for (int64_t j = 0; j < n; ++j) y[j] = std::exp(x[j] - mx) * inv;
  }
}

inline void layernorm_row(const double* x, const double* gamma, const double* beta, double eps,
                          double* y, double* mean, double* rstd, int64_t n) {
  double mu = 0.0;
  for (int64_t j = 0; j < n; ++j) mu += x[j];
  mu /= static_cast<double>(n);
  double var = 0.0;
  for (int64_t j = 0; j < n; ++j) {
    const double d = x[j] - mu;
    var += d * d;
  }
  var /= static_cast<double>(n);
  const double r = 1.0 / std::sqrt(var + eps);
  *mean = mu;
  *rstd = r;
  for (int64_t j = 0; j < n; ++j) y[j] = (x[j] - mu) * r * gamma[j] + beta[j];
}

}  // namespace

void softmax_rows(const double* x, double* y, int64_t m, int64_t n) {
#pragma omp parallel for schedule(static) if (m > 1 && m * n >= kParThreshold / 8)
  for (int64_t i = 0; i < m; ++i) softmax_row(x + i * n, y + i * n, n, false);
}

void log_softmax_rows(const double* x, double* y, int64_t m, int64_t n) {
#pragma omp parallel for schedule(static) if (m > 1 && m * n >= kParThreshold / 8)
  for (int64_t i = 0; i < m; ++i) softmax_row(x + i * n, y + i * n, n, true);
}

void layernorm_rows(const double* x, const double* gamma, const double* beta, double eps,
                    double* y, double* mean, double* rstd, int64_t m, int64_t n) {
#pragma omp parallel for schedule(static) if (m > 1 && m * n >= kParThreshold / 8)
  for (int64_t i = 0; i < m; ++i)
    layernorm_row(x + i * n, gamma, beta, eps, y + i * n, mean + i, rstd + i, n);
}

}  // namespace fsrl::kern::omp
