#pragma once

#include "fsrl/kernels.hpp"

// Internal: the two kernel backends the dispatcher selects between.
namespace fsrl::kern {

#define FSRL_KERNEL_DECLS                                                                       \
  void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);    \
  void matmul_acc(const double* a, const double* b, double* c, int64_t m, int64_t k,            \
                  int64_t n);                                                                   \
  void matmul_nt_acc(const double* a, const double* b, double* c, int64_t m, int64_t k,         \
                     int64_t n);                                                                \
  void matmul_tn_acc(const double* a, const double* b, double* c, int64_t m, int64_t k,         \
                     int64_t n);                                                                \
  double sum(const double* x, int64_t n);                                                       \
  void axpy(double alpha, const double* x, double* y, int64_t n);                               \
  void relu(const double* x, double* y, int64_t n);                                             \
  void exp(const double* x, double* y, int64_t n);                                              \
  void sigmoid(const double* x, double* y, int64_t n);                                          \
  void softmax_rows(const double* x, double* y, int64_t m, int64_t n);                          \
  void log_softmax_rows(const double* x, double* y, int64_t m, int64_t n);                      \
  void layernorm_rows(const double* x, const double* gamma, const double* beta, double eps,     \
                      double* y, double* mean, double* rstd, int64_t m, int64_t n);

namespace ref {
FSRL_KERNEL_DECLS
}
namespace omp {
FSRL_KERNEL_DECLS
}

#undef FSRL_KERNEL_DECLS

}  // namespace fsrl::kern
