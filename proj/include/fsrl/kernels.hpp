#pragma once

#include <cstdint>
#include <span>

namespace fsrl::kern {

// Data-parallel numeric kernels behind the tensor ops. Two implementations
// share one contract: the OpenMP build parallelizes over independent output
// rows/blocks and the serial reference uses plain loops, with identical
// per-element accumulation order. Results are bit-identical between modes
// and independent of the thread count. Reductions use a fixed block size so
// the summation tree does not depend on scheduling.
enum class Mode { serial, parallel };

Mode mode();
void set_mode(Mode m);

inline constexpr int64_t kSumBlock = 1024;

// c = a[m,k] * b[k,n]
void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
// c += a[m,k] * b[k,n]
void matmul_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
// c[m,n] += a[m,k] * b[n,k]^T      (second operand transposed)
void matmul_nt_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
// c[k,n] += a[m,k]^T * b[m,n]      (first operand transposed)
void matmul_tn_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);

// Blocked deterministic sum; same blocking in both modes.
double sum(const double* x, int64_t n);

// y[i] += alpha * x[i]
void axpy(double alpha, const double* x, double* y, int64_t n);

void relu(const double* x, double* y, int64_t n);
void exp(const double* x, double* y, int64_t n);
void sigmoid(const double* x, double* y, int64_t n);

// Row-wise softmax / log-softmax over the last dimension of x[m,n].
void softmax_rows(const double* x, double* y, int64_t m, int64_t n);
void log_softmax_rows(const double* x, double* y, int64_t m, int64_t n);

// Row-wise layer norm with learned gain/bias; mean and reciprocal stddev are
// written out for the backward pass.
void layernorm_rows(const double* x, const double* gamma, const double* beta, double eps,
                    double* y, double* mean, double* rstd, int64_t m, int64_t n);

}  // namespace fsrl::kern
