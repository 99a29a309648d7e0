#include "fsrl/kernels.hpp"

#include <atomic>

#include "kernels_impl.hpp"

namespace fsrl::kern {

namespace {
std::atomic<Mode> g_mode{Mode::parallel};
}

Mode mode() { return g_mode.load(std::memory_order_relaxed); }
void set_mode(Mode m) { g_mode.store(m, std::memory_order_relaxed); }

#define FSRL_DISPATCH(fn, ...)                              \
  do {                                                      \
    if (mode() == Mode::parallel) return omp::fn(__VA_ARGS__); \
    return ref::fn(__VA_ARGS__);                            \
  } while (0)

void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  FSRL_DISPATCH(matmul, a, b, c, m, k, n);
}
void matmul_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  FSRL_DISPATCH(matmul_acc, a, b, c, m, k, n);
}
void matmul_nt_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  FSRL_DISPATCH(matmul_nt_acc, a, b, c, m, k, n);
}
void matmul_tn_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  FSRL_DISPATCH(matmul_tn_acc, a, b, c, m, k, n);
}
double sum(const double* x, int64_t n) { FSRL_DISPATCH(sum, x, n); }
void axpy(double alpha, const double* x, double* y, int64_t n) {
  FSRL_DISPATCH(axpy, alpha, x, y, n);
}
void relu(const double* x, double* y, int64_t n) { FSRL_DISPATCH(relu, x, y, n); }
void exp(const double* x, double* y, int64_t n) { FSRL_DISPATCH(exp, x, y, n); }
void sigmoid(const double* x, double* y, int64_t n) { FSRL_DISPATCH(sigmoid, x, y, n); }
void softmax_rows(const double* x, double* y, int64_t m, int64_t n) {
  FSRL_DISPATCH(softmax_rows, x, y, m, n);
}
void log_softmax_rows(const double* x, double* y, int64_t m, int64_t n) {
  FSRL_DISPATCH(log_softmax_rows, x, y, m, n);
}
void layernorm_rows(const double* x, const double* gamma, const double* beta, double eps,
                    double* y, double* mean, double* rstd, int64_t m, int64_t n) {
  FSRL_DISPATCH(layernorm_rows, x, gamma, beta, eps, y, mean, rstd, m, n);
}

#undef FSRL_DISPATCH

}  // namespace fsrl::kern
