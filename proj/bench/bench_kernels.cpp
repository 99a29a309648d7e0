// Wall-clock comparison of the serial reference kernels against the OpenMP
// kernels, plus a bit-exactness spot check. Build target: bench_kernels.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "fsrl/kernels.hpp"
#include "fsrl/rng.hpp"

namespace {

using Clock = std::chrono::steady_clock;
using fsrl::Rng;
namespace kern = fsrl::kern;

std::vector<double> random_vec(Rng& rng, int64_t n) {
  std::vector<double> v(static_cast<size_t>(n));
  for (double& x : v) x = rng.normal();
  return v;
}

template <typename Fn>
double time_best_of(int reps, Fn&& fn) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = Clock::now();
    fn();
    const double s = std::chrono::duration<double>(Clock::now() - t0).count();
    if (s < best) best = s;
  }
  return best;
}

void report(const char* name, double serial_s, double parallel_s, bool bit_equal) {
  std::printf("%-22s serial %6.2f ms   parallel %6.2f ms   speedup %5.2fx   %s\n", name,
              serial_s * 1e3, parallel_s * 1e3, serial_s / parallel_s,
              bit_equal ? "bit-exact" : "MISMATCH");
}

}  // namespace

int main() {
  Rng rng(7);
  const int reps = 5;

  {
    const int64_t m = 384, k = 384, n = 384;
    auto a = random_vec(rng, m * k), b = random_vec(rng, k * n);
    std::vector<double> c1(static_cast<size_t>(m * n)), c2(c1);
    kern::set_mode(kern::Mode::serial);
    const double ts = time_best_of(reps, [&] { kern::matmul(a.data(), b.data(), c1.data(), m, k, n); });
    kern::set_mode(kern::Mode::parallel);
    const double tp = time_best_of(reps, [&] { kern::matmul(a.data(), b.data(), c2.data(), m, k, n); });
    report("matmul 384^3", ts, tp,
           std::memcmp(c1.data(), c2.data(), c1.size() * sizeof(double)) == 0);
  }
  {
    const int64_t m = 4096, n = 512;
    auto x = random_vec(rng, m * n);
    std::vector<double> y1(static_cast<size_t>(m * n)), y2(y1);
    kern::set_mode(kern::Mode::serial);
    const double ts = time_best_of(reps, [&] { kern::softmax_rows(x.data(), y1.data(), m, n); });
    kern::set_mode(kern::Mode::parallel);
    const double tp = time_best_of(reps, [&] { kern::softmax_rows(x.data(), y2.data(), m, n); });
    report("softmax 4096x512", ts, tp,
           std::memcmp(y1.data(), y2.data(), y1.size() * sizeof(double)) == 0);
  }
  {
    const int64_t m = 4096, n = 512;
    auto x = random_vec(rng, m * n);
    auto g = random_vec(rng, n), b = random_vec(rng, n);
    std::vector<double> y1(static_cast<size_t>(m * n)), y2(y1);
    std::vector<double> mu(static_cast<size_t>(m)), rs(static_cast<size_t>(m));
    kern::set_mode(kern::Mode::serial);
    const double ts = time_best_of(reps, [&] {
      kern::layernorm_rows(x.data(), g.data(), b.data(), 1e-5, y1.data(), mu.data(), rs.data(), m, n);
    });
    kern::set_mode(kern::Mode::parallel);
    const double tp = time_best_of(reps, [&] {
      kern::layernorm_rows(x.data(), g.data(), b.data(), 1e-5, y2.data(), mu.data(), rs.data(), m, n);
    });
    report("layernorm 4096x512", ts, tp,
           std::memcmp(y1.data(), y2.data(), y1.size() * sizeof(double)) == 0);
  }
  {
    const int64_t n = 1 << 24;
    auto x = random_vec(rng, n);
    double s1 = 0, s2 = 0;
    kern::set_mode(kern::Mode::serial);
    const double ts = time_best_of(reps, [&] { s1 = kern::sum(x.data(), n); });
    kern::set_mode(kern::Mode::parallel);
    const double tp = time_best_of(reps, [&] { s2 = kern::sum(x.data(), n); });
    report("sum 16M", ts, tp, s1 == s2);
  }
  kern::set_mode(kern::Mode::parallel);
  return 0;
}
