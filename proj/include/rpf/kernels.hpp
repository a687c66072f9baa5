// Double-precision kernels for the inference engine's inner loops.
//
// Every kernel has a scalar reference implementation and, on x86-64, an
// AVX2/FMA variant. The active implementation is chosen once at startup
// from CPUID and can be overridden with the RPF_KERNELS environment
// variable ("scalar" or "avx2"). Both tables are exported so the scalar
// and SIMD paths can be equivalence-tested against each other.

#pragma once

#include <cstddef>
#include <string>

namespace rpf::kern {

struct Ops {
  const char* name;

  // sum_i a[i]*b[i]
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y[i] += alpha * x[i]
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // x[i] *= alpha
  void (*scal)(double alpha, double* x, std::size_t n);
  // y[r] = dot(w[r*cols .. r*cols+cols), x) for r in [0, rows)
  void (*matvec)(const double* w, const double* x, double* y,
                 std::size_t rows, std::size_t cols);
  double (*reduce_max)(const double* x, std::size_t n);
  double (*reduce_sum)(const double* x, std::size_t n);
  // sum_i x[i]^2
  double (*sumsq)(const double* x, std::size_t n);
};

const Ops& scalar_ops();

// Null when the binary or the CPU lacks AVX2+FMA support.
const Ops* avx2_ops();

// Active table after dispatch. Stable for the lifetime of the process.
const Ops& active_ops();

inline double dot(const double* a, const double* b, std::size_t n) {
  return active_ops().dot(a, b, n);
}
inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  active_ops().axpy(alpha, x, y, n);
}
inline void scal(double alpha, double* x, std::size_t n) {
  active_ops().scal(alpha, x, n);
}
inline void matvec(const double* w, const double* x, double* y,
                   std::size_t rows, std::size_t cols) {
  active_ops().matvec(w, x, y, rows, cols);
}
inline double reduce_max(const double* x, std::size_t n) {
  return active_ops().reduce_max(x, n);
}
inline double reduce_sum(const double* x, std::size_t n) {
  return active_ops().reduce_sum(x, n);
}
inline double sumsq(const double* x, std::size_t n) {
  return active_ops().sumsq(x, n);
}

// exp() stays scalar in every variant so the tables differ only in
// reduction order; softmax is composed from the primitives above.
void softmax_inplace(double* x, std::size_t n);

}  // namespace rpf::kern
