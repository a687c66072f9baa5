#include "rpf/kernels.hpp"

#include <cmath>

namespace rpf::kern {

namespace {

double dot_ref(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy_ref(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scal_ref(double alpha, double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

void matvec_ref(const double* w, const double* x, double* y,
                std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) y[r] = dot_ref(w + r * cols, x, cols);
}

double reduce_max_ref(const double* x, std::size_t n) {
  double m = x[0];
  for (std::size_t i = 1; i < n; ++i)
    if (x[i] > m) m = x[i];
  return m;
}

double reduce_sum_ref(const double* x, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i];
  return s;
}

double sumsq_ref(const double* x, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i] * x[i];
  return s;
}

}  // namespace

const Ops& scalar_ops() {
  static const Ops ops{"scalar",     dot_ref,        axpy_ref, scal_ref,
                       matvec_ref,   reduce_max_ref, reduce_sum_ref,
                       sumsq_ref};
  return ops;
}

void softmax_inplace(double* x, std::size_t n) {
  if (n == 0) return;
  const double m = reduce_max(x, n);
  for (std::size_t i = 0; i < n; ++i) x[i] = std::exp(x[i] - m);
  const double s = reduce_sum(x, n);
  scal(1.0 / s, x, n);
}

}  // namespace rpf::kern
