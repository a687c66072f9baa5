#pragma once

#include <cstddef>
#include <vector>

namespace rpf {

// Row-major matrix of doubles. Rows are the natural unit everywhere in the
// engine (token positions, weight output rows), so only row access is given.
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, 0.0) {}

  double* row(std::size_t r) { return a.data() + r * cols; }
  const double* row(std::size_t r) const { return a.data() + r * cols; }
  double& at(std::size_t r, std::size_t c) { return a[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return a[r * cols + c]; }

  bool operator==(const Mat& other) const = default;
};

}  // namespace rpf
