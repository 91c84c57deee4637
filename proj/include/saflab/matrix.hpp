#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace saflab {

/// Row-major float matrix; one sample per row.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, float fill = 0.0f) : rows(r), cols(c), data(r * c, fill) {}

  std::span<float> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  [[nodiscard]] std::span<const float> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  float& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  float operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

/// Rows of `m` selected by `indices`, in order.
inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> indices) {
  Matrix out(indices.size(), m.cols);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= m.rows) throw std::out_of_range("gather_rows: index out of range");
    const auto src = m.row(indices[k]);
    std::copy(src.begin(), src.end(), out.row(k).begin());
  }
  return out;
}

/// Adam with bias-corrected moment estimates over a flat parameter vector.
class Adam {
 public:
  struct Config {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam(std::size_t n_params, Config cfg) : cfg_(cfg), m_(n_params, 0.0), v_(n_params, 0.0) {}

  void step(std::span<float> params, std::span<const double> grads);
  [[nodiscard]] long steps() const { return t_; }

 private:
  Config cfg_;
  std::vector<double> m_;
  std::vector<double> v_;
  long t_ = 0;
};

}  // namespace saflab
