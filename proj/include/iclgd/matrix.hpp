#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace iclgd {

// Dense row-major matrix of doubles. A default-constructed Matrix is the
// empty 0x0 placeholder used for absent optional weights.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);
  static Matrix column(std::span<const double> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  Matrix col(std::size_t c) const;
  void set_col(std::size_t c, const Matrix& column);

  // Copies `src` into this matrix with its top-left corner at (r0, c0).
  void set_block(std::size_t r0, std::size_t c0, const Matrix& src);
  Matrix block(std::size_t r0, std::size_t c0, std::size_t rows, std::size_t cols) const;

  void fill(double v);
  bool all_finite() const;

  bool operator==(const Matrix&) const = default;

  std::string shape_string() const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Accumulation over the inner index always runs in ascending order.
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
Matrix subtract(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);

// Row-wise softmax with max subtraction.
Matrix softmax_rows(const Matrix& logits);

double max_abs_diff(const Matrix& a, const Matrix& b);
double max_abs(const Matrix& a);

// Throws std::invalid_argument when any entry is NaN or infinite.
void require_finite(const Matrix& m, const char* what);

}  // namespace iclgd
