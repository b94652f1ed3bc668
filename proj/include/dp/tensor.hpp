#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "dp/errors.hpp"

namespace dp {

// Dense row-major tensor of 64-bit floats. Rank 0 (scalar), 1 and 2 are the
// only ranks the op layer accepts; rank-1 tensors broadcast as row vectors.
class Tensor {
 public:
  Tensor() : shape_{}, data_(1, 0.0) {}  // scalar zero

  static Tensor scalar(double v);
  static Tensor zeros(std::vector<int64_t> shape);
  static Tensor full(std::vector<int64_t> shape, double v);
  static Tensor from(std::vector<int64_t> shape, std::vector<double> data);
  static Tensor row(std::vector<double> data);     // [1, n]
  static Tensor column(std::vector<double> data);  // [n, 1]

  const std::vector<int64_t>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }

  // 2-d view: scalars are 1x1, rank-1 is a single row.
  int64_t rows() const;
  int64_t cols() const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }
  double& at(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * cols() + c)]; }
  double at(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * cols() + c)]; }

  double item() const;  // value of a size-1 tensor; ContractError otherwise

  void fill(double v);
  bool all_finite() const;
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor reshaped(std::vector<int64_t> shape) const;

  std::string shape_str() const;

 private:
  std::vector<int64_t> shape_;
  std::vector<double> data_;
};

bool tensors_equal(const Tensor& a, const Tensor& b);  // exact, bitwise on values
double max_abs_diff(const Tensor& a, const Tensor& b);

int64_t shape_product(const std::vector<int64_t>& shape);

}  // namespace dp
