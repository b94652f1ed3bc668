#include "dp/tensor.hpp"

#include <cmath>
#include <cstdlib>
#include <sstream>

namespace dp {

int64_t shape_product(const std::vector<int64_t>& shape) {
  int64_t p = 1;
  for (int64_t d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape");
    p *= d;
  }
  return p;
}

Tensor Tensor::scalar(double v) {
  Tensor t;
  t.data_[0] = v;
  return t;
}

Tensor Tensor::zeros(std::vector<int64_t> shape) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_.assign(static_cast<size_t>(shape_product(t.shape_)), 0.0);
  return t;
}

Tensor Tensor::full(std::vector<int64_t> shape, double v) {
  Tensor t = zeros(std::move(shape));
  t.fill(v);
  return t;
}

Tensor Tensor::from(std::vector<int64_t> shape, std::vector<double> data) {
  if (shape_product(shape) != static_cast<int64_t>(data.size()))
    throw ShapeError("data length does not match shape");
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(data);
  return t;
}

Tensor Tensor::row(std::vector<double> data) {
  int64_t n = static_cast<int64_t>(data.size());
  return from({1, n}, std::move(data));
}

Tensor Tensor::column(std::vector<double> data) {
  int64_t n = static_cast<int64_t>(data.size());
  return from({n, 1}, std::move(data));
}

int64_t Tensor::rows() const {
  if (shape_.size() > 2) throw ShapeError("rank > 2 tensor has no 2-d view");
  if (shape_.size() == 2) return shape_[0];
  return 1;
}

int64_t Tensor::cols() const {
  if (shape_.size() > 2) throw ShapeError("rank > 2 tensor has no 2-d view");
  if (shape_.size() == 2) return shape_[1];
  if (shape_.size() == 1) return shape_[0];
  return 1;
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of size " + std::to_string(size()));
  return data_[0];
}

void Tensor::fill(double v) {
  for (double& x : data_) x = v;
}

bool Tensor::all_finite() const {
  for (double x : data_)
    if (!std::isfinite(x)) return false;
  return true;
}

Tensor Tensor::reshaped(std::vector<int64_t> shape) const {
  if (shape_product(shape) != size())
    throw ShapeError("reshape size mismatch: " + shape_str());
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
  os << "]";
  return os.str();
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && a.vec() == b.vec();
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("max_abs_diff size mismatch");
  double m = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace dp
