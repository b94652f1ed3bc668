#pragma once
#include <cstdint>
#include <functional>
#include <vector>

#include "dp/tensor.hpp"

namespace dp {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Value {
  Tape* tape = nullptr;
  int32_t id = -1;

  const Tensor& val() const;
  const Tensor& grad() const;  // valid after Tape::backward
  const std::vector<int64_t>& shape() const { return val().shape(); }
  int64_t rows() const { return val().rows(); }
  int64_t cols() const { return val().cols(); }
};

enum class Op : uint8_t {
  Leaf, Const,
  Add, Sub, Mul, Div,
  Matmul, MaskedMatmul,
  SumAll, MeanAll, SumAxis, MeanAxis,
  Relu, Sigmoid, Tanh, Exp, Log, Sin, Square, Sqrt,
  Softmax, LogSoftmax, LayerNorm,
  Concat, Slice, Broadcast, Reshape,
  GatherRows, L2NormRows,
};

const char* op_name(Op op);

// Append-only computation graph. Creation order is a topological order, so
// backward is a single reverse sweep. One tape per loss evaluation; rebuild
// rather than reuse. Not thread-safe; tensors taken off a tape are.
class Tape {
 public:
  Value input(Tensor v);     // differentiable leaf
  Value constant(Tensor v);  // non-differentiable leaf

  // Seeds d(root)=1 and accumulates gradients for every node. Root must be
  // scalar-valued. Unreachable nodes end with zero gradient.
  void backward(Value root);

  size_t size() const { return nodes_.size(); }

  struct Node {
    Op op;
    int32_t a = -1, b = -1;
    Tensor value;
    Tensor grad;
    // op attributes
    int32_t axis = -1;
    int64_t r0 = 0, r1 = 0, c0 = 0, c1 = 0;  // slice bounds
    double eps = 0.0;                        // layer_norm epsilon
    Tensor aux, aux2;                        // mask / cached statistics
    std::vector<int64_t> idx;                // gather indices
    std::vector<int64_t> target;             // broadcast / reshape target
  };

  Node& node(int32_t id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int32_t id) const { return nodes_[static_cast<size_t>(id)]; }

  Value emplace(Node n);

 private:
  std::vector<Node> nodes_;
};

// Elementwise binary ops with numpy-style broadcasting (rank <= 2; rank-1
// aligns as a row vector).
Value add(Value a, Value b);
Value sub(Value a, Value b);
Value mul(Value a, Value b);
Value div(Value a, Value b);

Value matmul(Value a, Value b);
// x @ (w * mask); the mask is a fixed 0/1 tensor, not a graph input.
Value masked_matmul(Value x, Value w, const Tensor& mask);

Value sum(Value x);
Value mean(Value x);
Value sum_axis(Value x, int axis);   // keeps dims: axis 0 -> [1,c], axis 1 -> [r,1]
Value mean_axis(Value x, int axis);

Value relu(Value x);
Value sigmoid(Value x);
Value tanh(Value x);
Value exp(Value x);
Value log(Value x);
Value sin(Value x);
Value square(Value x);
Value sqrt(Value x);

Value softmax_rows(Value x);
Value log_softmax_rows(Value x);
Value layer_norm_rows(Value x, double eps = 1e-5);

Value concat(Value a, Value b, int axis);
Value slice(Value x, int64_t r0, int64_t r1, int64_t c0, int64_t c1);
Value broadcast_to(Value x, std::vector<int64_t> shape);
Value reshape(Value x, std::vector<int64_t> shape);
Value gather_rows(Value x, std::vector<int64_t> idx);
Value l2_norm_rows(Value x);  // [n,d] -> [n,1]

inline Value operator+(Value a, Value b) { return add(a, b); }
inline Value operator-(Value a, Value b) { return sub(a, b); }
inline Value operator*(Value a, Value b) { return mul(a, b); }
inline Value operator/(Value a, Value b) { return div(a, b); }
Value operator+(Value a, double b);
Value operator+(double a, Value b);
Value operator-(Value a, double b);
Value operator-(double a, Value b);
Value operator*(Value a, double b);
Value operator*(double a, Value b);
Value operator/(Value a, double b);
Value operator/(double a, Value b);
inline Value operator-(Value a) { return 0.0 - a; }

// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
// for a scalar-valued function built on a fresh tape from one leaf.
double finite_diff_check(const std::function<Value(Tape&, Value)>& f, const Tensor& x,
                         double step = 1e-5);

}  // namespace dp
