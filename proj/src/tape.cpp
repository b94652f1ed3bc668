#include "dp/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

namespace dp {
namespace {

void gemm_nn(const double* a, const double* b, double* c, int64_t n, int64_t k, int64_t m,
             bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(double) * static_cast<size_t>(n * m));
  for (int64_t i = 0; i < n; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * m;
    for (int64_t l = 0; l < k; ++l) {
      double av = ai[l];
      if (av == 0.0) continue;
      const double* bl = b + l * m;
      for (int64_t j = 0; j < m; ++j) ci[j] += av * bl[j];
    }
  }
}

// c[n,m] (+)= a[n,k] * b[m,k]^T
void gemm_nt(const double* a, const double* b, double* c, int64_t n, int64_t k, int64_t m,
             bool accumulate) {
  for (int64_t i = 0; i < n; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * m;
    for (int64_t j = 0; j < m; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (int64_t l = 0; l < k; ++l) s += ai[l] * bj[l];
      ci[j] = accumulate ? ci[j] + s : s;
    }
  }
}

// c[n,m] (+)= a[k,n]^T * b[k,m]
void gemm_tn(const double* a, const double* b, double* c, int64_t n, int64_t k, int64_t m,
             bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(double) * static_cast<size_t>(n * m));
  for (int64_t l = 0; l < k; ++l) {
    const double* al = a + l * n;
    const double* bl = b + l * m;
    for (int64_t i = 0; i < n; ++i) {
      double av = al[i];
      if (av == 0.0) continue;
      double* ci = c + i * m;
      for (int64_t j = 0; j < m; ++j) ci[j] += av * bl[j];
    }
  }
}

void require_rank2(const Tensor& t, const char* what) {
  if (t.ndim() > 2) throw ShapeError(std::string(what) + ": rank > 2 not supported");
}

// Shape of a broadcasted elementwise result, preserving the higher rank.
std::vector<int64_t> broadcast_result_shape(const Tensor& a, const Tensor& b, const char* what) {
  require_rank2(a, what);
  require_rank2(b, what);
  int64_t ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
  if (ar != br && ar != 1 && br != 1)
    throw ShapeError(std::string(what) + ": incompatible rows " + a.shape_str() + " vs " +
                     b.shape_str());
  if (ac != bc && ac != 1 && bc != 1)
    throw ShapeError(std::string(what) + ": incompatible cols " + a.shape_str() + " vs " +
                     b.shape_str());
  int64_t r = std::max(ar, br), c = std::max(ac, bc);
  int nd = std::max(a.ndim(), b.ndim());
  if (nd == 2) return {r, c};
  if (nd == 1) return {c};
  return {};
}

template <typename F>
Tensor broadcast_apply(const Tensor& a, const Tensor& b, const char* what, F f) {
  Tensor out = Tensor::zeros(broadcast_result_shape(a, b, what));
  int64_t r = out.rows(), c = out.cols();
  int64_t ars = a.rows() == 1 ? 0 : a.cols();
  int64_t acs = a.cols() == 1 ? 0 : 1;
  int64_t brs = b.rows() == 1 ? 0 : b.cols();
  int64_t bcs = b.cols() == 1 ? 0 : 1;
  const double* ap = a.data();
  const double* bp = b.data();
  double* op = out.data();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) *op++ = f(ap[i * ars + j * acs], bp[i * brs + j * bcs]);
  return out;
}

// Sum g (shaped like the broadcast output) back down to `shape`.
Tensor reduce_to_shape(const Tensor& g, const std::vector<int64_t>& shape) {
  Tensor out = Tensor::zeros(shape);
  int64_t gr = g.rows(), gc = g.cols();
  int64_t orows = out.rows(), ocols = out.cols();
  int64_t ors = orows == 1 ? 0 : ocols;
  int64_t ocs = ocols == 1 ? 0 : 1;
  const double* gp = g.data();
  double* op = out.data();
  for (int64_t i = 0; i < gr; ++i)
    for (int64_t j = 0; j < gc; ++j) op[i * ors + j * ocs] += *gp++;
  return out;
}

void accumulate(Tensor& into, const Tensor& t, double scale = 1.0) {
  for (int64_t i = 0; i < into.size(); ++i) into[i] += scale * t[i];
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Const: return "const";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Matmul: return "matmul";
    case Op::MaskedMatmul: return "masked_matmul";
    case Op::SumAll: return "sum";
    case Op::MeanAll: return "mean";
    case Op::SumAxis: return "sum_axis";
    case Op::MeanAxis: return "mean_axis";
    case Op::Relu: return "relu";
    case Op::Sigmoid: return "sigmoid";
    case Op::Tanh: return "tanh";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Sin: return "sin";
    case Op::Square: return "square";
    case Op::Sqrt: return "sqrt";
    case Op::Softmax: return "softmax";
    case Op::LogSoftmax: return "log_softmax";
    case Op::LayerNorm: return "layer_norm";
    case Op::Concat: return "concat";
    case Op::Slice: return "slice";
    case Op::Broadcast: return "broadcast";
    case Op::Reshape: return "reshape";
    case Op::GatherRows: return "gather_rows";
    case Op::L2NormRows: return "l2_norm_rows";
  }
  return "?";
}

const Tensor& Value::val() const { return tape->node(id).value; }
const Tensor& Value::grad() const { return tape->node(id).grad; }

Value Tape::emplace(Node n) {
  if (!(n.op == Op::Leaf || n.op == Op::Const) && !n.value.all_finite())
    throw NumericError(std::string("non-finite result in op ") + op_name(n.op));
  nodes_.push_back(std::move(n));
  return Value{this, static_cast<int32_t>(nodes_.size() - 1)};
}

Value Tape::input(Tensor v) {
  Node n;
  n.op = Op::Leaf;
  n.value = std::move(v);
  return emplace(std::move(n));
}

Value Tape::constant(Tensor v) {
  Node n;
  n.op = Op::Const;
  n.value = std::move(v);
  return emplace(std::move(n));
}

namespace {

Tape* same_tape(Value a, Value b, const char* what) {
  if (a.tape == nullptr || a.tape != b.tape)
    throw ContractError(std::string(what) + ": values from different tapes");
  return a.tape;
}

Value binary(Op op, Value a, Value b, const char* what,
             const std::function<double(double, double)>& f) {
  Tape* t = same_tape(a, b, what);
  Tape::Node n;
  n.op = op;
  n.a = a.id;
  n.b = b.id;
  n.value = broadcast_apply(a.val(), b.val(), what, f);
  return t->emplace(std::move(n));
}

Value unary(Op op, Value x, const std::function<double(double)>& f) {
  Tape::Node n;
  n.op = op;
  n.a = x.id;
  n.value = x.val();
  for (int64_t i = 0; i < n.value.size(); ++i) n.value[i] = f(n.value[i]);
  return x.tape->emplace(std::move(n));
}

}  // namespace

Value add(Value a, Value b) {
  return binary(Op::Add, a, b, "add", [](double x, double y) { return x + y; });
}
Value sub(Value a, Value b) {
  return binary(Op::Sub, a, b, "sub", [](double x, double y) { return x - y; });
}
Value mul(Value a, Value b) {
  return binary(Op::Mul, a, b, "mul", [](double x, double y) { return x * y; });
}
Value div(Value a, Value b) {
  return binary(Op::Div, a, b, "div", [](double x, double y) { return x / y; });
}

Value matmul(Value a, Value b) {
  Tape* t = same_tape(a, b, "matmul");
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  require_rank2(av, "matmul");
  require_rank2(bv, "matmul");
  if (av.cols() != bv.rows())
    throw ShapeError("matmul: inner dims " + av.shape_str() + " @ " + bv.shape_str());
  Tape::Node n;
  n.op = Op::Matmul;
  n.a = a.id;
  n.b = b.id;
  n.value = Tensor::zeros({av.rows(), bv.cols()});
  gemm_nn(av.data(), bv.data(), n.value.data(), av.rows(), av.cols(), bv.cols(), false);
  return t->emplace(std::move(n));
}

Value masked_matmul(Value x, Value w, const Tensor& mask) {
  Tape* t = same_tape(x, w, "masked_matmul");
  const Tensor& xv = x.val();
  const Tensor& wv = w.val();
  if (!wv.same_shape(mask)) throw ShapeError("masked_matmul: mask shape != weight shape");
  if (xv.cols() != wv.rows())
    throw ShapeError("masked_matmul: inner dims " + xv.shape_str() + " @ " + wv.shape_str());
  Tensor wm = wv;
  for (int64_t i = 0; i < wm.size(); ++i) wm[i] *= mask[i];
  Tape::Node n;
  n.op = Op::MaskedMatmul;
  n.a = x.id;
  n.b = w.id;
  n.aux = mask;
  n.aux2 = wm;
  n.value = Tensor::zeros({xv.rows(), wv.cols()});
  gemm_nn(xv.data(), wm.data(), n.value.data(), xv.rows(), xv.cols(), wv.cols(), false);
  return t->emplace(std::move(n));
}

Value sum(Value x) {
  Tape::Node n;
  n.op = Op::SumAll;
  n.a = x.id;
  double s = 0.0;
  for (int64_t i = 0; i < x.val().size(); ++i) s += x.val()[i];
  n.value = Tensor::scalar(s);
  return x.tape->emplace(std::move(n));
}

Value mean(Value x) {
  if (x.val().size() == 0) throw ContractError("mean of empty tensor");
  Tape::Node n;
  n.op = Op::MeanAll;
  n.a = x.id;
  double s = 0.0;
  for (int64_t i = 0; i < x.val().size(); ++i) s += x.val()[i];
  n.value = Tensor::scalar(s / static_cast<double>(x.val().size()));
  return x.tape->emplace(std::move(n));
}

namespace {
Value axis_reduce(Op op, Value x, int axis, bool take_mean) {
  const Tensor& v = x.val();
  require_rank2(v, "axis reduce");
  if (axis != 0 && axis != 1) throw ContractError("reduce axis must be 0 or 1");
  int64_t r = v.rows(), c = v.cols();
  Tape::Node n;
  n.op = op;
  n.a = x.id;
  n.axis = axis;
  if (axis == 0) {
    n.value = Tensor::zeros({1, c});
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) n.value[j] += v.at(i, j);
    if (take_mean)
      for (int64_t j = 0; j < c; ++j) n.value[j] /= static_cast<double>(r);
  } else {
    n.value = Tensor::zeros({r, 1});
    for (int64_t i = 0; i < r; ++i) {
      double s = 0.0;
      for (int64_t j = 0; j < c; ++j) s += v.at(i, j);
      n.value[i] = take_mean ? s / static_cast<double>(c) : s;
    }
  }
  return x.tape->emplace(std::move(n));
}
}  // namespace

Value sum_axis(Value x, int axis) { return axis_reduce(Op::SumAxis, x, axis, false); }
Value mean_axis(Value x, int axis) { return axis_reduce(Op::MeanAxis, x, axis, true); }

Value relu(Value x) {
  return unary(Op::Relu, x, [](double v) { return v > 0.0 ? v : 0.0; });
}

Value sigmoid(Value x) {
  return unary(Op::Sigmoid, x, [](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    double e = std::exp(v);
    return e / (1.0 + e);
  });
}

Value tanh(Value x) {
  return unary(Op::Tanh, x, [](double v) { return std::tanh(v); });
}

Value exp(Value x) {
  return unary(Op::Exp, x, [](double v) { return std::exp(v); });
}

Value log(Value x) {
  for (int64_t i = 0; i < x.val().size(); ++i)
    if (x.val()[i] <= 0.0) throw DomainError("log of nonpositive value");
  return unary(Op::Log, x, [](double v) { return std::log(v); });
}

Value sin(Value x) {
  return unary(Op::Sin, x, [](double v) { return std::sin(v); });
}

Value square(Value x) {
  return unary(Op::Square, x, [](double v) { return v * v; });
}

Value sqrt(Value x) {
  for (int64_t i = 0; i < x.val().size(); ++i)
    if (x.val()[i] <= 0.0) throw DomainError("sqrt of nonpositive value");
  return unary(Op::Sqrt, x, [](double v) { return std::sqrt(v); });
}

namespace {
Value rowwise_softmax(Op op, Value x, bool log_form) {
  const Tensor& v = x.val();
  require_rank2(v, "softmax");
  int64_t r = v.rows(), c = v.cols();
  Tape::Node n;
  n.op = op;
  n.a = x.id;
  n.value = v.ndim() == 2 ? Tensor::zeros({r, c}) : Tensor::zeros(v.shape());
  for (int64_t i = 0; i < r; ++i) {
    double mx = v.at(i, 0);
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, v.at(i, j));
    double z = 0.0;
    for (int64_t j = 0; j < c; ++j) z += std::exp(v.at(i, j) - mx);
    double lz = std::log(z);
    for (int64_t j = 0; j < c; ++j) {
      double centered = v.at(i, j) - mx;
      n.value[i * c + j] = log_form ? centered - lz : std::exp(centered - lz);
    }
  }
  return x.tape->emplace(std::move(n));
}
}  // namespace

Value softmax_rows(Value x) { return rowwise_softmax(Op::Softmax, x, false); }
Value log_softmax_rows(Value x) { return rowwise_softmax(Op::LogSoftmax, x, true); }

Value layer_norm_rows(Value x, double eps) {
  const Tensor& v = x.val();
  require_rank2(v, "layer_norm");
  int64_t r = v.rows(), c = v.cols();
  Tape::Node n;
  n.op = Op::LayerNorm;
  n.a = x.id;
  n.eps = eps;
  n.value = v.ndim() == 2 ? Tensor::zeros({r, c}) : Tensor::zeros(v.shape());
  n.aux2 = Tensor::zeros({r, 1});  // 1 / sqrt(var + eps) per row
  for (int64_t i = 0; i < r; ++i) {
    double m = 0.0;
    for (int64_t j = 0; j < c; ++j) m += v.at(i, j);
    m /= static_cast<double>(c);
    double var = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      double d = v.at(i, j) - m;
      var += d * d;
    }
    var /= static_cast<double>(c);
    double inv = 1.0 / std::sqrt(var + eps);
    n.aux2[i] = inv;
    for (int64_t j = 0; j < c; ++j) n.value[i * c + j] = (v.at(i, j) - m) * inv;
  }
  n.aux = n.value;  // normalized activations, reused in backward
  return x.tape->emplace(std::move(n));
}

Value concat(Value a, Value b, int axis) {
  Tape* t = same_tape(a, b, "concat");
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  require_rank2(av, "concat");
  require_rank2(bv, "concat");
  if (axis != 0 && axis != 1) throw ContractError("concat axis must be 0 or 1");
  Tape::Node n;
  n.op = Op::Concat;
  n.a = a.id;
  n.b = b.id;
  n.axis = axis;
  if (axis == 0) {
    if (av.cols() != bv.cols())
      throw ShapeError("concat axis 0: col mismatch " + av.shape_str() + " vs " + bv.shape_str());
    n.value = Tensor::zeros({av.rows() + bv.rows(), av.cols()});
    std::copy(av.data(), av.data() + av.size(), n.value.data());
    std::copy(bv.data(), bv.data() + bv.size(), n.value.data() + av.size());
  } else {
    if (av.rows() != bv.rows())
      throw ShapeError("concat axis 1: row mismatch " + av.shape_str() + " vs " + bv.shape_str());
    int64_t r = av.rows(), ca = av.cols(), cb = bv.cols();
    n.value = Tensor::zeros({r, ca + cb});
    for (int64_t i = 0; i < r; ++i) {
      std::copy(av.data() + i * ca, av.data() + (i + 1) * ca, n.value.data() + i * (ca + cb));
      std::copy(bv.data() + i * cb, bv.data() + (i + 1) * cb, n.value.data() + i * (ca + cb) + ca);
    }
  }
  return t->emplace(std::move(n));
}

Value slice(Value x, int64_t r0, int64_t r1, int64_t c0, int64_t c1) {
  const Tensor& v = x.val();
  require_rank2(v, "slice");
  if (r0 < 0 || r0 >= r1 || r1 > v.rows() || c0 < 0 || c0 >= c1 || c1 > v.cols())
    throw ShapeError("slice bounds out of range for " + v.shape_str());
  Tape::Node n;
  n.op = Op::Slice;
  n.a = x.id;
  n.r0 = r0;
  n.r1 = r1;
  n.c0 = c0;
  n.c1 = c1;
  n.value = Tensor::zeros({r1 - r0, c1 - c0});
  for (int64_t i = r0; i < r1; ++i)
    for (int64_t j = c0; j < c1; ++j) n.value.at(i - r0, j - c0) = v.at(i, j);
  return x.tape->emplace(std::move(n));
}

Value broadcast_to(Value x, std::vector<int64_t> shape) {
  const Tensor& v = x.val();
  Tensor target = Tensor::zeros(shape);
  require_rank2(v, "broadcast");
  require_rank2(target, "broadcast");
  if ((v.rows() != target.rows() && v.rows() != 1) ||
      (v.cols() != target.cols() && v.cols() != 1))
    throw ShapeError("cannot broadcast " + v.shape_str() + " to " + target.shape_str());
  Tape::Node n;
  n.op = Op::Broadcast;
  n.a = x.id;
  n.target = shape;
  int64_t rs = v.rows() == 1 ? 0 : v.cols();
  int64_t cs = v.cols() == 1 ? 0 : 1;
  for (int64_t i = 0; i < target.rows(); ++i)
    for (int64_t j = 0; j < target.cols(); ++j)
      target[i * target.cols() + j] = v.data()[i * rs + j * cs];
  n.value = std::move(target);
  return x.tape->emplace(std::move(n));
}

Value reshape(Value x, std::vector<int64_t> shape) {
  Tape::Node n;
  n.op = Op::Reshape;
  n.a = x.id;
  n.value = x.val().reshaped(std::move(shape));
  return x.tape->emplace(std::move(n));
}

Value gather_rows(Value x, std::vector<int64_t> idx) {
  const Tensor& v = x.val();
  require_rank2(v, "gather_rows");
  int64_t rows = v.rows(), c = v.cols();
  for (int64_t i : idx)
    if (i < 0 || i >= rows) throw ContractError("gather_rows index out of range");
  Tape::Node n;
  n.op = Op::GatherRows;
  n.a = x.id;
  n.idx = std::move(idx);
  n.value = Tensor::zeros({static_cast<int64_t>(n.idx.size()), c});
  for (size_t i = 0; i < n.idx.size(); ++i)
    std::copy(v.data() + n.idx[i] * c, v.data() + (n.idx[i] + 1) * c,
              n.value.data() + static_cast<int64_t>(i) * c);
  return x.tape->emplace(std::move(n));
}

Value l2_norm_rows(Value x) {
  const Tensor& v = x.val();
  require_rank2(v, "l2_norm_rows");
  int64_t r = v.rows(), c = v.cols();
  Tape::Node n;
  n.op = Op::L2NormRows;
  n.a = x.id;
  n.value = Tensor::zeros({r, 1});
  for (int64_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < c; ++j) s += v.at(i, j) * v.at(i, j);
    n.value[i] = std::sqrt(s);
  }
  return x.tape->emplace(std::move(n));
}

namespace {
Value scalar_const(Tape* t, double v) { return t->constant(Tensor::scalar(v)); }
}  // namespace

Value operator+(Value a, double b) { return add(a, scalar_const(a.tape, b)); }
Value operator+(double a, Value b) { return add(scalar_const(b.tape, a), b); }
Value operator-(Value a, double b) { return sub(a, scalar_const(a.tape, b)); }
Value operator-(double a, Value b) { return sub(scalar_const(b.tape, a), b); }
Value operator*(Value a, double b) { return mul(a, scalar_const(a.tape, b)); }
Value operator*(double a, Value b) { return mul(scalar_const(b.tape, a), b); }
Value operator/(Value a, double b) { return div(a, scalar_const(a.tape, b)); }
Value operator/(double a, Value b) { return div(scalar_const(b.tape, a), b); }

void Tape::backward(Value root) {
  if (root.tape != this) throw ContractError("backward: root from another tape");
  if (root.val().size() != 1) throw ContractError("backward: root must be scalar-valued");
  for (Node& n : nodes_) {
    n.grad = Tensor::zeros(n.value.shape());
  }
  std::vector<uint8_t> touched(nodes_.size(), 0);
  node(root.id).grad.fill(1.0);
  touched[static_cast<size_t>(root.id)] = 1;

  for (int32_t i = root.id; i >= 0; --i) {
    if (!touched[static_cast<size_t>(i)]) continue;
    Node& n = nodes_[static_cast<size_t>(i)];
    const Tensor& g = n.grad;
    auto touch = [&](int32_t id) { touched[static_cast<size_t>(id)] = 1; };
    switch (n.op) {
      case Op::Leaf:
      case Op::Const:
        break;
      case Op::Add: {
        accumulate(node(n.a).grad, reduce_to_shape(g, node(n.a).value.shape()));
        accumulate(node(n.b).grad, reduce_to_shape(g, node(n.b).value.shape()));
        touch(n.a);
        touch(n.b);
        break;
      }
      case Op::Sub: {
        accumulate(node(n.a).grad, reduce_to_shape(g, node(n.a).value.shape()));
        accumulate(node(n.b).grad, reduce_to_shape(g, node(n.b).value.shape()), -1.0);
        touch(n.a);
        touch(n.b);
        break;
      }
      case Op::Mul: {
        Tensor ga = broadcast_apply(g, node(n.b).value, "mul'", [](double x, double y) { return x * y; });
        Tensor gb = broadcast_apply(g, node(n.a).value, "mul'", [](double x, double y) { return x * y; });
        accumulate(node(n.a).grad, reduce_to_shape(ga, node(n.a).value.shape()));
        accumulate(node(n.b).grad, reduce_to_shape(gb, node(n.b).value.shape()));
        touch(n.a);
        touch(n.b);
        break;
      }
      case Op::Div: {
        const Tensor& av = node(n.a).value;
        const Tensor& bv = node(n.b).value;
        Tensor ga = broadcast_apply(g, bv, "div'", [](double x, double y) { return x / y; });
        Tensor q = broadcast_apply(av, bv, "div'", [](double x, double y) { return x / (y * y); });
        Tensor gb = broadcast_apply(g, q, "div'", [](double x, double y) { return -x * y; });
        accumulate(node(n.a).grad, reduce_to_shape(ga, av.shape()));
        accumulate(node(n.b).grad, reduce_to_shape(gb, bv.shape()));
        touch(n.a);
        touch(n.b);
        break;
      }
      case Op::Matmul: {
        const Tensor& av = node(n.a).value;
        const Tensor& bv = node(n.b).value;
        gemm_nt(g.data(), bv.data(), node(n.a).grad.data(), av.rows(), bv.cols(), av.cols(), true);
        gemm_tn(av.data(), g.data(), node(n.b).grad.data(), av.cols(), av.rows(), bv.cols(), true);
        touch(n.a);
        touch(n.b);
        break;
      }
      case Op::MaskedMatmul: {
        const Tensor& xv = node(n.a).value;
        const Tensor& wm = n.aux2;
        gemm_nt(g.data(), wm.data(), node(n.a).grad.data(), xv.rows(), wm.cols(), xv.cols(), true);
        Tensor gw = Tensor::zeros(n.aux.shape());
        gemm_tn(xv.data(), g.data(), gw.data(), xv.cols(), xv.rows(), wm.cols(), false);
        for (int64_t k = 0; k < gw.size(); ++k) gw[k] *= n.aux[k];
        accumulate(node(n.b).grad, gw);
        touch(n.a);
        touch(n.b);
        break;
      }
      case Op::SumAll: {
        accumulate(node(n.a).grad, Tensor::full(node(n.a).value.shape(), g.item()));
        touch(n.a);
        break;
      }
      case Op::MeanAll: {
        double s = g.item() / static_cast<double>(node(n.a).value.size());
        accumulate(node(n.a).grad, Tensor::full(node(n.a).value.shape(), s));
        touch(n.a);
        break;
      }
      case Op::SumAxis:
      case Op::MeanAxis: {
        Tensor& ag = node(n.a).grad;
        int64_t r = node(n.a).value.rows(), c = node(n.a).value.cols();
        double scale = 1.0;
        if (n.op == Op::MeanAxis) scale = n.axis == 0 ? 1.0 / r : 1.0 / c;
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j) ag[i * c + j] += scale * (n.axis == 0 ? g[j] : g[i]);
        touch(n.a);
        break;
      }
      case Op::Relu: {
        const Tensor& xv = node(n.a).value;
        Tensor& ag = node(n.a).grad;
        for (int64_t k = 0; k < xv.size(); ++k)
          if (xv[k] > 0.0) ag[k] += g[k];
        touch(n.a);
        break;
      }
      case Op::Sigmoid: {
        Tensor& ag = node(n.a).grad;
        for (int64_t k = 0; k < g.size(); ++k) ag[k] += g[k] * n.value[k] * (1.0 - n.value[k]);
        touch(n.a);
        break;
      }
      case Op::Tanh: {
        Tensor& ag = node(n.a).grad;
        for (int64_t k = 0; k < g.size(); ++k) ag[k] += g[k] * (1.0 - n.value[k] * n.value[k]);
        touch(n.a);
        break;
      }
      case Op::Exp: {
        Tensor& ag = node(n.a).grad;
        for (int64_t k = 0; k < g.size(); ++k) ag[k] += g[k] * n.value[k];
        touch(n.a);
        break;
      }
      case Op::Log: {
        const Tensor& xv = node(n.a).value;
        Tensor& ag = node(n.a).grad;
        for (int64_t k = 0; k < g.size(); ++k) ag[k] += g[k] / xv[k];
        touch(n.a);
        break;
      }
      case Op::Sin: {
        const Tensor& xv = node(n.a).value;
        Tensor& ag = node(n.a).grad;
        for (int64_t k = 0; k < g.size(); ++k) ag[k] += g[k] * std::cos(xv[k]);
        touch(n.a);
        break;
      }
      case Op::Square: {
        const Tensor& xv = node(n.a).value;
        Tensor& ag = node(n.a).grad;
        for (int64_t k = 0; k < g.size(); ++k) ag[k] += g[k] * 2.0 * xv[k];
        touch(n.a);
        break;
      }
      case Op::Sqrt: {
        Tensor& ag = node(n.a).grad;
        for (int64_t k = 0; k < g.size(); ++k) ag[k] += g[k] * 0.5 / n.value[k];
        touch(n.a);
        break;
      }
      case Op::Softmax: {
        Tensor& ag = node(n.a).grad;
        int64_t r = n.value.rows(), c = n.value.cols();
        for (int64_t i = 0; i < r; ++i) {
          double dot = 0.0;
          for (int64_t j = 0; j < c; ++j) dot += g[i * c + j] * n.value[i * c + j];
          for (int64_t j = 0; j < c; ++j)
            ag[i * c + j] += n.value[i * c + j] * (g[i * c + j] - dot);
        }
        touch(n.a);
        break;
      }
      case Op::LogSoftmax: {
        Tensor& ag = node(n.a).grad;
        int64_t r = n.value.rows(), c = n.value.cols();
        for (int64_t i = 0; i < r; ++i) {
          double gs = 0.0;
          for (int64_t j = 0; j < c; ++j) gs += g[i * c + j];
          for (int64_t j = 0; j < c; ++j)
            ag[i * c + j] += g[i * c + j] - std::exp(n.value[i * c + j]) * gs;
        }
        touch(n.a);
        break;
      }
      case Op::LayerNorm: {
        Tensor& ag = node(n.a).grad;
        int64_t r = n.value.rows(), c = n.value.cols();
        for (int64_t i = 0; i < r; ++i) {
          double gmean = 0.0, gxmean = 0.0;
          for (int64_t j = 0; j < c; ++j) {
            gmean += g[i * c + j];
            gxmean += g[i * c + j] * n.aux[i * c + j];
          }
          gmean /= static_cast<double>(c);
          gxmean /= static_cast<double>(c);
          double inv = n.aux2[i];
          for (int64_t j = 0; j < c; ++j)
            ag[i * c + j] += inv * (g[i * c + j] - gmean - n.aux[i * c + j] * gxmean);
        }
        touch(n.a);
        break;
      }
      case Op::Concat: {
        const Tensor& av = node(n.a).value;
        const Tensor& bv = node(n.b).value;
        Tensor& ag = node(n.a).grad;
        Tensor& bg = node(n.b).grad;
        if (n.axis == 0) {
          for (int64_t k = 0; k < av.size(); ++k) ag[k] += g[k];
          for (int64_t k = 0; k < bv.size(); ++k) bg[k] += g[av.size() + k];
        } else {
          int64_t r = av.rows(), ca = av.cols(), cb = bv.cols();
          for (int64_t i = 0; i < r; ++i) {
            for (int64_t j = 0; j < ca; ++j) ag[i * ca + j] += g[i * (ca + cb) + j];
            for (int64_t j = 0; j < cb; ++j) bg[i * cb + j] += g[i * (ca + cb) + ca + j];
          }
        }
        touch(n.a);
        touch(n.b);
        break;
      }
      case Op::Slice: {
        Tensor& ag = node(n.a).grad;
        int64_t c = node(n.a).value.cols();
        for (int64_t i = n.r0; i < n.r1; ++i)
          for (int64_t j = n.c0; j < n.c1; ++j)
            ag[i * c + j] += g[(i - n.r0) * (n.c1 - n.c0) + (j - n.c0)];
        touch(n.a);
        break;
      }
      case Op::Broadcast: {
        accumulate(node(n.a).grad, reduce_to_shape(g, node(n.a).value.shape()));
        touch(n.a);
        break;
      }
      case Op::Reshape: {
        accumulate(node(n.a).grad, g.reshaped(node(n.a).value.shape()));
        touch(n.a);
        break;
      }
      case Op::GatherRows: {
        Tensor& ag = node(n.a).grad;
        int64_t c = node(n.a).value.cols();
        for (size_t k = 0; k < n.idx.size(); ++k)
          for (int64_t j = 0; j < c; ++j)
            ag[n.idx[k] * c + j] += g[static_cast<int64_t>(k) * c + j];
        touch(n.a);
        break;
      }
      case Op::L2NormRows: {
        const Tensor& xv = node(n.a).value;
        Tensor& ag = node(n.a).grad;
        int64_t r = xv.rows(), c = xv.cols();
        for (int64_t i = 0; i < r; ++i) {
          double norm = n.value[i];
          if (norm == 0.0) continue;  // subgradient 0 at the origin
          double gi = g[i];
          for (int64_t j = 0; j < c; ++j) ag[i * c + j] += gi * xv.at(i, j) / norm;
        }
        touch(n.a);
        break;
      }
    }
  }
}

double finite_diff_check(const std::function<Value(Tape&, Value)>& f, const Tensor& x,
                         double step) {
  Tensor analytic;
  {
    Tape tape;
    Value leaf = tape.input(x);
    Value root = f(tape, leaf);
    if (root.val().size() != 1) throw ContractError("finite_diff_check: f must be scalar-valued");
    if (!std::isfinite(root.val().item())) throw DomainError("finite_diff_check: non-finite f(x)");
    tape.backward(root);
    analytic = leaf.grad();
  }
  auto eval = [&](const Tensor& p) {
    Tape tape;
    Value leaf = tape.input(p);
    double v = f(tape, leaf).val().item();
    if (!std::isfinite(v)) throw DomainError("finite_diff_check: non-finite f at probe point");
    return v;
  };
  Tensor probe = x;
  double worst = 0.0;
  for (int64_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + step;
    double fp = eval(probe);
    probe[i] = x[i] - step;
    double fm = eval(probe);
    probe[i] = x[i];
    double numeric = (fp - fm) / (2.0 * step);
    double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace dp
