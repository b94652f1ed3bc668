#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dp/rng.hpp"
#include "dp/tape.hpp"

using namespace dp;

namespace {

// Random tensor with entries kept away from relu/abs kinks so the central
// difference oracle stays valid.
Tensor random_away_from_zero(Rng& rng, std::vector<int64_t> shape, double lo = 0.2,
                             double hi = 1.5) {
  Tensor t = rng.uniform_tensor(std::move(shape), lo, hi);
  for (int64_t i = 0; i < t.size(); ++i)
    if (rng.uniform() < 0.5) t[i] = -t[i];
  return t;
}

}  // namespace

TEST_CASE("elementwise op examples") {
  Tape t;
  Value x = t.input(Tensor::row({-1.0, 0.0, 2.0}));
  Value r = relu(x);
  CHECK(r.val()[0] == 0.0);
  CHECK(r.val()[1] == 0.0);
  CHECK(r.val()[2] == 2.0);

  Value s = sigmoid(t.input(Tensor::scalar(0.0)));
  CHECK(s.val().item() == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("matmul identity returns operand") {
  Rng rng(7);
  Tensor a = rng.normal_tensor({3, 3});
  Tensor eye = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  Tape t;
  Value out = matmul(t.constant(eye), t.input(a));
  CHECK(max_abs_diff(out.val(), a) == 0.0);
}

TEST_CASE("backward analytic examples") {
  {
    Tape t;
    Value x = t.input(Tensor::scalar(3.0));
    Value y = square(x);
    t.backward(y);
    CHECK(x.grad().item() == doctest::Approx(6.0).epsilon(1e-14));
  }
  {
    Tape t;
    Value x = t.input(Tensor::scalar(0.0));
    Value y = sigmoid(x);
    t.backward(y);
    CHECK(x.grad().item() == doctest::Approx(0.25).epsilon(1e-14));
  }
}

TEST_CASE("repeated subgraph references accumulate k-fold gradient") {
  Tape t;
  Value x = t.input(Tensor::scalar(2.0));
  Value y = square(x);
  Value s = y + y + y;  // same node referenced 3 times
  t.backward(s);
  CHECK(x.grad().item() == doctest::Approx(3.0 * 4.0).epsilon(1e-14));
}

TEST_CASE("unreachable parameters get zero gradient") {
  Tape t;
  Value x = t.input(Tensor::scalar(1.0));
  Value unused = t.input(Tensor::row({1.0, 2.0}));
  Value y = square(x);
  t.backward(y);
  CHECK(unused.grad()[0] == 0.0);
  CHECK(unused.grad()[1] == 0.0);
}

TEST_CASE("backward rejects non-scalar root") {
  Tape t;
  Value x = t.input(Tensor::row({1.0, 2.0}));
  CHECK_THROWS_AS(t.backward(x), ContractError);
}

TEST_CASE("shape and domain errors") {
  Tape t;
  Value a = t.input(Tensor::zeros({2, 3}));
  Value b = t.input(Tensor::zeros({4, 5}));
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
  CHECK_THROWS_AS(log(t.input(Tensor::scalar(-1.0))), DomainError);
  CHECK_THROWS_AS(log(t.input(Tensor::scalar(0.0))), DomainError);
  CHECK_THROWS_AS(sqrt(t.input(Tensor::scalar(-0.5))), DomainError);
  Value z = t.input(Tensor::scalar(0.0));
  Value one = t.input(Tensor::scalar(1.0));
  CHECK_THROWS_AS(div(one, z), NumericError);
}

TEST_CASE("softmax rows: nonnegative, sums to one") {
  Rng rng(11);
  Tape t;
  Value x = t.input(rng.uniform_tensor({16, 7}, -30.0, 30.0));
  Value y = softmax_rows(x);
  for (int64_t i = 0; i < 16; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < 7; ++j) {
      CHECK(y.val().at(i, j) >= 0.0);
      s += y.val().at(i, j);
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("layer_norm rows: mean ~0, variance ~1") {
  Rng rng(13);
  Tape t;
  Value x = t.input(rng.uniform_tensor({10, 32}, -4.0, 9.0));
  Value y = layer_norm_rows(x, 1e-5);
  for (int64_t i = 0; i < 10; ++i) {
    double m = 0.0, v = 0.0;
    for (int64_t j = 0; j < 32; ++j) m += y.val().at(i, j);
    m /= 32.0;
    for (int64_t j = 0; j < 32; ++j) {
      double d = y.val().at(i, j) - m;
      v += d * d;
    }
    v /= 32.0;
    CHECK(std::abs(m) < 1e-10);
    CHECK(std::abs(v - 1.0) < 1e-6);
  }
}

TEST_CASE("finite_diff_check examples") {
  // linear function: exact match
  Tensor x = Tensor::row({0.3, -1.2, 4.0});
  double err = finite_diff_check([](Tape&, Value v) { return sum(v); }, x);
  CHECK(err < 1e-9);

  // ||x||^2 at [1,2]: analytic [2,4]
  Tensor x2 = Tensor::row({1.0, 2.0});
  {
    Tape t;
    Value leaf = t.input(x2);
    Value y = sum(square(leaf));
    t.backward(y);
    CHECK(leaf.grad()[0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(leaf.grad()[1] == doctest::Approx(4.0).epsilon(1e-12));
  }
  err = finite_diff_check([](Tape&, Value v) { return sum(square(v)); }, x2);
  CHECK(err < 1e-8);
}

TEST_CASE("two-layer MLP gradient vs central differences at 10 random points") {
  Rng rng(42);
  const int64_t in = 3, hid = 8;
  Tensor w1 = rng.normal_tensor({in, hid});
  Tensor b1 = rng.normal_tensor({1, hid});
  Tensor w2 = rng.normal_tensor({hid, 1});
  Tensor xin = rng.normal_tensor({4, in});
  Tensor target = rng.normal_tensor({4, 1});

  // check gradient w.r.t. each parameter block, flattened into the leaf
  auto loss_of_w1 = [&](Tape& t, Value w) {
    Value h = dp::tanh(matmul(t.constant(xin), w) + t.constant(b1));
    Value out = matmul(h, t.constant(w2));
    return mean(square(out - t.constant(target)));
  };
  for (int rep = 0; rep < 10; ++rep) {
    Tensor w = rng.normal_tensor({in, hid});
    CHECK(finite_diff_check(loss_of_w1, w) < 1e-4);
  }
}

TEST_CASE("per-op gradients match central differences over many seeds") {
  // 100+ randomized instances spread across every differentiable op kind
  int checked = 0;
  for (uint64_t seed = 0; seed < 6; ++seed) {
    Rng rng(seed * 977 + 3);
    Tensor a = random_away_from_zero(rng, {4, 5});
    Tensor b = random_away_from_zero(rng, {4, 5});
    Tensor pos = rng.uniform_tensor({4, 5}, 0.3, 2.0);
    Tensor m1 = rng.normal_tensor({4, 3});
    Tensor m2 = rng.normal_tensor({3, 6});
    Tensor w = rng.normal_tensor({5, 4});
    Tensor mask = Tensor::zeros({5, 4});
    for (int64_t i = 0; i < mask.size(); ++i) mask[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
    Tensor cot = rng.normal_tensor({4, 5});  // random cotangent weights

    auto weighted = [&](Tape& t, Value y) { return sum(mul(y, t.constant(cot))); };

    std::vector<std::function<Value(Tape&, Value)>> cases = {
        [&](Tape& t, Value v) { return weighted(t, add(v, t.constant(b))); },
        [&](Tape& t, Value v) { return weighted(t, sub(v, t.constant(b))); },
        [&](Tape& t, Value v) { return weighted(t, mul(v, t.constant(b))); },
        [&](Tape& t, Value v) { return weighted(t, div(v, t.constant(pos))); },
        [&](Tape& t, Value v) { return weighted(t, relu(v)); },
        [&](Tape& t, Value v) { return weighted(t, sigmoid(v)); },
        [&](Tape& t, Value v) { return weighted(t, dp::tanh(v)); },
        [&](Tape& t, Value v) { return weighted(t, dp::exp(v)); },
        [&](Tape& t, Value v) { return weighted(t, dp::sin(v)); },
        [&](Tape& t, Value v) { return weighted(t, square(v)); },
        [&](Tape& t, Value v) { return weighted(t, softmax_rows(v)); },
        [&](Tape& t, Value v) { return weighted(t, log_softmax_rows(v)); },
        [&](Tape& t, Value v) { return weighted(t, layer_norm_rows(v)); },
        [&](Tape& t, Value v) { return sum(square(concat(v, t.constant(b), 1))); },
        [&](Tape& t, Value v) { return sum(square(slice(v, 1, 3, 0, 4))); },
        [&](Tape& t, Value v) {
          return weighted(t, broadcast_to(reshape(sum_axis(v, 1), {4, 1}), {4, 5}));
        },
        [&](Tape& t, Value v) { return weighted(t, mul(mean_axis(v, 0), t.constant(b))); },
        [&](Tape& t, Value v) { return sum(square(gather_rows(v, {0, 2, 2, 3}))); },
        [&](Tape& t, Value v) { return sum(l2_norm_rows(v)); },
        [&](Tape&, Value v) { return mean(v); },
    };
    for (auto& f : cases) {
      CHECK(finite_diff_check(f, a) < 1e-4);
      ++checked;
    }
    // positive-domain ops
    CHECK(finite_diff_check(
              [&](Tape& t, Value v) { return weighted(t, dp::log(v)); }, pos) < 1e-4);
    CHECK(finite_diff_check(
              [&](Tape& t, Value v) { return weighted(t, dp::sqrt(v)); }, pos) < 1e-4);
    // matmul and masked_matmul w.r.t. both operands
    CHECK(finite_diff_check(
              [&](Tape& t, Value v) { return sum(square(matmul(v, t.constant(m2)))); }, m1) <
          1e-4);
    CHECK(finite_diff_check(
              [&](Tape& t, Value v) { return sum(square(matmul(t.constant(m1), v))); },
              rng.normal_tensor({3, 6})) < 1e-4);
    CHECK(finite_diff_check(
              [&](Tape& t, Value v) {
                return sum(square(masked_matmul(v, t.constant(w), mask)));
              },
              a) < 1e-4);
    CHECK(finite_diff_check(
              [&](Tape& t, Value v) {
                return sum(square(masked_matmul(t.constant(a), v, mask)));
              },
              w) < 1e-4);
    checked += 6;
  }
  CHECK(checked >= 100);
}

TEST_CASE("rng determinism and stream independence") {
  Rng a(123);
  Rng b(123);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng root(5);
  Rng c1 = root.child("data");
  Rng c2 = root.child("init");
  CHECK(c1.next_u64() != c2.next_u64());

  // substream values do not depend on how much the parent was consumed
  Rng r1(9);
  Rng r2(9);
  r2.next_u64();
  CHECK(r1.child(3).next_u64() == r2.child(3).next_u64());
}

TEST_CASE("rng state round-trip") {
  Rng r(77);
  r.normal();
  auto st = r.state();
  std::vector<double> expect;
  for (int i = 0; i < 10; ++i) expect.push_back(r.normal());
  Rng r2(0);
  r2.restore(st);
  for (int i = 0; i < 10; ++i) CHECK(r2.normal() == expect[static_cast<size_t>(i)]);
}

TEST_CASE("rng moments sanity") {
  Rng r(2024);
  const int n = 200000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    double x = r.normal();
    s += x;
    s2 += x * x;
  }
  double mean = s / n;
  double var = s2 / n - mean * mean;
  CHECK(std::abs(mean) < 3.0 / std::sqrt(static_cast<double>(n)));
  CHECK(std::abs(var - 1.0) < 0.02);
}
