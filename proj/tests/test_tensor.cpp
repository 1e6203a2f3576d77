#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "dael/errors.hpp"
#include "dael/gradcheck.hpp"
#include "dael/tensor.hpp"

using namespace dael;
using T64 = Tensor<double>;

namespace {

std::vector<double> random_values(std::size_t n, std::mt19937_64& rng, double lo = -1.0,
                                  double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

T64 random_param(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  const auto n = numel(shape);
  return T64::parameter(std::move(shape), random_values(n, rng, lo, hi));
}

}  // namespace

TEST_CASE("forward examples") {
  const auto a = T64::constant({2, 2}, {1, 2, 3, 4});
  const auto eye = T64::constant({2, 2}, {1, 0, 0, 1});
  const auto m = matmul(a, eye);
  CHECK(std::vector<double>(m.values().begin(), m.values().end()) ==
        std::vector<double>{1, 2, 3, 4});

  const auto r = relu(T64::constant({3}, {-1.0, 0.0, 2.5}));
  CHECK(std::vector<double>(r.values().begin(), r.values().end()) ==
        std::vector<double>{0.0, 0.0, 2.5});

  const auto s = softmax_lastdim(T64::constant({1, 2}, {0, 0}));
  CHECK(s[0] == doctest::Approx(0.5));
  CHECK(s[1] == doctest::Approx(0.5));

  const auto q = sq_l2_rowwise(T64::constant({2, 2}, {1, 0, 0, -2}));
  CHECK(q.shape() == Shape{2});
  CHECK(q[0] == 1.0);
  CHECK(q[1] == 4.0);
}

TEST_CASE("softmax stays normalized for huge logits") {
  std::mt19937_64 rng(3);
  for (const double mag : {1.0, 100.0, 1e4}) {
    const auto z = Tensor<float>::constant({8, 7}, [&] {
      std::vector<float> v;
      for (const double x : random_values(56, rng, -mag, mag)) v.push_back(static_cast<float>(x));
      return v;
    }());
    const auto p = softmax_lastdim(z);
    for (std::size_t r = 0; r < 8; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 7; ++c) {
        CHECK(p[r * 7 + c] >= 0.0f);
        s += p[r * 7 + c];
      }
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("backward examples") {
  auto x = T64::parameter({}, {3.0});
  backward(mul(x, x));
  CHECK(x.grad()[0] == 6.0);

  auto v = T64::parameter({4}, {1, 2, 3, 4});
  backward(mean(v));
  for (const double g : v.grad()) CHECK(g == 0.25);
}

TEST_CASE("backward accumulates until zeroed") {
  auto x = T64::parameter({}, {2.0});
  backward(mul(x, x));
  backward(mul(x, x));
  CHECK(x.grad()[0] == 8.0);
  x.zero_grad();
  backward(mul(x, x));
  CHECK(x.grad()[0] == 4.0);
}

TEST_CASE("cross-entropy of softmax has gradient softmax minus one-hot") {
  std::mt19937_64 rng(11);
  auto z = random_param({1, 5}, rng, -2, 2);
  const auto y = T64::constant({1, 5}, {0, 0, 1, 0, 0});
  auto f = [&] { return scale(sum(mul(log(softmax_lastdim(z)), y)), -1.0); };
  backward(f());
  const auto p = softmax_lastdim(z);
  const auto g = z.grad();
  for (std::size_t c = 0; c < 5; ++c) CHECK(g[c] == doctest::Approx(p[c] - y[c]).epsilon(1e-12));
  z.zero_grad();
  CHECK(grad_check(f, {z}) < 1e-7);
}

TEST_CASE("stop_gradient") {
  auto a = T64::parameter({2}, {1, 0});
  auto b = T64::parameter({2}, {0, 1});
  const auto d = stop_gradient(a);
  CHECK(std::memcmp(d.values().data(), a.values().data(), 2 * sizeof(double)) == 0);
  backward(sum(sq_l2_rowwise(reshape(sub(d, b), {1, 2}))));
  for (const double g : a.grad()) CHECK(g == 0.0);
  CHECK(b.grad() == std::vector<double>{-2.0, 2.0});
  auto f = [&] { return sum(sq_l2_rowwise(reshape(sub(stop_gradient(a), b), {1, 2}))); };
  b.zero_grad();
  CHECK(grad_check(f, {b}) < 1e-9);
}

TEST_CASE("stop_gradient blocks a shared ancestor only along the detached edge") {
  std::mt19937_64 rng(5);
  auto w = random_param({3, 3}, rng);
  const auto x = T64::constant({2, 3}, random_values(6, rng));
  const auto h = matmul(x, w);
  backward(sum(mul(stop_gradient(h), h)));
  const auto g_mixed = w.grad();
  w.zero_grad();
  // d/dw sum(c * h) with c = h held constant.
  const auto c = T64::constant(h.shape(), std::vector<double>(h.values().begin(), h.values().end()));
  backward(sum(mul(c, matmul(x, w))));
  CHECK(g_mixed == w.grad());
}

TEST_CASE("grad_check oracle self-test on a quadratic") {
  std::mt19937_64 rng(1);
  auto x = random_param({10}, rng);
  CHECK(grad_check([&] { return sum(mul(x, x)); }, {x}) < 1e-9);
}

TEST_CASE("grad_check on a two-layer MLP with cross-entropy") {
  std::mt19937_64 rng(2);
  auto w1 = random_param({12, 16}, rng, -0.5, 0.5);
  auto b1 = random_param({16}, rng, -0.1, 0.1);
  auto w2 = random_param({16, 4}, rng, -0.5, 0.5);
  auto b2 = random_param({4}, rng, -0.1, 0.1);
  const auto x = T64::constant({6, 12}, random_values(72, rng));
  std::vector<double> y(24, 0.0);
  for (std::size_t r = 0; r < 6; ++r) y[r * 4 + r % 4] = 1.0;
  const auto yt = T64::constant({6, 4}, y);
  auto f = [&] {
    const auto h = relu(add(matmul(x, w1), b1));
    const auto p = softmax_lastdim(add(matmul(h, w2), b2));
    return scale(sum(mul(log(p), yt)), -1.0 / 6.0);
  };
  CHECK(grad_check(f, {w1, b1, w2, b2}) < 1e-5);
}

TEST_CASE("grad_check on conv, maxpool and a linear head") {
  std::mt19937_64 rng(4);
  auto w = random_param({4, 3, 3, 3}, rng, -0.5, 0.5);
  auto b = random_param({4}, rng, -0.1, 0.1);
  auto wl = random_param({4 * 4 * 4, 3}, rng, -0.3, 0.3);
  const auto x = T64::constant({2, 3, 8, 8}, random_values(2 * 3 * 64, rng, 0, 1));
  auto f = [&] {
    const auto h = maxpool2x2(relu(conv2d(x, w, b, 1, 1)));
    const auto p = softmax_lastdim(matmul(reshape(h, {2, 64}), wl));
    return mean(sq_l2_rowwise(p));
  };
  CHECK(grad_check(f, {w, b, wl}) < 1e-5);
}

TEST_CASE("every op matches finite differences") {
  std::mt19937_64 rng(7);
  auto a = random_param({3, 4}, rng);
  auto b = random_param({3, 4}, rng);
  auto r = random_param({4}, rng);
  auto m = random_param({4, 2}, rng);
  auto pos = random_param({3, 4}, rng, 0.2, 2.0);
  const double tol = 1e-5;

  CHECK(grad_check([&] { return sum(mul(add(a, b), a)); }, {a, b}) < tol);
  CHECK(grad_check([&] { return sum(mul(sub(a, b), b)); }, {a, b}) < tol);
  CHECK(grad_check([&] { return sum(mul(add(a, r), a)); }, {a, r}) < tol);
  CHECK(grad_check([&] { return sum(mul(sub(a, r), sub(a, r))); }, {a, r}) < tol);
  CHECK(grad_check([&] { return sum(scale(mul(a, a), 0.3)); }, {a}) < tol);
  CHECK(grad_check([&] { return sum(mul(matmul(a, m), matmul(b, m))); }, {a, b, m}) < tol);
  CHECK(grad_check([&] { return sum(mul(relu(a), b)); }, {a, b}) < tol);
  CHECK(grad_check([&] { return mean(mul(a, b)); }, {a, b}) < tol);
  CHECK(grad_check([&] { return sum(mul(log(pos), b)); }, {pos, b}) < tol);
  CHECK(grad_check([&] { return sum(mul(exp(a), b)); }, {a, b}) < tol);
  CHECK(grad_check([&] { return sum(mul(softmax_lastdim(a), b)); }, {a, b}) < tol);
  CHECK(grad_check([&] { return sum(mul(sq_l2_rowwise(a), sq_l2_rowwise(b))); }, {a, b}) < tol);
  CHECK(grad_check([&] { return sum(mul(slice_rows(a, 1, 3), slice_rows(b, 0, 2))); }, {a, b}) <
        tol);
  CHECK(grad_check([&] { return sum(mul(reshape(a, {12}), reshape(b, {12}))); }, {a, b}) < tol);

  auto img = random_param({2, 2, 6, 6}, rng);
  auto w = random_param({3, 2, 3, 3}, rng);
  auto bias = random_param({3}, rng);
  for (const std::size_t stride : {1u, 2u})
    for (const std::size_t pad : {0u, 1u}) {
      const auto probe = conv2d(img, w, bias, stride, pad);
      const auto weights = T64::constant(probe.shape(), random_values(probe.numel(), rng));
      CHECK(grad_check([&] { return sum(mul(conv2d(img, w, bias, stride, pad), weights)); },
                       {img, w, bias}) < tol);
    }
  const auto pool_w = T64::constant({2, 2, 3, 3}, random_values(36, rng));
  CHECK(grad_check([&] { return sum(mul(maxpool2x2(img), pool_w)); }, {img}) < tol);
}

TEST_CASE("backward is bitwise deterministic") {
  std::mt19937_64 rng(9);
  auto w = random_param({4, 3, 3, 3}, rng);
  const auto x = T64::constant({3, 3, 8, 8}, random_values(3 * 3 * 64, rng));
  auto run = [&] {
    w.zero_grad();
    backward(mean(sq_l2_rowwise(reshape(maxpool2x2(relu(conv2d(x, w, T64{}, 1, 1))), {3, 64}))));
    return w.grad();
  };
  CHECK(run() == run());
}

TEST_CASE("errors") {
  const auto a = T64::constant({2, 3}, std::vector<double>(6, 1.0));
  const auto b = T64::constant({3, 2}, std::vector<double>(6, 1.0));
  CHECK_THROWS_AS(add(a, b), DimensionError);
  CHECK_THROWS_AS(matmul(a, a), DimensionError);
  CHECK_THROWS_AS(softmax_lastdim(T64::constant({6}, std::vector<double>(6, 0.0))),
                  DimensionError);
  auto p = T64::parameter({2}, {1, 2});
  CHECK_THROWS_AS(backward(mul(p, p)), ContractError);
  CHECK_THROWS_AS(exp(Tensor<float>::constant({1}, {1000.0f})), NumericError);
  auto derived = add(p, p);
  CHECK_THROWS_AS(derived.mutable_values(), ContractError);
}

TEST_CASE("NoGradGuard records nothing") {
  auto p = T64::parameter({2}, {1, 2});
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    const auto y = mul(p, p);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(grad_enabled());
}

TEST_CASE("log clamps at 1e-12") {
  const auto y = log(T64::constant({2}, {0.0, 1.0}));
  CHECK(y[0] == doctest::Approx(std::log(1e-12)));
  CHECK(y[1] == 0.0);
}
