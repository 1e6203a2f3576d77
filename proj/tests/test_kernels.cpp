#include <doctest.h>

#include <cmath>
#include <random>

#include "dael/kernels.hpp"
#include "dael/kernels_serial.hpp"

using namespace dael::kernels;

namespace {

template <typename T>
std::vector<T> random_vec(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return v;
}

template <typename T>
double max_rel_diff(const std::vector<T>& a, const std::vector<T>& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(double(a[i]) - double(b[i]));
    worst = std::max(worst, d / std::max(1.0, std::abs(double(b[i]))));
  }
  return worst;
}

}  // namespace

TEST_CASE_TEMPLATE("gemm variants agree with the reference", T, float, double) {
  const double tol = sizeof(T) == 4 ? 1e-5 : 1e-12;
  std::mt19937_64 rng(1);
  for (const auto [M, N, K] : {std::array<std::size_t, 3>{1, 1, 1}, {5, 7, 3}, {4, 32, 9},
                               {37, 130, 17}, {64, 64, 300}}) {
    const auto A = random_vec<T>(M * K, rng), B = random_vec<T>(K * N, rng);
    const auto C0 = random_vec<T>(M * N, rng);
    auto fast = C0, ref = C0;
    gemm_acc(M, N, K, A.data(), B.data(), fast.data());
    serial::gemm_acc(M, N, K, A.data(), B.data(), ref.data());
    CHECK(max_rel_diff(fast, ref) < tol);

    const auto At = random_vec<T>(K * M, rng);
    fast = C0, ref = C0;
    gemm_at_b_acc(M, N, K, At.data(), B.data(), fast.data());
    serial::gemm_at_b_acc(M, N, K, At.data(), B.data(), ref.data());
    CHECK(max_rel_diff(fast, ref) < tol);

    const auto Bt = random_vec<T>(N * K, rng);
    fast = C0, ref = C0;
    gemm_a_bt_acc(M, N, K, A.data(), Bt.data(), fast.data());
    serial::gemm_a_bt_acc(M, N, K, A.data(), Bt.data(), ref.data());
    CHECK(max_rel_diff(fast, ref) < tol);
  }
}

TEST_CASE_TEMPLATE("convolution agrees with the direct reference", T, float, double) {
  const double tol = sizeof(T) == 4 ? 1e-4 : 1e-12;
  std::mt19937_64 rng(2);
  for (const ConvGeometry g : {ConvGeometry{2, 3, 8, 8, 4, 3, 1, 1}, ConvGeometry{3, 2, 7, 9, 5, 3, 2, 0},
                               ConvGeometry{1, 1, 5, 5, 1, 1, 1, 0}, ConvGeometry{2, 4, 6, 6, 3, 3, 2, 1}}) {
    const auto Ho = g.out_height(), Wo = g.out_width();
    const auto x = random_vec<T>(g.batch * g.in_channels * g.height * g.width, rng);
    const auto w = random_vec<T>(g.out_channels * g.in_channels * g.kernel * g.kernel, rng);
    const auto b = random_vec<T>(g.out_channels, rng);
    std::vector<T> y(g.batch * g.out_channels * Ho * Wo), y_ref(y.size());
    dael::kernels::conv2d_forward(g, x.data(), w.data(), b.data(), y.data());
    serial::conv2d_forward(g, x.data(), w.data(), b.data(), y_ref.data());
    CHECK(max_rel_diff(y, y_ref) < tol);

    const auto dy = random_vec<T>(y.size(), rng);
    std::vector<T> dx(x.size()), dw(w.size()), db(b.size());
    std::vector<T> dx_ref(x.size()), dw_ref(w.size()), db_ref(b.size());
    dael::kernels::conv2d_backward(g, x.data(), w.data(), dy.data(), dx.data(), dw.data(), db.data());
    serial::conv2d_backward(g, x.data(), w.data(), dy.data(), dx_ref.data(), dw_ref.data(),
                            db_ref.data());
    CHECK(max_rel_diff(dx, dx_ref) < tol);
    CHECK(max_rel_diff(dw, dw_ref) < tol);
    CHECK(max_rel_diff(db, db_ref) < tol);
  }
}

TEST_CASE("maxpool agrees with the reference, ties included") {
  std::mt19937_64 rng(3);
  auto x = random_vec<float>(3 * 6 * 8, rng);
  for (std::size_t i = 0; i < x.size(); i += 5) x[i] = 0.5f;  // plant ties
  std::vector<float> y(3 * 3 * 4), y_ref(y.size());
  std::vector<std::size_t> am(y.size()), am_ref(y.size());
  maxpool2x2_forward<float>(3, 6, 8, x.data(), y.data(), am.data());
  serial::maxpool2x2_forward<float>(3, 6, 8, x.data(), y_ref.data(), am_ref.data());
  CHECK(y == y_ref);
  CHECK(am == am_ref);

  std::vector<float> dx(x.size(), 0.0f);
  const std::vector<float> dy(y.size(), 1.0f);
  maxpool2x2_backward<float>(y.size(), am.data(), dy.data(), dx.data());
  float total = 0;
  for (const float v : dx) total += v;
  CHECK(total == static_cast<float>(y.size()));
}

TEST_CASE("parallel kernels are bitwise reproducible") {
  std::mt19937_64 rng(4);
  const ConvGeometry g{8, 8, 16, 16, 16, 3, 1, 1};
  const auto x = random_vec<float>(g.batch * g.in_channels * g.height * g.width, rng);
  const auto w = random_vec<float>(g.out_channels * g.in_channels * 9, rng);
  std::vector<float> y1(g.batch * g.out_channels * 256), y2(y1.size());
  dael::kernels::conv2d_forward<float>(g, x.data(), w.data(), nullptr, y1.data());
  dael::kernels::conv2d_forward<float>(g, x.data(), w.data(), nullptr, y2.data());
  CHECK(y1 == y2);
}
