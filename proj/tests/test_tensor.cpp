#include <catch2/catch_amalgamated.hpp>

#include "dclstm/rng.hpp"
#include "dclstm/tensor.hpp"
#include "oracles.hpp"

using namespace dclstm;

TEST_CASE("zeros") {
  Tensor<float> z = Tensor<float>::zeros(Shape{2, 2});
  REQUIRE(z.numel() == 4);
  for (int64_t i = 0; i < 4; ++i) REQUIRE(z[i] == 0.0f);

  REQUIRE(Tensor<float>::zeros(Shape{1}).numel() == 1);
  REQUIRE(Tensor<float>::zeros(Shape{3, 1, 2}).numel() == 6);
}

TEST_CASE("shape validation") {
  REQUIRE_THROWS_AS(Shape{0}, std::invalid_argument);
  REQUIRE_THROWS_AS((Shape{2, -1}), std::invalid_argument);
  REQUIRE_THROWS_AS(Shape(std::vector<int64_t>{}), std::invalid_argument);
  // element count overflow
  REQUIRE_THROWS_AS((Shape{int64_t{1} << 32, int64_t{1} << 32}), std::invalid_argument);
}

TEST_CASE("row-major flat index round trip") {
  Rng rng(7);
  Shape s{3, 5, 2, 4};
  // stride of last axis is 1, flat index is sum of coord*stride
  REQUIRE(s.stride(3) == 1);
  REQUIRE(s.stride(0) == 5 * 2 * 4);
  for (int trial = 0; trial < 50; ++trial) {
    const int64_t flat = rng.uniform_int(0, s.numel() - 1);
    const auto c = s.coords(flat);
    int64_t manual = 0;
    for (int a = 0; a < s.rank(); ++a) manual += c[static_cast<size_t>(a)] * s.stride(a);
    REQUIRE(manual == flat);
    REQUIRE(s.flat_index(c) == flat);
  }
}

TEST_CASE("elementwise ops") {
  Tensor<float> a{Shape{2}, {1, 2}};
  Tensor<float> b{Shape{2}, {3, 4}};
  auto c = add(a, b);
  REQUIRE(c[0] == 4.0f);
  REQUIRE(c[1] == 6.0f);

  Tensor<float> d{Shape{2}, {2, 3}};
  Tensor<float> e{Shape{2}, {0, 1}};
  auto f = mul(d, e);
  REQUIRE(f[0] == 0.0f);
  REQUIRE(f[1] == 3.0f);

  Tensor<float> g{Shape{2}, {-1, 5}};
  Tensor<float> h{Shape{2}, {0, 0}};
  auto m = emax(g, h);
  REQUIRE(m[0] == 0.0f);
  REQUIRE(m[1] == 5.0f);

  auto s = sub(b, a);
  REQUIRE(s[0] == 2.0f);
  REQUIRE(s[1] == 2.0f);

  Tensor<float> bad{Shape{3}, {0, 0, 0}};
  REQUIRE_THROWS_AS(add(a, bad), std::invalid_argument);
}

TEST_CASE("add and mul commute and associate on random inputs") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Shape s{rng.uniform_int(1, 4), rng.uniform_int(1, 6)};
    // commutativity is exact in either precision
    auto fa = oracles::random_tensor<float>(s, rng, -10.f, 10.f);
    auto fb = oracles::random_tensor<float>(s, rng, -10.f, 10.f);
    REQUIRE(oracles::max_abs_diff(add(fa, fb), add(fb, fa)) == 0.0);
    REQUIRE(oracles::max_abs_diff(mul(fa, fb), mul(fb, fa)) == 0.0);
    // associativity to 1e-6 absolute needs the 64-bit instantiation; f32
    // rounding alone is ~2e-6 at this range
    auto a = oracles::random_tensor<double>(s, rng, -10.0, 10.0);
    auto b = oracles::random_tensor<double>(s, rng, -10.0, 10.0);
    auto c = oracles::random_tensor<double>(s, rng, -10.0, 10.0);
    REQUIRE(oracles::max_abs_diff(add(add(a, b), c), add(a, add(b, c))) < 1e-6);
    REQUIRE(oracles::max_abs_diff(mul(mul(a, b), c), mul(a, mul(b, c))) < 1e-6);
  }
}

TEST_CASE("map ops") {
  Tensor<float> z{Shape{1}, {0}};
  REQUIRE(sigmoid(z)[0] == Catch::Approx(0.5));
  REQUIRE(dclstm::tanh(z)[0] == Catch::Approx(0.0));

  Tensor<float> r{Shape{2}, {-2, 3}};
  auto rr = relu(r);
  REQUIRE(rr[0] == 0.0f);
  REQUIRE(rr[1] == 3.0f);

  auto sc = scale(r, 2.0f);
  REQUIRE(sc[0] == -4.0f);
  REQUIRE(sc[1] == 6.0f);
}

TEST_CASE("reduce_mean") {
  Tensor<float> a{Shape{2, 2}, {1, 3, 5, 7}};
  auto all = reduce_mean(a, {0, 1});
  REQUIRE(all.numel() == 1);
  REQUIRE(all[0] == Catch::Approx(4.0));

  auto rows = reduce_mean(a, {1});
  REQUIRE(rows.shape() == Shape{2});
  REQUIRE(rows[0] == Catch::Approx(2.0));
  REQUIRE(rows[1] == Catch::Approx(6.0));

  auto c = Tensor<float>::full(Shape{3, 4, 2}, 2.5f);
  auto cm = reduce_mean(c, {0, 2});
  REQUIRE(cm.shape() == Shape{4});
  for (int64_t i = 0; i < 4; ++i) REQUIRE(cm[i] == Catch::Approx(2.5));

  REQUIRE_THROWS_AS(reduce_mean(a, {2}), std::invalid_argument);
  REQUIRE_THROWS_AS(reduce_mean(a, {0, 0}), std::invalid_argument);
}

TEST_CASE("reduce_mean over all axes equals sum/N") {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Shape s{rng.uniform_int(1, 5), rng.uniform_int(1, 5), rng.uniform_int(1, 3)};
    auto a = oracles::random_tensor<double>(s, rng, -10.0, 10.0);
    double sum = 0;
    for (int64_t i = 0; i < a.numel(); ++i) sum += a[i];
    const double expect = sum / static_cast<double>(a.numel());
    const double got = reduce_mean(a, {0, 1, 2})[0];
    REQUIRE(oracles::rel_err(got, expect) < 1e-6);
  }
}

TEST_CASE("matmul") {
  Tensor<float> eye{Shape{2, 2}, {1, 0, 0, 1}};
  Tensor<float> m{Shape{2, 2}, {1, 2, 3, 4}};
  REQUIRE(oracles::max_abs_diff(matmul(eye, m), m) == 0.0);

  Tensor<float> row{Shape{1, 2}, {1, 2}};
  Tensor<float> col{Shape{2, 1}, {3, 4}};
  REQUIRE(matmul(row, col)[0] == 11.0f);

  Tensor<float> bad{Shape{3, 2}, {0, 0, 0, 0, 0, 0}};
  REQUIRE_THROWS_AS(matmul(row, bad), std::invalid_argument);
}

TEST_CASE("matmul agrees with triple-loop oracle") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const int64_t m = rng.uniform_int(1, 16), k = rng.uniform_int(1, 16), n = rng.uniform_int(1, 16);
    auto a = oracles::random_tensor<float>(Shape{m, k}, rng);
    auto b = oracles::random_tensor<float>(Shape{k, n}, rng);
    REQUIRE(oracles::max_rel_err(matmul(a, b), oracles::naive_matmul(a, b)) < 1e-5);
  }
}

TEST_CASE("non-finite values are surfaced") {
  Tensor<float> a{Shape{2}, {1.0f, std::numeric_limits<float>::infinity()}};
  Tensor<float> b{Shape{2}, {1.0f, 1.0f}};
  REQUIRE_THROWS_AS(add(a, b), std::runtime_error);
}
