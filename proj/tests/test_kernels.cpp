#include <catch2/catch_amalgamated.hpp>

#include "dclstm/kernels.hpp"
#include "dclstm/rng.hpp"
#include "oracles.hpp"

using namespace dclstm;

namespace {

Conv2DParams<float> random_conv2d(Rng& rng, int64_t k, int64_t ci, int64_t co, int stride, int pad,
                                  bool with_bias = true) {
  Conv2DParams<float> p;
  p.weight = oracles::random_tensor<float>(Shape{k, k, ci, co}, rng);
  if (with_bias) p.bias = oracles::random_tensor<float>(Shape{co}, rng);
  p.sh = p.sw = stride;
  p.ph = p.pw = pad;
  return p;
}

}  // namespace

TEST_CASE("conv2d identity kernel") {
  Rng rng(1);
  auto x = oracles::random_tensor<float>(Shape{4, 5, 1}, rng);
  Conv2DParams<float> p;
  p.weight = Tensor<float>{Shape{1, 1, 1, 1}, {1.0f}};
  p.bias = Tensor<float>::zeros(Shape{1});
  auto y = conv2d(x, p);
  REQUIRE(oracles::max_abs_diff(y, x) == 0.0);
}

TEST_CASE("conv2d all-ones 3x3 on all-ones 5x5") {
  auto x = Tensor<float>::full(Shape{5, 5, 1}, 1.0f);
  Conv2DParams<float> p;
  p.weight = Tensor<float>::full(Shape{3, 3, 1, 1}, 1.0f);
  auto y = conv2d(x, p);
  REQUIRE(y.shape() == Shape{3, 3, 1});
  for (int64_t i = 0; i < y.numel(); ++i) REQUIRE(y[i] == 9.0f);
}

TEST_CASE("conv2d matches loop oracle") {
  Rng rng(2);
  int done = 0;
  while (done < 12) {
    const int64_t k = 2 * rng.uniform_int(0, 1) + 1;
    const int64_t ci = rng.uniform_int(1, 3), co = rng.uniform_int(1, 3);
    const int stride = static_cast<int>(rng.uniform_int(1, 2));
    const int pad = static_cast<int>(rng.uniform_int(0, 2));
    int64_t h = rng.uniform_int(k, 8), w = rng.uniform_int(k, 8);
    // force integral output extents
    h = h - (h + 2 * pad - k) % stride;
    w = w - (w + 2 * pad - k) % stride;
    if (h + 2 * pad < k || w + 2 * pad < k || h < 1 || w < 1) continue;
    auto x = oracles::random_tensor<float>(Shape{h, w, ci}, rng);
    auto p = random_conv2d(rng, k, ci, co, stride, pad);
    auto got = conv2d(x, p);
    auto want = oracles::naive_conv2d(x, p.weight, p.bias, stride, stride, pad, pad);
    REQUIRE(got.shape() == want.shape());
    REQUIRE(oracles::max_rel_err(got, want) < 1e-5);
    ++done;
  }
}

TEST_CASE("conv2d linearity") {
  Rng rng(3);
  auto x1 = oracles::random_tensor<float>(Shape{6, 6, 2}, rng);
  auto x2 = oracles::random_tensor<float>(Shape{6, 6, 2}, rng);
  auto p = random_conv2d(rng, 3, 2, 3, 1, 1, false);
  const float a = 1.7f, b = -0.6f;
  auto lhs = conv2d(add(scale(x1, a), scale(x2, b)), p);
  auto rhs = add(scale(conv2d(x1, p), a), scale(conv2d(x2, p), b));
  REQUIRE(oracles::max_rel_err(lhs, rhs) < 1e-5);
}

TEST_CASE("conv2d rejects non-integral output extent") {
  auto x = Tensor<float>::zeros(Shape{5, 5, 1});
  Conv2DParams<float> p;
  p.weight = Tensor<float>::zeros(Shape{3, 3, 1, 1});
  p.sh = p.sw = 2;
  p.ph = p.pw = 0;
  auto xb = Tensor<float>::zeros(Shape{5, 6, 1});
  REQUIRE_THROWS_AS(conv2d(xb, p), std::invalid_argument);
  Conv2DParams<float> even;
  even.weight = Tensor<float>::zeros(Shape{2, 2, 1, 1});
  REQUIRE_THROWS_AS(conv2d(x, even), std::invalid_argument);
}

TEST_CASE("conv3d identity kernel") {
  Rng rng(4);
  auto x = oracles::random_tensor<float>(Shape{3, 4, 4, 2}, rng);
  Conv3DParams<float> p;
  p.weight = Tensor<float>::zeros(Shape{1, 1, 1, 2, 2});
  p.weight.at(0, 0, 0, 0, 0) = 1.0f;
  p.weight.at(0, 0, 0, 1, 1) = 1.0f;
  auto y = conv3d(x, p);
  REQUIRE(oracles::max_abs_diff(y, x) == 0.0);
}

TEST_CASE("conv3d all-ones") {
  auto x = Tensor<float>::full(Shape{3, 3, 3, 1}, 1.0f);
  Conv3DParams<float> p;
  p.weight = Tensor<float>::full(Shape{3, 3, 3, 1, 1}, 1.0f);
  auto y = conv3d(x, p);
  REQUIRE(y.shape() == Shape{1, 1, 1, 1});
  REQUIRE(y[0] == 27.0f);
}

TEST_CASE("conv3d matches loop oracle") {
  Rng rng(5);
  auto x = oracles::random_tensor<float>(Shape{4, 5, 5, 2}, rng);
  for (int trial = 0; trial < 4; ++trial) {
    Conv3DParams<float> p;
    p.weight = oracles::random_tensor<float>(Shape{3, 3, 3, 2, 2}, rng);
    p.bias = oracles::random_tensor<float>(Shape{2}, rng);
    p.pt = static_cast<int>(rng.uniform_int(0, 1));
    p.ph = p.pw = 1;
    auto got = conv3d(x, p);
    auto want = oracles::naive_conv3d(x, p.weight, p.bias, 1, 1, 1, p.pt, 1, 1);
    REQUIRE(oracles::max_rel_err(got, want) < 1e-5);
  }
}

TEST_CASE("maxpool3d basics") {
  Tensor<float> x{Shape{1, 2, 2, 1}, {1, 2, 3, 4}};
  auto y = maxpool3d(x, {1, 2, 2}, {1, 2, 2});
  REQUIRE(y.numel() == 1);
  REQUIRE(y[0] == 4.0f);

  auto c = Tensor<float>::full(Shape{4, 3, 3, 2}, 0.7f);
  auto yc = maxpool3d(c, {2, 1, 1}, {2, 1, 1});
  REQUIRE(yc.shape() == Shape{2, 3, 3, 2});
  for (int64_t i = 0; i < yc.numel(); ++i) REQUIRE(yc[i] == 0.7f);

  REQUIRE_THROWS_AS(maxpool3d(x, {2, 2, 2}, {2, 2, 2}), std::invalid_argument);
}

TEST_CASE("maxpool3d matches window-scan oracle") {
  Rng rng(6);
  for (int trial = 0; trial < 8; ++trial) {
    auto x = oracles::random_tensor<float>(Shape{rng.uniform_int(2, 6), rng.uniform_int(2, 6),
                                                 rng.uniform_int(2, 6), rng.uniform_int(1, 3)},
                                           rng);
    std::array<int, 3> win = {static_cast<int>(rng.uniform_int(1, 2)), 2, 2};
    auto got = maxpool3d(x, win, win);
    auto want = oracles::naive_maxpool3d(x, win, win);
    REQUIRE(got.shape() == want.shape());
    REQUIRE(oracles::max_abs_diff(got, want) == 0.0);
  }
}

TEST_CASE("avgpool2d basics") {
  Tensor<float> x{Shape{2, 2, 1}, {1, 3, 5, 7}};
  auto y = avgpool2d(x, {2, 2}, {2, 2});
  REQUIRE(y.numel() == 1);
  REQUIRE(y[0] == 4.0f);

  auto c = Tensor<float>::full(Shape{6, 4, 3}, -0.25f);
  auto yc = avgpool2d(c, {2, 2}, {2, 2});
  for (int64_t i = 0; i < yc.numel(); ++i) REQUIRE(yc[i] == Catch::Approx(-0.25f));
}

TEST_CASE("avgpool2d floor semantics drops the remainder") {
  auto x = Tensor<float>::full(Shape{7, 7, 1}, 1.0f);
  auto y = avgpool2d(x, {2, 2}, {2, 2});
  REQUIRE(y.shape() == Shape{3, 3, 1});
}

TEST_CASE("avgpool2d matches window-scan oracle") {
  Rng rng(7);
  for (int trial = 0; trial < 8; ++trial) {
    auto x = oracles::random_tensor<float>(
        Shape{rng.uniform_int(2, 8), rng.uniform_int(2, 8), rng.uniform_int(1, 3)}, rng);
    auto got = avgpool2d(x, {2, 2}, {2, 2});
    auto want = oracles::naive_avgpool2d(x, {2, 2}, {2, 2});
    REQUIRE(oracles::max_rel_err(got, want) < 1e-6);
  }
}

TEST_CASE("bilinear_sample") {
  Rng rng(8);
  auto x = oracles::random_tensor<float>(Shape{4, 5, 3}, rng);
  SECTION("integer coordinates read the exact pixel") {
    auto s = bilinear_sample(x, 1.0f, 2.0f);
    for (int64_t c = 0; c < 3; ++c) REQUIRE(s[c] == x.at(1, 2, c));
  }
  SECTION("midpoint of a 2x2 single-channel image") {
    Tensor<float> img{Shape{2, 2, 1}, {1, 2, 3, 4}};
    REQUIRE(bilinear_sample(img, 0.5f, 0.5f)[0] == Catch::Approx(2.5));
  }
  SECTION("fully out of bounds reads zero") {
    auto s = bilinear_sample(x, -1.0f, -1.0f);
    for (int64_t c = 0; c < 3; ++c) REQUIRE(s[c] == 0.0f);
  }
  SECTION("partition of unity: constant images stay constant in-bounds") {
    auto img = Tensor<float>::full(Shape{5, 6, 2}, 0.37f);
    for (int trial = 0; trial < 50; ++trial) {
      const float py = static_cast<float>(rng.uniform(0.0, 4.0));
      const float px = static_cast<float>(rng.uniform(0.0, 5.0));
      auto s = bilinear_sample(img, py, px);
      REQUIRE(s[0] == Catch::Approx(0.37f).margin(1e-6));
      REQUIRE(s[1] == Catch::Approx(0.37f).margin(1e-6));
    }
  }
}

TEST_CASE("deformable_conv2d with zero offsets equals conv2d") {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const int64_t ci = rng.uniform_int(1, 3), co = rng.uniform_int(1, 3);
    const int64_t h = rng.uniform_int(3, 8), w = rng.uniform_int(3, 8);
    auto x = oracles::random_tensor<float>(Shape{h, w, ci}, rng);
    auto p = random_conv2d(rng, 3, ci, co, 1, 1);
    auto off = Tensor<float>::zeros(Shape{h, w, 18});
    auto got = deformable_conv2d(x, p.weight, p.bias, off, 1, 1, 1, 1);
    auto want = conv2d(x, p);
    REQUIRE(oracles::max_abs_diff(got, want) < 1e-6);
  }
}

TEST_CASE("deformable_conv2d constant (0,+1) offset equals conv of left-shifted image on interior") {
  Rng rng(10);
  const int64_t h = 7, w = 8, ci = 2, co = 2;
  auto x = oracles::random_tensor<float>(Shape{h, w, ci}, rng);
  auto p = random_conv2d(rng, 3, ci, co, 1, 1);
  Tensor<float> off{Shape{h, w, 18}};
  for (int64_t i = 0; i < off.numel(); i += 2) {
    off[i] = 0.0f;      // dy
    off[i + 1] = 1.0f;  // dx
  }
  auto got = deformable_conv2d(x, p.weight, p.bias, off, 1, 1, 1, 1);

  Tensor<float> shifted{Shape{h, w, ci}};  // shifted(y, x) = x(y, x+1), zero fill
  for (int64_t y = 0; y < h; ++y)
    for (int64_t xx = 0; xx + 1 < w; ++xx)
      for (int64_t c = 0; c < ci; ++c) shifted.at(y, xx, c) = x.at(y, xx + 1, c);
  auto want = conv2d(shifted, p);

  for (int64_t oy = 1; oy + 1 < h; ++oy)
    for (int64_t ox = 1; ox + 2 < w; ++ox)
      for (int64_t c = 0; c < co; ++c)
        REQUIRE(oracles::rel_err(got.at(oy, ox, c), want.at(oy, ox, c)) < 1e-5);
}

TEST_CASE("deformable_conv2d matches brute-force tap loop oracle") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const int64_t ci = rng.uniform_int(1, 3), co = rng.uniform_int(1, 3);
    const int64_t h = rng.uniform_int(3, 7), w = rng.uniform_int(3, 7);
    auto x = oracles::random_tensor<float>(Shape{h, w, ci}, rng);
    auto p = random_conv2d(rng, 3, ci, co, 1, 1);
    auto off = oracles::random_tensor<float>(Shape{h, w, 18}, rng, -2.0f, 2.0f);
    auto got = deformable_conv2d(x, p.weight, p.bias, off, 1, 1, 1, 1);
    auto want = oracles::naive_deformable_conv2d(x, p.weight, p.bias, off, 1, 1, 1, 1);
    REQUIRE(oracles::max_rel_err(got, want) < 1e-5);
  }
}

TEST_CASE("deformable_conv2d rejects mismatched offset field") {
  auto x = Tensor<float>::zeros(Shape{5, 5, 1});
  auto w = Tensor<float>::zeros(Shape{3, 3, 1, 1});
  auto off = Tensor<float>::zeros(Shape{5, 5, 17});
  REQUIRE_THROWS_AS(deformable_conv2d(x, w, Tensor<float>{}, off, 1, 1, 1, 1), std::invalid_argument);
}

TEST_CASE("offset_predictor") {
  Rng rng(12);
  auto x = oracles::random_tensor<float>(Shape{6, 6, 2}, rng);

  SECTION("zero init gives the regular conv") {
    Conv2DParams<float> pred;
    pred.weight = Tensor<float>::zeros(Shape{3, 3, 2, 18});
    pred.bias = Tensor<float>::zeros(Shape{18});
    pred.ph = pred.pw = 1;
    auto field = offset_predictor(x, pred);
    for (int64_t i = 0; i < field.offsets.numel(); ++i) REQUIRE(field.offsets[i] == 0.0f);
    auto main = random_conv2d(rng, 3, 2, 3, 1, 1);
    REQUIRE(oracles::max_abs_diff(deformable_conv2d(x, main, field), conv2d(x, main)) < 1e-6);
  }

  SECTION("bias-only predictor is a uniform field") {
    Conv2DParams<float> pred;
    pred.weight = Tensor<float>::zeros(Shape{3, 3, 2, 18});
    pred.bias = oracles::random_tensor<float>(Shape{18}, rng);
    pred.ph = pred.pw = 1;
    auto field = offset_predictor(x, pred);
    for (int64_t r = 0; r < 36; ++r)
      for (int64_t j = 0; j < 18; ++j) REQUIRE(field.offsets[r * 18 + j] == pred.bias[j]);
  }

  SECTION("random predictor matches the conv oracle per tap") {
    Conv2DParams<float> pred = random_conv2d(rng, 3, 2, 18, 1, 1);
    auto field = offset_predictor(x, pred);
    auto want = oracles::naive_conv2d(x, pred.weight, pred.bias, 1, 1, 1, 1);
    REQUIRE(field.offsets.shape() == want.shape());
    REQUIRE(oracles::max_rel_err(field.offsets, want) < 1e-5);
  }

  SECTION("channel mismatch is rejected") {
    Conv2DParams<float> pred = random_conv2d(rng, 3, 2, 17, 1, 1);
    REQUIRE_THROWS_AS(offset_predictor(x, pred), std::invalid_argument);
  }
}
