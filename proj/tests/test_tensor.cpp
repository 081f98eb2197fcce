#include <cmath>

#include "doctest.h"
#include "support.hpp"

using namespace mrfn;
using support::gradcheck;
using support::leaf64;

namespace {

// Direct-loop reference convolution (zero padding, dilation, stride).
std::vector<double> naive_conv(const Tensor& x, const ConvSpec& s, const Tensor& w, const Tensor& b) {
  const auto xv = x.to_vector(), wv = w.to_vector(), bv = b.to_vector();
  const int n = static_cast<int>(x.dim(0)), h = static_cast<int>(x.dim(2)), wd = static_cast<int>(x.dim(3));
  const int oh = static_cast<int>(s.out_size(h)), ow = static_cast<int>(s.out_size(wd));
  std::vector<double> y(static_cast<std::size_t>(n) * s.out_ch * oh * ow);
  for (int bi = 0; bi < n; ++bi)
    for (int o = 0; o < s.out_ch; ++o)
      for (int yy = 0; yy < oh; ++yy)
        for (int xx = 0; xx < ow; ++xx) {
          double acc = bv[o];
          for (int i = 0; i < s.in_ch; ++i)
            for (int ky = 0; ky < s.kernel; ++ky)
              for (int kx = 0; kx < s.kernel; ++kx) {
                const int iy = yy * s.stride - s.padding + ky * s.dilation;
                const int ix = xx * s.stride - s.padding + kx * s.dilation;
                if (iy < 0 || ix < 0 || iy >= h || ix >= wd) continue;
                acc += wv[((static_cast<std::size_t>(o) * s.in_ch + i) * s.kernel + ky) * s.kernel + kx] *
                       xv[((static_cast<std::size_t>(bi) * s.in_ch + i) * h + iy) * wd + ix];
              }
          y[((static_cast<std::size_t>(bi) * s.out_ch + o) * oh + yy) * ow + xx] = acc;
        }
  return y;
}

double dot(const Tensor& a, const Tensor& b) {
  const auto x = a.to_vector(), y = b.to_vector();
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

}  // namespace

TEST_CASE("tensor basics") {
  const Tensor t = Tensor::zeros({2, 3, 4});
  CHECK(t.numel() == 24);
  CHECK(t.rank() == 3);
  CHECK(shape_numel({5, 0, 2}) == 0);
  CHECK_THROWS_AS(Tensor::from_vector({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
  const Tensor f = Tensor::from_vector({3}, {1.5, -2.0, 0.25}, DType::F64);
  CHECK(f.to(DType::F32).to_vector() == std::vector<double>{1.5, -2.0, 0.25});
  CHECK(f.at({1}) == -2.0);
}

TEST_CASE("shallow copies alias, clone and detach do not") {
  Tensor a = Tensor::full({2}, 1.0);
  Tensor b = a;
  b.fill(3.0);
  CHECK(a.to_vector()[0] == 3.0);
  Tensor c = a.clone();
  c.fill(5.0);
  CHECK(a.to_vector()[0] == 3.0);
}

TEST_CASE("tape: double backward and non-scalar loss are rejected") {
  std::mt19937_64 rng(1);
  Tensor x = leaf64({3}, rng);
  const Tensor loss = sum(mul(x, x));
  backward(loss);
  CHECK_THROWS_AS(backward(loss), AutogradError);
  CHECK_THROWS_AS(backward(mul(x, x)), AutogradError);
}

TEST_CASE("no-grad guard records nothing") {
  std::mt19937_64 rng(2);
  Tensor x = leaf64({4}, rng);
  Tensor y;
  {
    NoGradGuard g;
    y = mul(x, x);
  }
  CHECK_FALSE(y.requires_grad());
  CHECK(grad_enabled());
}

TEST_CASE("gradients accumulate over a reused leaf") {
  std::mt19937_64 rng(3);
  Tensor x = leaf64({5}, rng);
  backward(sum(add(x, x)));
  for (double g : x.grad().to_vector()) CHECK(g == doctest::Approx(2.0));
}

TEST_CASE("conv2d matches direct loops") {
  std::mt19937_64 rng(4);
  for (const ConvSpec& s : {ConvSpec::same(3, 5, 3), ConvSpec::same(2, 4, 3, 2), ConvSpec::same(4, 3, 1),
                            ConvSpec::strided(3, 2, 4, 2, 1), ConvSpec::strided(2, 3, 3, 2, 1)}) {
    const Tensor x = support::randn64({2, s.in_ch, 9, 8}, rng);
    const Tensor w = support::randn64(s.weight_shape(), rng);
    const Tensor b = support::randn64({s.out_ch}, rng);
    const Tensor y = conv2d(x, s, w, b);
    const auto ref = naive_conv(x, s, w, b);
    const auto got = y.to_vector();
    REQUIRE(got.size() == ref.size());
    double err = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) err = std::max(err, std::abs(got[i] - ref[i]));
    CHECK(err < 1e-12);
  }
}

TEST_CASE("dilated 3x3 impulse response spans 5x5 with gaps") {
  const ConvSpec s = ConvSpec::same(1, 1, 3, 2);
  Tensor x = Tensor::zeros({1, 1, 9, 9}, DType::F64);
  x.data<double>()[4 * 9 + 4] = 1.0;
  const Tensor w = Tensor::full(s.weight_shape(), 1.0, DType::F64);
  const Tensor y = conv2d(x, s, w, Tensor::zeros({1}, DType::F64));
  const auto v = y.to_vector();
  int nonzero = 0;
  for (int yy = 0; yy < 9; ++yy) {
    for (int xx = 0; xx < 9; ++xx) {
      const bool expect = std::abs(yy - 4) <= 2 && std::abs(xx - 4) <= 2 && (yy - 4) % 2 == 0 && (xx - 4) % 2 == 0;
      CHECK((v[yy * 9 + xx] != 0.0) == expect);
      nonzero += v[yy * 9 + xx] != 0.0;
    }
  }
  CHECK(nonzero == 9);
}

TEST_CASE("transposed conv is the adjoint of the strided conv") {
  std::mt19937_64 rng(5);
  const ConvSpec s = ConvSpec::strided(3, 4, 4, 2, 1, false);
  const Tensor w = support::randn64(s.weight_shape(), rng);
  const Tensor x = support::randn64({1, 3, 8, 8}, rng);
  const Tensor y = support::randn64({1, 4, 4, 4}, rng);
  const ConvSpec t = ConvSpec::strided(4, 3, 4, 2, 1, false);
  // conv weight [out=4,in=3,k,k] read as transposed weight [in=4,out=3,k,k].
  const Tensor lhs = conv2d(x, s, w, Tensor());
  const Tensor rhs = conv_transpose2d(y, t, w, Tensor());
  CHECK(rhs.shape() == Shape{1, 3, 8, 8});
  CHECK(dot(lhs, y) == doctest::Approx(dot(x, rhs)).epsilon(1e-12));
}

TEST_CASE("conv shape errors") {
  std::mt19937_64 rng(6);
  const ConvSpec s = ConvSpec::same(3, 2, 3);
  CHECK_THROWS_AS(conv2d(support::randn64({1, 4, 5, 5}, rng), s, support::randn64(s.weight_shape(), rng),
                         support::randn64({2}, rng)),
                  ShapeError);
  CHECK_THROWS_AS(ConvSpec::same(3, 3, 5).validate(), ShapeError);
  CHECK_THROWS_AS(maxpool2d(support::randn64({1, 1, 5}, rng), 2, 2), ShapeError);
}

TEST_CASE("matmul and softmax forward values") {
  const Tensor a = Tensor::from_vector({1, 2, 3}, {1, 2, 3, 4, 5, 6}, DType::F64);
  const Tensor b = Tensor::from_vector({1, 3, 2}, {1, 0, 0, 1, 1, 1}, DType::F64);
  CHECK(matmul(a, b).to_vector() == std::vector<double>{4, 5, 10, 11});
  const Tensor s = softmax(Tensor::from_vector({2, 3}, {0, 0, 0, 1000, 0, -1000}, DType::F64), -1);
  const auto v = s.to_vector();
  CHECK(v[0] == doctest::Approx(1.0 / 3));
  CHECK(v[3] == doctest::Approx(1.0));
  CHECK(std::isfinite(v[5]));
}

TEST_CASE("pooling forward values") {
  const Tensor x = Tensor::from_vector({1, 1, 4, 4}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16},
                                       DType::F64);
  CHECK(maxpool2d(x, 2, 2).to_vector() == std::vector<double>{6, 8, 14, 16});
  CHECK(adaptive_maxpool2d(x, 1, 1).to_vector() == std::vector<double>{16});
  CHECK(adaptive_maxpool2d(x, 3, 3).to_vector() == std::vector<double>{6, 7, 8, 10, 11, 12, 14, 15, 16});
  CHECK(global_avg_pool(x).to_vector() == std::vector<double>{8.5});
}

TEST_CASE("reflect pad and crop") {
  const Tensor x = Tensor::from_vector({1, 1, 2, 3}, {1, 2, 3, 4, 5, 6}, DType::F64);
  const Tensor p = pad_reflect(x, 1, 2);
  CHECK(p.shape() == Shape{1, 1, 3, 5});
  CHECK(p.to_vector() == std::vector<double>{1, 2, 3, 2, 1, 4, 5, 6, 5, 4, 1, 2, 3, 2, 1});
  CHECK(support::bitwise_equal(crop(p, 2, 3), x));
}

TEST_CASE("gradient check: every op") {
  std::mt19937_64 rng(7);
  const auto checks = support::op_gradchecks(rng);
  CHECK(checks.size() == 34);
  for (const auto& c : checks) {
    INFO(c.name << " rel err " << c.result.max_rel);
    CHECK(c.result.max_rel < 1e-4);
  }
}

TEST_CASE("float32 and float64 agree on a small graph") {
  std::mt19937_64 rng(8);
  const Tensor x = support::randn64({1, 2, 6, 6}, rng);
  const ConvSpec s = ConvSpec::same(2, 3, 3);
  const Tensor w = support::randn64(s.weight_shape(), rng), b = support::randn64({3}, rng);
  const Tensor y64 = sigmoid(conv2d(x, s, w, b));
  const Tensor y32 = sigmoid(conv2d(x.to(DType::F32), s, w.to(DType::F32), b.to(DType::F32)));
  CHECK(support::max_abs_diff(y64, y32) < 1e-5);
}
