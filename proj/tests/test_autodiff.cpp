#include <catch2/catch_amalgamated.hpp>

#include "dualcodec/ops.hpp"
#include "fd_check.hpp"

using namespace dualcodec;
using Catch::Approx;
using D = Tensor<double>;

TEST_CASE("storage bytes are accounted") {
  const int64_t before = memstat::current_bytes.load();
  {
    auto t = D::zeros({100, 10});
    CHECK(memstat::current_bytes.load() == before + 1000 * 8);
    CHECK(memstat::peak_bytes.load() >= memstat::current_bytes.load());
  }
  CHECK(memstat::current_bytes.load() == before);
}

TEST_CASE("sum of squares has the analytic gradient") {
  Graph<double> g;
  auto x = D::from({3}, {1, 2, 3}).set_requires_grad();
  auto loss = sum(mul(x, x));
  CHECK(loss.item() == Approx(14.0));
  g.backward(loss);
  auto gx = x.grad();
  CHECK(gx.data()[0] == Approx(2.0));
  CHECK(gx.data()[1] == Approx(4.0));
  CHECK(gx.data()[2] == Approx(6.0));
}

TEST_CASE("tanh at zero has unit gradient") {
  Graph<double> g;
  auto x = D::scalar(0.0).set_requires_grad();
  auto y = tanh(x);
  CHECK(y.item() == 0.0);
  g.backward(y);
  CHECK(x.grad().data()[0] == Approx(1.0));
}

TEST_CASE("backward state errors") {
  Graph<double> g;
  auto x = D::from({2}, {1, 2}).set_requires_grad();
  auto y = sum(x);
  g.backward(y);
  CHECK_THROWS_AS(g.backward(y), StateError);

  Graph<double> g2;
  auto z = mul(x, x);
  CHECK_THROWS_AS(g2.backward(z), ShapeError);  // non-scalar loss
}

TEST_CASE("no-grad scope keeps the graph from growing") {
  Graph<double> g;
  auto x = D::from({2}, {0.1, 0.2}).set_requires_grad();
  auto y = tanh(x);
  (void)y;
  const size_t n = g.size();
  CHECK(n > 0);
  {
    NoGradScope<double> ng;
    auto z = tanh(mul(x, x));
    CHECK_FALSE(z.requires_grad());
  }
  CHECK(g.size() == n);
  auto d = x.detach();
  CHECK_FALSE(d.requires_grad());
  auto w = tanh(d);
  (void)w;
  CHECK(g.size() == n);  // detached input records nothing
}

TEST_CASE("elementwise binary ops match finite differences") {
  Rng rng(100);
  auto a = D::randn({2, 3, 4}, rng).set_requires_grad();
  auto b = D::randn({2, 3, 4}, rng).set_requires_grad();
  auto bias = D::randn({4}, rng).set_requires_grad();
  auto row = D::randn({3, 1}, rng).set_requires_grad();
  // keep divisors away from zero
  for (int64_t i = 0; i < b.numel(); ++i)
    b.data()[i] += (b.data()[i] < 0 ? -2.0 : 2.0);

  SECTION("add with suffix broadcast") {
    testutil::fd_check([&] { return sum(mul(add(a, bias), add(a, bias))); },
                       {a, bias});
  }
  SECTION("sub with middle broadcast") {
    testutil::fd_check([&] { return sum(mul(sub(a, row), sub(a, row))); },
                       {a, row});
  }
  SECTION("mul same shape") {
    testutil::fd_check([&] { return sum(mul(mul(a, b), a)); }, {a, b});
  }
  // squared heads keep the upstream grad non-constant, so stride mistakes
  // in the broadcast backward cannot hide behind an all-ones gradient
  SECTION("mul broadcast, small side first") {
    testutil::fd_check([&] { return sum(mul(mul(row, b), mul(row, b))); },
                       {row, b});
  }
  SECTION("mul broadcast, small side second") {
    testutil::fd_check([&] { return sum(mul(mul(a, bias), mul(a, bias))); },
                       {a, bias});
  }
  SECTION("mul broadcast over leading batch shape") {
    Rng r2(101);
    auto c = D::randn({2, 1, 1, 1}, r2).set_requires_grad();
    auto x = D::randn({2, 2, 3, 3}, r2).set_requires_grad();
    testutil::fd_check([&] { return sum(mul(mul(c, x), mul(c, x))); },
                       {c, x});
  }
  SECTION("div broadcast") {
    testutil::fd_check([&] { return sum(mul(div(a, b), div(a, b))); },
                       {a, b});
    testutil::fd_check([&] { return sum(mul(div(row, b), div(row, b))); },
                       {row, b});
  }
  SECTION("scalar ops") {
    testutil::fd_check(
        [&] { return sum(mul_scalar(add_scalar(a, 0.7), -1.3)); }, {a});
  }
}

TEST_CASE("unary ops match finite differences") {
  Rng rng(101);
  auto x = D::uniform({3, 5}, rng, -0.9, 0.9).set_requires_grad();
  SECTION("tanh") {
    testutil::fd_check([&] { return sum(mul(tanh(x), tanh(x))); }, {x});
  }
  SECTION("atanh") {
    testutil::fd_check([&] { return sum(atanh(x)); }, {x}, 1e-3, 1e-5);
  }
  SECTION("gelu") {
    testutil::fd_check([&] { return sum(gelu(x)); }, {x});
  }
  SECTION("sqrt") {
    auto pos = D::uniform({3, 5}, rng, 0.5, 2.0).set_requires_grad();
    testutil::fd_check([&] { return sum(sqrt(pos)); }, {pos});
  }
  SECTION("atanh domain error") {
    auto bad = D::from({2}, {0.5, 1.0});
    CHECK_THROWS_AS(atanh(bad), DomainError);
  }
}

TEST_CASE("matmul shapes and gradients") {
  CHECK(matmul(D::zeros({2, 3}), D::zeros({3, 4})).shape() == Shape{2, 4});
  CHECK_THROWS_AS(matmul(D::zeros({2, 3}), D::zeros({4, 4})), ShapeError);

  Rng rng(102);
  auto a = D::randn({2, 3}, rng).set_requires_grad();
  auto b = D::randn({3, 4}, rng).set_requires_grad();
  testutil::fd_check([&] { return sum(mul(matmul(a, b), matmul(a, b))); },
                     {a, b});

  // folded leading dims
  auto x = D::randn({2, 5, 3}, rng).set_requires_grad();
  CHECK(matmul(x, b).shape() == Shape{2, 5, 4});
  testutil::fd_check([&] { return sum(matmul(x, b)); }, {x, b});

  // batched
  auto p = D::randn({2, 3, 4}, rng).set_requires_grad();
  auto q = D::randn({2, 4, 2}, rng).set_requires_grad();
  CHECK(matmul(p, q).shape() == Shape{2, 3, 2});
  testutil::fd_check([&] { return sum(mul(matmul(p, q), matmul(p, q))); },
                     {p, q});
}

TEST_CASE("matmul against a hand-rolled triple loop") {
  Rng rng(103);
  auto a = D::randn({4, 6}, rng);
  auto b = D::randn({6, 5}, rng);
  auto c = matmul(a, b);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 5; ++j) {
      double acc = 0;
      for (int k = 0; k < 6; ++k)
        acc += a.data()[i * 6 + k] * b.data()[k * 5 + j];
      CHECK(c.data()[i * 5 + j] == Approx(acc).margin(1e-12));
    }
}

TEST_CASE("conv2d arithmetic and gradients") {
  CHECK(conv2d(D::zeros({1, 64, 16, 16}), D::zeros({128, 64, 3, 3}),
               Tensor<double>(), 2, 2, 1, 1)
            .shape() == Shape{1, 128, 8, 8});

  Rng rng(104);
  auto x = D::randn({2, 3, 5, 6}, rng).set_requires_grad();
  auto w = D::randn({4, 3, 3, 3}, rng, 0.3).set_requires_grad();
  auto b = D::randn({4}, rng).set_requires_grad();
  auto run = [&] {
    auto y = conv2d(x, w, b, 2, 2, 1, 1);
    return sum(mul(y, y));
  };
  CHECK(conv2d(x, w, b, 2, 2, 1, 1).shape() == Shape{2, 4, 3, 3});
  testutil::fd_check(run, {x, w, b});
}

TEST_CASE("conv2d against a direct correlation loop") {
  Rng rng(105);
  auto x = D::randn({1, 2, 4, 5}, rng);
  auto w = D::randn({3, 2, 3, 3}, rng);
  auto y = conv2d(x, w, Tensor<double>(), 1, 1, 1, 1);
  REQUIRE(y.shape() == Shape{1, 3, 4, 5});
  for (int co = 0; co < 3; ++co)
    for (int oh = 0; oh < 4; ++oh)
      for (int ow = 0; ow < 5; ++ow) {
        double acc = 0;
        for (int ci = 0; ci < 2; ++ci)
          for (int ki = 0; ki < 3; ++ki)
            for (int kj = 0; kj < 3; ++kj) {
              const int ih = oh - 1 + ki, iw = ow - 1 + kj;
              if (ih < 0 || ih >= 4 || iw < 0 || iw >= 5) continue;
              acc += x.data()[(ci * 4 + ih) * 5 + iw] *
                     w.data()[((co * 2 + ci) * 3 + ki) * 3 + kj];
            }
        CHECK(y.data()[(co * 4 + oh) * 5 + ow] == Approx(acc).margin(1e-12));
      }
}

TEST_CASE("transposed conv mirrors strided conv geometry") {
  // k4 s2 p1 exactly doubles each spatial dim
  CHECK(transposed_conv2d(D::zeros({1, 8, 4, 6}), D::zeros({8, 4, 4, 4}),
                          Tensor<double>(), 2, 2, 1, 1)
            .shape() == Shape{1, 4, 8, 12});
  // frequency-only upsampling: k(4,3) s(2,1) p(1,1)
  CHECK(transposed_conv2d(D::zeros({1, 8, 4, 6}), D::zeros({8, 4, 4, 3}),
                          Tensor<double>(), 2, 1, 1, 1)
            .shape() == Shape{1, 4, 8, 6});

  Rng rng(106);
  auto x = D::randn({2, 3, 3, 4}, rng).set_requires_grad();
  auto w = D::randn({3, 2, 4, 4}, rng, 0.3).set_requires_grad();
  auto b = D::randn({2}, rng).set_requires_grad();
  auto y = transposed_conv2d(x, w, b, 2, 2, 1, 1);
  CHECK(y.shape() == Shape{2, 2, 6, 8});
  testutil::fd_check(
      [&] {
        auto out = transposed_conv2d(x, w, b, 2, 2, 1, 1);
        return sum(mul(out, out));
      },
      {x, w, b});
}

TEST_CASE("transposed conv is the adjoint of conv") {
  // <conv(x), y> == <x, tconv(y)> for shared weights: exact adjointness
  Rng rng(107);
  auto x = D::randn({1, 3, 6, 8}, rng);
  auto w = D::randn({5, 3, 4, 4}, rng);        // conv weight [Co,Ci,kh,kw]
  auto y = D::randn({1, 5, 3, 4}, rng);        // conv output grid
  auto cx = conv2d(x, w, Tensor<double>(), 2, 2, 1, 1);
  REQUIRE(cx.shape() == y.shape());
  // tconv weight layout [Ci,Co,kh,kw] lines up with w as-is: Ci here is the
  // conv's Co, so the adjoint shares the exact buffer
  auto ty = transposed_conv2d(y, w, Tensor<double>(), 2, 2, 1, 1);
  REQUIRE(ty.shape() == x.shape());
  double lhs = 0, rhs = 0;
  for (int64_t i = 0; i < cx.numel(); ++i) lhs += cx.data()[i] * y.data()[i];
  for (int64_t i = 0; i < x.numel(); ++i) rhs += x.data()[i] * ty.data()[i];
  CHECK(lhs == Approx(rhs).epsilon(1e-10));
}

TEST_CASE("softmax rows normalize and differentiate") {
  Rng rng(108);
  auto x = D::randn({4, 6}, rng).set_requires_grad();
  auto y = softmax(x);
  for (int r = 0; r < 4; ++r) {
    double s = 0;
    for (int i = 0; i < 6; ++i) s += y.data()[r * 6 + i];
    CHECK(s == Approx(1.0).epsilon(1e-12));
  }
  testutil::fd_check(
      [&] {
        auto p = softmax(x);
        return sum(mul(p, p));
      },
      {x});
}

TEST_CASE("layer_norm normalizes and differentiates") {
  Rng rng(109);
  auto x = D::randn({3, 8}, rng).set_requires_grad();
  auto gamma = D::full({8}, 1.0).set_requires_grad();
  auto beta = D::zeros({8}).set_requires_grad();
  auto y = layer_norm(x, gamma, beta);
  for (int r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (int i = 0; i < 8; ++i) m += y.data()[r * 8 + i];
    m /= 8;
    for (int i = 0; i < 8; ++i) {
      const double d = y.data()[r * 8 + i] - m;
      v += d * d;
    }
    CHECK(m == Approx(0.0).margin(1e-12));
    CHECK(v / 8 == Approx(1.0).epsilon(1e-3));
  }
  testutil::fd_check(
      [&] {
        auto out = layer_norm(x, gamma, beta);
        return sum(mul(out, out));
      },
      {x, gamma, beta}, 2e-3);
}

TEST_CASE("attention equals its softmax-matmul composition") {
  Rng rng(110);
  auto q = D::randn({1, 1, 5, 4}, rng);
  auto k = D::randn({1, 1, 5, 4}, rng);
  auto v = D::randn({1, 1, 5, 4}, rng);
  auto fused = scaled_dot_attention(q, k, v, Tensor<double>());

  auto q2 = reshape(q, {5, 4});
  auto k2 = reshape(k, {5, 4});
  auto v2 = reshape(v, {5, 4});
  auto scores = mul_scalar(matmul(q2, permute(k2, {1, 0})), 0.5);  // 1/sqrt(4)
  auto ref = matmul(softmax(scores), v2);
  for (int64_t i = 0; i < ref.numel(); ++i)
    CHECK(fused.data()[i] == Approx(ref.data()[i]).margin(1e-12));
}

TEST_CASE("attention gradients with an additive mask") {
  Rng rng(111);
  auto q = D::randn({1, 2, 3, 4}, rng).set_requires_grad();
  auto k = D::randn({1, 2, 3, 4}, rng).set_requires_grad();
  auto v = D::randn({1, 2, 3, 4}, rng).set_requires_grad();
  const double ninf = -std::numeric_limits<double>::infinity();
  auto mask = D::from({3, 3}, {0, ninf, ninf,   //
                               0, 0, ninf,      //
                               0, 0.5, 0});     // finite entries act additively
  testutil::fd_check(
      [&] {
        auto o = scaled_dot_attention(q, k, v, mask);
        return sum(mul(o, o));
      },
      {q, k, v});
}

TEST_CASE("masked keys never reach masked queries, bitwise") {
  Rng rng(112);
  auto q = D::randn({2, 2, 4, 6}, rng);
  auto v = D::randn({2, 2, 4, 6}, rng);
  const double ninf = -std::numeric_limits<double>::infinity();
  // queries 0,1 see keys 0,1 only; queries 2,3 see everything
  std::vector<double> m(16, 0.0);
  m[0 * 4 + 2] = m[0 * 4 + 3] = m[1 * 4 + 2] = m[1 * 4 + 3] = ninf;
  auto mask = D::from({4, 4}, m);

  auto k1 = D::randn({2, 2, 4, 6}, rng);
  auto v1 = v.clone();
  auto out1 = scaled_dot_attention(q, k1, v1, mask);

  // scramble the masked keys/values (rows 2,3) with garbage including huge values
  auto k2 = k1.clone();
  auto v2 = v.clone();
  for (int64_t bh = 0; bh < 4; ++bh)
    for (int64_t j = 2; j < 4; ++j)
      for (int64_t t = 0; t < 6; ++t) {
        k2.data()[(bh * 4 + j) * 6 + t] = 1e30;
        v2.data()[(bh * 4 + j) * 6 + t] = -1e30;
      }
  auto out2 = scaled_dot_attention(q, k2, v2, mask);
  for (int64_t bh = 0; bh < 4; ++bh)
    for (int64_t i = 0; i < 2; ++i)  // the restricted queries
      for (int64_t t = 0; t < 6; ++t) {
        const int64_t idx = (bh * 4 + i) * 6 + t;
        CHECK(out1.data()[idx] == out2.data()[idx]);  // bitwise
      }
}

TEST_CASE("structural ops gradients") {
  Rng rng(113);
  auto a = D::randn({2, 3, 4}, rng).set_requires_grad();
  auto b = D::randn({2, 2, 4}, rng).set_requires_grad();

  SECTION("reshape") {
    CHECK(reshape(a, {6, 4}).shape() == Shape{6, 4});
    CHECK(reshape(a, {-1, 12}).shape() == Shape{2, 12});
    CHECK_THROWS_AS(reshape(a, {5, 5}), ShapeError);
    testutil::fd_check(
        [&] {
          auto r = reshape(a, {4, 6});
          return sum(mul(r, r));
        },
        {a});
  }
  SECTION("concat and slice invert each other") {
    auto c = concat<double>({a, b}, 1);
    CHECK(c.shape() == Shape{2, 5, 4});
    auto back = slice(c, 1, 0, 3);
    for (int64_t i = 0; i < 2; ++i)
      for (int64_t j = 0; j < 3; ++j)
        for (int64_t t = 0; t < 4; ++t)
          CHECK(back.data()[(i * 3 + j) * 4 + t] ==
                a.data()[(i * 3 + j) * 4 + t]);
    testutil::fd_check(
        [&] {
          auto cc = concat<double>({a, b}, 1);
          auto s = slice(cc, 1, 1, 3);
          return sum(mul(s, s));
        },
        {a, b});
  }
  SECTION("permute") {
    auto p = permute(a, {2, 0, 1});
    CHECK(p.shape() == Shape{4, 2, 3});
    CHECK(p.data()[0] == a.data()[0]);
    CHECK(p.data()[(1 * 2 + 0) * 3 + 0] == a.data()[(0 * 3 + 0) * 4 + 1]);
    testutil::fd_check(
        [&] {
          auto pp = permute(a, {2, 0, 1});
          return sum(mul(pp, pp));
        },
        {a});
  }
  SECTION("slice bounds") {
    CHECK_THROWS_AS(slice(a, 1, 2, 3), ShapeError);
  }
}

TEST_CASE("reductions") {
  Rng rng(114);
  auto a = D::randn({3, 4}, rng).set_requires_grad();
  SECTION("mean gradient") {
    testutil::fd_check([&] { return mean(mul(a, a)); }, {a});
  }
  SECTION("sum_trailing") {
    auto s = sum_trailing(a);
    REQUIRE(s.shape() == Shape{3});
    for (int r = 0; r < 3; ++r) {
      double acc = 0;
      for (int i = 0; i < 4; ++i) acc += a.data()[r * 4 + i];
      CHECK(s.data()[r] == Approx(acc));
    }
    testutil::fd_check(
        [&] {
          auto t = sum_trailing(mul(a, a));
          return sum(mul(t, t));
        },
        {a});
  }
}

TEST_CASE("ste_round value and straight-through gradient") {
  auto x = D::from({4}, {0.43, 0.0, -1.0, 1.0});
  auto y = ste_round(x, 5);
  CHECK(y.data()[0] == Approx(0.4));
  CHECK(y.data()[1] == 0.0);
  CHECK(y.data()[2] == -1.0);
  CHECK(y.data()[3] == 1.0);

  // rounding mode: half away from zero
  auto h = ste_round(D::from({2}, {0.5, -0.5}), 1);
  CHECK(h.data()[0] == 1.0);
  CHECK(h.data()[1] == -1.0);

  // idempotence, bitwise
  Rng rng(115);
  auto z = D::uniform({100}, rng, -1.0, 1.0);
  auto q1 = ste_round(z, 5);
  auto q2 = ste_round(q1, 5);
  for (int64_t i = 0; i < z.numel(); ++i) CHECK(q1.data()[i] == q2.data()[i]);

  // upstream gradient flows through unchanged
  Graph<double> g;
  auto t = D::from({3}, {0.1, 0.6, -0.8}).set_requires_grad();
  auto loss = sum(mul_scalar(ste_round(t, 5), 3.0));
  g.backward(loss);
  for (int i = 0; i < 3; ++i) CHECK(t.grad().data()[i] == Approx(3.0));
}

TEST_CASE("select_rows routes values and gradients per row") {
  Rng rng(116);
  auto a = D::randn({4, 3}, rng).set_requires_grad();
  auto b = D::randn({4, 3}, rng).set_requires_grad();
  std::vector<uint8_t> take{1, 0, 0, 1};
  auto out = select_rows(take, a, b);
  for (int r = 0; r < 4; ++r)
    for (int i = 0; i < 3; ++i)
      CHECK(out.data()[r * 3 + i] ==
            (take[size_t(r)] ? a : b).data()[r * 3 + i]);
  testutil::fd_check(
      [&] {
        auto o = select_rows(take, a, b);
        return sum(mul(o, o));
      },
      {a, b});
}

TEST_CASE("three-layer MLP passes finite differences on every parameter") {
  Rng rng(117);
  auto x = D::randn({3, 4}, rng);
  auto w1 = D::randn({4, 8}, rng, 0.5).set_requires_grad();
  auto b1 = D::randn({8}, rng, 0.1).set_requires_grad();
  auto w2 = D::randn({8, 8}, rng, 0.5).set_requires_grad();
  auto b2 = D::randn({8}, rng, 0.1).set_requires_grad();
  auto w3 = D::randn({8, 2}, rng, 0.5).set_requires_grad();
  auto b3 = D::randn({2}, rng, 0.1).set_requires_grad();
  auto run = [&] {
    auto h1 = gelu(add(matmul(x, w1), b1));
    auto h2 = gelu(add(matmul(h1, w2), b2));
    auto y = add(matmul(h2, w3), b3);
    return mean(mul(y, y));
  };
  testutil::fd_check(run, {w1, b1, w2, b2, w3, b3});
}
