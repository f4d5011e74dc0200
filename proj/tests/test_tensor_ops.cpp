#include <cmath>
#include <vector>

#include "cmt/gradcheck.hpp"
#include "cmt/mft.hpp"
#include "cmt/ops.hpp"
#include "doctest.h"

using namespace cmt;

namespace {

double inner(const TensorD& a, const TensorD& b) {
  double acc = 0;
  for (int64_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace

TEST_CASE("matmul identity and permutation") {
  TensorD eye({3, 3});
  for (int i = 0; i < 3; ++i) eye.at({i, i}) = 1.0;
  TensorD a({3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  TensorD out = matmul(eye, a);
  for (int64_t i = 0; i < 9; ++i) CHECK(out[i] == a[i]);

  TensorD m({2, 2}, {1, 2, 3, 4});
  TensorD perm({2, 2}, {0, 1, 1, 0});
  TensorD swapped = matmul(m, perm);
  CHECK(swapped.at({0, 0}) == 2);
  CHECK(swapped.at({0, 1}) == 1);
  CHECK(swapped.at({1, 0}) == 4);
  CHECK(swapped.at({1, 1}) == 3);
}

TEST_CASE("matmul shape mismatch reports both shapes") {
  TensorD a({2, 3});
  TensorD b({4, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), ShapeError);
}

TEST_CASE("matmul gradcheck vs central differences") {
  Rng rng(7);
  auto a = random_tensor<double>({5, 4}, rng);
  auto b = random_tensor<double>({4, 3}, rng);
  auto res = grad_check<double>(
      [](const std::vector<TensorD>& in) { return sum(matmul(in[0], in[1])); }, {a, b});
  CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("conv2d 1x1 identity kernel") {
  Rng rng(11);
  auto x = random_tensor<float>({5, 6, 3}, rng, 0.f, 1.f);
  TensorF w({1, 1, 3, 3});
  for (int c = 0; c < 3; ++c) w.at({0, 0, c, c}) = 1.0f;
  TensorF out = conv2d(x, w, 1, Pad::same);
  REQUIRE(out.shape() == x.shape());
  for (int64_t i = 0; i < x.size(); ++i) CHECK(out[i] == doctest::Approx(x[i]));
}

TEST_CASE("conv2d all-ones 3x3 kernel counts overlap") {
  TensorF x = TensorF::full({4, 4, 1}, 1.0f);
  TensorF w = TensorF::full({3, 3, 1, 1}, 1.0f);
  TensorF out = conv2d(x, w, 1, Pad::same);
  CHECK(out.at({1, 1, 0}) == doctest::Approx(9.0f));
  CHECK(out.at({2, 2, 0}) == doctest::Approx(9.0f));
  CHECK(out.at({0, 0, 0}) == doctest::Approx(4.0f));
  CHECK(out.at({0, 3, 0}) == doctest::Approx(4.0f));
  CHECK(out.at({3, 3, 0}) == doctest::Approx(4.0f));
  CHECK(out.at({0, 1, 0}) == doctest::Approx(6.0f));
}

TEST_CASE("conv2d stride-2 same-pad shape") {
  Rng rng(3);
  auto x = random_tensor<float>({8, 8, 2}, rng);
  auto w = random_tensor<float>({3, 3, 2, 5}, rng);
  TensorF out = conv2d(x, w, 2, Pad::same);
  CHECK(out.shape() == Shape{4, 4, 5});
  // odd input also rounds up
  auto x2 = random_tensor<float>({7, 5, 2}, rng);
  CHECK(conv2d(x2, w, 2, Pad::same).shape() == Shape{4, 3, 5});
}

TEST_CASE("conv2d channel mismatch") {
  TensorF x({4, 4, 3});
  TensorF w({3, 3, 2, 4});
  CHECK_THROWS_AS(conv2d(x, w, 1, Pad::same), ShapeError);
}

TEST_CASE("conv2d gradcheck") {
  Rng rng(5);
  auto x = random_tensor<double>({5, 5, 2}, rng);
  auto w = random_tensor<double>({3, 3, 2, 3}, rng, -0.5, 0.5);
  auto b = random_tensor<double>({3}, rng);
  for (int stride : {1, 2}) {
    auto res = grad_check<double>(
        [stride](const std::vector<TensorD>& in) {
          return sum(conv2d(in[0], in[1], in[2], stride, Pad::same));
        },
        {x, w, b});
    CHECK(res.max_rel_error < 1e-6);
  }
}

TEST_CASE("transposed_conv2d doubles spatial dims and zero maps to bias") {
  Rng rng(9);
  auto x = random_tensor<float>({4, 4, 3}, rng);
  auto w = random_tensor<float>({3, 3, 5, 3}, rng);
  TensorF out = transposed_conv2d(x, w);
  CHECK(out.shape() == Shape{8, 8, 5});

  TensorF zero({4, 4, 3});
  TensorF bias({5}, {1, 2, 3, 4, 5});
  TensorF out2 = transposed_conv2d(zero, w, bias);
  for (int64_t p = 0; p < 64; ++p)
    for (int64_t c = 0; c < 5; ++c) CHECK(out2[p * 5 + c] == doctest::Approx(bias[c]));
}

TEST_CASE("conv/transposed-conv adjoint identity on random shapes") {
  Rng rng(13);
  for (int trial = 0; trial < 4; ++trial) {
    const int64_t h = 6, w = 6;
    const int64_t a = 2 + static_cast<int64_t>(rng.next_below(3));
    const int64_t b = 2 + static_cast<int64_t>(rng.next_below(3));
    auto x = random_tensor<double>({2 * h, 2 * w, a}, rng);
    auto y = random_tensor<double>({h, w, b}, rng);
    auto kernel = random_tensor<double>({3, 3, a, b}, rng);
    // <conv(x), y> == <x, conv^T(y)> with shared weights
    TensorD cx = conv2d(x, kernel, 2, Pad::same);
    TensorD ty = transposed_conv2d(y, kernel);
    CHECK(inner(cx.viewed({cx.size()}), y.viewed({y.size()})) ==
          doctest::Approx(inner(x.viewed({x.size()}), ty.viewed({ty.size()}))).epsilon(1e-5));
  }
}

TEST_CASE("transposed_conv2d gradcheck") {
  Rng rng(17);
  auto x = random_tensor<double>({3, 3, 2}, rng);
  auto w = random_tensor<double>({3, 3, 4, 2}, rng, -0.5, 0.5);
  auto b = random_tensor<double>({4}, rng);
  auto res = grad_check<double>(
      [](const std::vector<TensorD>& in) {
        auto y = transposed_conv2d(in[0], in[1], in[2]);
        return mean(mul(y, y));
      },
      {x, w, b});
  CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("softmax closed forms") {
  TensorD flat = TensorD::full({4}, 2.5);
  TensorD s = softmax(flat, 0);
  for (int64_t i = 0; i < 4; ++i) CHECK(s[i] == doctest::Approx(0.25));

  TensorD two({2}, {0.0, std::log(3.0)});
  TensorD s2 = softmax(two, 0);
  CHECK(s2[0] == doctest::Approx(0.25));
  CHECK(s2[1] == doctest::Approx(0.75));
}

TEST_CASE("softmax shift invariance") {
  Rng rng(23);
  auto x = random_tensor<double>({3, 5}, rng, -5, 5);
  TensorD shifted = add_scalar(x, 1000.0);
  TensorD a = softmax(x, 1);
  TensorD b = softmax(shifted, 1);
  for (int64_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one on wild inputs") {
  Rng rng(29);
  for (int trial = 0; trial < 10; ++trial) {
    auto x = random_tensor<double>({4, 7}, rng, -50, 50);
    TensorD s = softmax(x, 1);
    for (int64_t r = 0; r < 4; ++r) {
      double total = 0;
      for (int64_t c = 0; c < 7; ++c) {
        CHECK(s.at({r, c}) >= 0.0);
        total += s.at({r, c});
      }
      CHECK(std::fabs(total - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("softmax gradcheck") {
  Rng rng(31);
  auto x = random_tensor<double>({3, 4}, rng, -3, 3);
  auto w = random_tensor<double>({3, 4}, rng);
  auto res = grad_check<double>(
      [w](const std::vector<TensorD>& in) { return sum(mul(softmax(in[0], 1), w)); }, {x});
  CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("layer_norm closed forms") {
  TensorD gain = TensorD::full({3}, 1.0);
  TensorD bias({3});
  TensorD constant = TensorD::full({2, 3}, 4.2);
  TensorD out = layer_norm(constant, gain, bias);
  for (int64_t i = 0; i < out.size(); ++i) CHECK(out[i] == doctest::Approx(0.0));

  TensorD g2 = TensorD::full({2}, 1.0);
  TensorD b2({2});
  TensorD tok({1, 2}, {1.0, 3.0});
  TensorD out2 = layer_norm(tok, g2, b2, 1e-12);
  CHECK(out2[0] == doctest::Approx(-1.0));
  CHECK(out2[1] == doctest::Approx(1.0));
}

TEST_CASE("layer_norm pre-affine moments on random tokens") {
  Rng rng(37);
  auto x = random_tensor<double>({4, 4, 8}, rng, -2, 2);
  TensorD gain = TensorD::full({8}, 1.0);
  TensorD bias({8});
  TensorD out = layer_norm(x, gain, bias, 1e-12);
  for (int64_t t = 0; t < 16; ++t) {
    double mu = 0, var = 0;
    for (int64_t c = 0; c < 8; ++c) mu += out[t * 8 + c];
    mu /= 8;
    for (int64_t c = 0; c < 8; ++c) {
      double d = out[t * 8 + c] - mu;
      var += d * d;
    }
    var /= 8;
    CHECK(std::fabs(mu) < 1e-6);
    CHECK(std::fabs(var - 1.0) < 1e-5);
  }
}

TEST_CASE("layer_norm mismatched channels") {
  TensorD x({2, 3});
  TensorD gain({4});
  TensorD bias({4});
  CHECK_THROWS_AS(layer_norm(x, gain, bias), ShapeError);
}

TEST_CASE("layer_norm gradcheck") {
  Rng rng(41);
  auto x = random_tensor<double>({2, 3, 4}, rng, -2, 2);
  auto gain = random_tensor<double>({4}, rng, 0.5, 1.5);
  auto bias = random_tensor<double>({4}, rng);
  auto probe = random_tensor<double>({2, 3, 4}, rng);
  auto res = grad_check<double>(
      [probe](const std::vector<TensorD>& in) {
        return sum(mul(layer_norm(in[0], in[1], in[2]), probe));
      },
      {x, gain, bias});
  CHECK(res.max_rel_error < 1e-5);
}

TEST_CASE("gelu values and asymptote") {
  TensorD x({3}, {0.0, 10.0, 1.0});
  TensorD y = gelu(x);
  CHECK(y[0] == doctest::Approx(0.0));
  CHECK(std::fabs(y[1] - 10.0) < 1e-6);
  // x * Phi(x) at 1: 1 * 0.841344746...
  CHECK(y[2] == doctest::Approx(0.8413447461).epsilon(1e-9));
}

TEST_CASE("gelu gradcheck") {
  Rng rng(43);
  auto x = random_tensor<double>({3, 5}, rng, -3, 3);
  auto res = grad_check<double>(
      [](const std::vector<TensorD>& in) { return sum(gelu(in[0])); }, {x});
  CHECK(res.max_rel_error < 1e-5);
}

TEST_CASE("elementwise basics and identities") {
  Rng rng(47);
  auto a = random_tensor<double>({4, 3}, rng);
  TensorD zero({4, 3});
  TensorD sum_az = add(a, zero);
  for (int64_t i = 0; i < a.size(); ++i) CHECK(sum_az[i] == a[i]);

  // split then concat along every axis is the identity, bitwise
  for (int axis = 0; axis < 2; ++axis) {
    auto parts = split(a, axis, {1, a.dim(axis) - 1});
    TensorD roundtrip = concat<double>({parts[0], parts[1]}, axis);
    for (int64_t i = 0; i < a.size(); ++i) CHECK(roundtrip[i] == a[i]);
  }

  // reshape round trip is bitwise identity
  TensorD r = reshape(reshape(a, {3, 4}), {4, 3});
  for (int64_t i = 0; i < a.size(); ++i) CHECK(r[i] == a[i]);

  CHECK_THROWS_AS(add(a, TensorD({2, 2})), ShapeError);
}

TEST_CASE("composed expression gradcheck (a*b + mean(a))") {
  Rng rng(53);
  auto a = random_tensor<double>({3, 3}, rng);
  auto b = random_tensor<double>({3, 3}, rng);
  auto res = grad_check<double>(
      [](const std::vector<TensorD>& in) {
        return add(sum(mul(in[0], in[1])), mean(in[0]));
      },
      {a, b});
  CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("transpose and permute gradcheck") {
  Rng rng(59);
  auto a = random_tensor<double>({2, 3, 4}, rng);
  auto probe = random_tensor<double>({4, 2, 3}, rng);
  auto res = grad_check<double>(
      [probe](const std::vector<TensorD>& in) {
        return sum(mul(transpose(in[0], {2, 0, 1}), probe));
      },
      {a});
  CHECK(res.max_rel_error < 1e-6);

  TensorD m({2, 3}, {1, 2, 3, 4, 5, 6});
  TensorD mt = transpose(m);
  CHECK(mt.shape() == Shape{3, 2});
  CHECK(mt.at({0, 1}) == 4);
  CHECK(mt.at({2, 0}) == 3);
}

TEST_CASE("backward: sum gives ones, quadratic gives 2p") {
  Tape<double> tape;
  Rng rng(61);
  auto p = random_tensor<double>({3, 2}, rng);
  tape.watch(p);
  TensorD loss = sum(p);
  auto grads = tape.backward(loss);
  TensorD gp = grads.of(p);
  for (int64_t i = 0; i < gp.size(); ++i) CHECK(gp[i] == 1.0);

  Tape<double> tape2;
  auto q = random_tensor<double>({4}, rng);
  tape2.watch(q);
  TensorD loss2 = sum(mul(q, q));
  TensorD gq = tape2.backward(loss2).of(q);
  for (int64_t i = 0; i < gq.size(); ++i) CHECK(gq[i] == doctest::Approx(2 * q[i]));
}

TEST_CASE("backward: unreachable parameters get zeros") {
  Tape<double> tape;
  TensorD used = TensorD::full({2}, 3.0);
  TensorD unused = TensorD::full({5}, 1.0);
  tape.watch(used);
  tape.watch(unused);
  TensorD loss = sum(used);
  auto grads = tape.backward(loss);
  TensorD gu = grads.of(unused);
  CHECK(gu.shape() == Shape{5});
  for (int64_t i = 0; i < 5; ++i) CHECK(gu[i] == 0.0);
}

TEST_CASE("backward rejects non-scalar and off-tape losses") {
  Tape<double> tape;
  TensorD p = TensorD::full({3}, 1.0);
  tape.watch(p);
  TensorD vec = add(p, p);
  CHECK_THROWS_AS(tape.backward(vec), ShapeError);
  TensorD constant = TensorD::scalar(1.0);
  CHECK_THROWS_AS(tape.backward(constant), ShapeError);
}

TEST_CASE("grad_check on constant-like functions") {
  Rng rng(67);
  auto x = random_tensor<double>({6}, rng);
  auto res = grad_check<double>(
      [](const std::vector<TensorD>& in) { return sum(in[0]); }, {x});
  CHECK(res.max_rel_error < 1e-10);

  // sum of softmax is constant 1; both analytic and numeric gradients vanish.
  // A wide step keeps the cancellation noise of the constant f well below the
  // 1e-8 relative-error floor (there is no truncation error to trade off).
  auto res2 = grad_check<double>(
      [](const std::vector<TensorD>& in) { return sum(softmax(in[0], 0)); }, {x}, 1e-3);
  CHECK(res2.max_rel_error < 1e-4);
}

TEST_CASE("non-finite forward values raise with op name") {
  TensorD big = TensorD::full({2}, 1e308);
  CHECK_THROWS_WITH_AS(mul(big, big), doctest::Contains("mul"), NumericError);
}

TEST_CASE("sigmoid, abs, pow, clamp gradchecks") {
  Rng rng(71);
  auto x = random_tensor<double>({8}, rng, -2, 2);
  auto res = grad_check<double>(
      [](const std::vector<TensorD>& in) { return sum(sigmoid(in[0])); }, {x});
  CHECK(res.max_rel_error < 1e-6);

  auto pos = random_tensor<double>({8}, rng, 0.2, 2.0);
  auto res2 = grad_check<double>(
      [](const std::vector<TensorD>& in) { return sum(pow_scalar(in[0], 0.7)); }, {pos});
  CHECK(res2.max_rel_error < 1e-6);

  auto far = random_tensor<double>({8}, rng, 0.5, 2.0);  // away from the |x| kink
  auto res3 = grad_check<double>(
      [](const std::vector<TensorD>& in) { return sum(abs(scale(in[0], -1.0))); }, {far});
  CHECK(res3.max_rel_error < 1e-6);

  auto res4 = grad_check<double>(
      [](const std::vector<TensorD>& in) { return sum(clamp_min(in[0], 0.1)); }, {far});
  CHECK(res4.max_rel_error < 1e-6);
}

TEST_CASE("avg_pool2 forward and gradcheck") {
  TensorD x({2, 2, 1}, {1, 2, 3, 4});
  TensorD p = avg_pool2(x);
  CHECK(p.shape() == Shape{1, 1, 1});
  CHECK(p[0] == doctest::Approx(2.5));

  Rng rng(73);
  auto big = random_tensor<double>({4, 6, 2}, rng);
  auto res = grad_check<double>(
      [](const std::vector<TensorD>& in) {
        auto y = avg_pool2(in[0]);
        return sum(mul(y, y));
      },
      {big});
  CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("div with scalar broadcast gradcheck") {
  Rng rng(79);
  auto x = random_tensor<double>({5}, rng, 0.5, 2.0);
  auto tau = random_tensor<double>({1}, rng, 0.3, 0.9);
  auto res = grad_check<double>(
      [](const std::vector<TensorD>& in) { return sum(div(in[0], in[1])); }, {x, tau});
  CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("every differentiable op passes gradcheck on three random shapes") {
  Rng rng(83);
  std::vector<Shape> shapes = {{2, 3, 4}, {4, 4, 2}, {6, 2, 2}};
  for (const auto& shape : shapes) {
    auto x = random_tensor<double>(shape, rng, -2, 2);
    auto y = random_tensor<double>(shape, rng, 0.5, 1.5);
    auto res = grad_check<double>(
        [](const std::vector<TensorD>& in) {
          auto g = gelu(in[0]);
          auto s = softmax(mul(g, in[1]), 2);
          return mean(div(add(s, in[1]), in[1]));
        },
        {x, y});
    CHECK(res.max_rel_error < 1e-4);
  }
}
