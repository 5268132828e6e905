#include <doctest.h>

#include <cmath>
#include <functional>
#include <string>
#ifdef _OPENMP
#include <omp.h>
#endif

#include "posediff/autograd.hpp"
#include "posediff/ops.hpp"
#include "posediff/optim.hpp"
#include "support.hpp"

using namespace posediff;
using testing::random_tensor;
using V = Var<double>;
using T = Tensor<double>;

namespace {

constexpr double kStep = 1e-6;
constexpr double kPrimitiveTol = 1e-5;

V c(const T& t) { return V::constant(t); }

// naive references

T naive_matmul(const T& a, const T& b) {
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  T out({M, N});
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < K; ++k) s += a[i * K + k] * b[k * N + j];
      out[i * N + j] = s;
    }
  return out;
}

T naive_conv(const T& x, const T& w, const T* bias, std::size_t stride, std::size_t pad) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t oh = (H + 2 * pad - kh) / stride + 1, ow = (W + 2 * pad - kw) / stride + 1;
  T out({N, O, oh, ow});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          double s = bias ? (*bias)[o] : 0.0;
          for (std::size_t ci = 0; ci < C; ++ci)
            for (std::size_t dy = 0; dy < kh; ++dy)
              for (std::size_t dx = 0; dx < kw; ++dx) {
                const long iy = long(y * stride + dy) - long(pad), ix = long(xx * stride + dx) - long(pad);
                if (iy < 0 || ix < 0 || iy >= long(H) || ix >= long(W)) continue;
                s += x[((n * C + ci) * H + iy) * W + ix] * w[((o * C + ci) * kh + dy) * kw + dx];
              }
          out[((n * O + o) * oh + y) * ow + xx] = s;
        }
  return out;
}

double bilinear_at(const T& x, std::size_t plane, double sy, double sx) {
  const std::size_t H = x.dim(2), W = x.dim(3);
  sy = std::clamp(sy, 0.0, double(H - 1));
  sx = std::clamp(sx, 0.0, double(W - 1));
  const auto y0 = std::size_t(std::floor(sy)), x0 = std::size_t(std::floor(sx));
  const std::size_t y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
  const double fy = sy - double(y0), fx = sx - double(x0);
  auto at = [&](std::size_t yy, std::size_t xx) { return x[plane * H * W + yy * W + xx]; };
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
}

}  // namespace

TEST_CASE("matmul against identity and a triple loop") {
  const T a = random_tensor({3, 5}, 1);
  T eye({3, 3});
  for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1;
  CHECK(ops::matmul(c(eye), c(a)).value() == a);

  const T b = random_tensor({5, 4}, 2);
  CHECK(testing::max_abs_diff(ops::matmul(c(a), c(b)).value(), naive_matmul(a, b)) < 1e-14);

  const T ba = random_tensor({2, 3, 5}, 3), bb = random_tensor({2, 5, 4}, 4);
  const T out = ops::matmul(c(ba), c(bb)).value();
  for (std::size_t n = 0; n < 2; ++n) {
    T an({3, 5}), bn({5, 4});
    std::copy_n(ba.raw() + n * 15, 15, an.raw());
    std::copy_n(bb.raw() + n * 20, 20, bn.raw());
    const T ref = naive_matmul(an, bn);
    for (std::size_t i = 0; i < 12; ++i) CHECK(std::abs(out[n * 12 + i] - ref[i]) < 1e-14);
  }
}

TEST_CASE("softmax of equal logits is uniform and rows sum to one") {
  const auto s = ops::softmax(c(T({1, 3}, 0.0)), 1).value();
  for (int i = 0; i < 3; ++i) CHECK(s[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  const auto r = ops::softmax(c(random_tensor({4, 7}, 5, -20, 20)), 1).value();
  for (std::size_t i = 0; i < 4; ++i) {
    double sum = 0;
    for (std::size_t j = 0; j < 7; ++j) sum += r[i * 7 + j];
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("conv2d impulse response reproduces the kernel") {
  T x({1, 1, 7, 7});
  x[3 * 7 + 3] = 1.0;
  const T k = random_tensor({1, 1, 3, 3}, 6);
  const auto y = ops::conv2d(c(x), c(k), V(), 1, 1).value();
  // correlation: output at (3+1-dy, 3+1-dx) picks k(dy, dx)
  for (std::size_t dy = 0; dy < 3; ++dy)
    for (std::size_t dx = 0; dx < 3; ++dx) CHECK(y[(4 - dy) * 7 + (4 - dx)] == k[dy * 3 + dx]);
}

TEST_CASE("conv2d matches direct loops for strides and padding") {
  const T x = random_tensor({2, 3, 6, 5}, 7), w = random_tensor({4, 3, 3, 3}, 8), b = random_tensor({4}, 9);
  for (std::size_t stride : {1u, 2u})
    for (std::size_t pad : {0u, 1u}) {
      const auto y = ops::conv2d(c(x), c(w), c(b), stride, pad).value();
      CHECK(testing::max_abs_diff(y, naive_conv(x, w, &b, stride, pad)) < 1e-13);
    }
}

TEST_CASE("bilinear resize matches per-pixel interpolation") {
  const T x = random_tensor({1, 2, 4, 6}, 10);
  for (auto [oh, ow] : {std::pair<std::size_t, std::size_t>{8, 12}, {2, 3}, {5, 7}}) {
    const auto y = ops::bilinear_resize(c(x), oh, ow).value();
    for (std::size_t p = 0; p < 2; ++p)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const double sy = (oy + 0.5) * 4.0 / double(oh) - 0.5, sx = (ox + 0.5) * 6.0 / double(ow) - 0.5;
          CHECK(std::abs(y[(p * oh + oy) * ow + ox] - bilinear_at(x, p, sy, sx)) < 1e-14);
        }
  }
}

TEST_CASE("group norm matches a direct evaluation") {
  const T x = random_tensor({2, 4, 3, 3}, 11), g = random_tensor({4}, 12), b = random_tensor({4}, 13);
  const auto y = ops::group_norm(c(x), 2, c(g), c(b)).value();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t grp = 0; grp < 2; ++grp) {
      double mu = 0, var = 0;
      for (std::size_t i = 0; i < 18; ++i) mu += x[(n * 4 + grp * 2) * 9 + i];
      mu /= 18;
      for (std::size_t i = 0; i < 18; ++i) var += std::pow(x[(n * 4 + grp * 2) * 9 + i] - mu, 2);
      var /= 18;
      for (std::size_t i = 0; i < 18; ++i) {
        const std::size_t at = (n * 4 + grp * 2) * 9 + i, ch = grp * 2 + i / 9;
        CHECK(std::abs(y[at] - ((x[at] - mu) / std::sqrt(var + 1e-5) * g[ch] + b[ch])) < 1e-12);
      }
    }
}

TEST_CASE("shape errors name both shapes") {
  try {
    ops::matmul(c(T({2, 3})), c(T({4, 5})));
    FAIL("expected ShapeMismatch");
  } catch (const ShapeMismatch& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,5]") != std::string::npos);
  }
  CHECK_THROWS_AS(ops::add(c(T({2, 3})), c(T({3, 2}))), ShapeMismatch);
  CHECK_THROWS_AS(ops::conv2d(c(T({1, 2, 4, 4})), c(T({1, 3, 3, 3})), V(), 1, 1), ShapeMismatch);
  CHECK_THROWS_AS(T({2, 2}, std::vector<double>{1, 2, 3}), ShapeMismatch);
}

TEST_CASE("reshape and transpose round trips are bit-identical") {
  const T x = random_tensor({2, 3, 4}, 14);
  CHECK(ops::reshape(ops::reshape(c(x), {6, 4}), {2, 3, 4}).value() == x);
  CHECK(ops::transpose(ops::transpose(c(x), 0, 2), 0, 2).value() == x);
  CHECK(ops::permute(ops::permute(c(x), {2, 0, 1}), {1, 2, 0}).value() == x);
}

TEST_CASE("backward of simple losses") {
  auto x = V::parameter(random_tensor({3, 4}, 15));
  backward(ops::sum(x));
  for (double g : x.grad().data()) CHECK(g == 1.0);

  auto y = V::parameter(random_tensor({3, 4}, 16));
  backward(ops::sum(ops::mul(y, y)));
  for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y.grad()[i] == doctest::Approx(2 * y.value()[i]).epsilon(1e-15));

  CHECK_THROWS_AS(backward(ops::mul(x, x)), NotScalar);
  CHECK_THROWS_AS(backward(ops::sum(c(T({2}, 1.0)))), DisconnectedLoss);
}

TEST_CASE("tape records replay in reverse registration order") {
  auto x = V::parameter(random_tensor({2, 2}, 17));
  auto a = ops::silu(x);
  auto b = ops::mul(a, x);
  auto loss = ops::sum(ops::add(b, a));
  Tape<double> tape(loss);
  const auto& recs = tape.records();
  REQUIRE(recs.size() == 4);
  for (std::size_t i = 1; i < recs.size(); ++i) CHECK(recs[i - 1]->seq < recs[i]->seq);
  CHECK(std::string(recs.front()->op) == "silu");
  CHECK(std::string(recs.back()->op) == "sum");
}

TEST_CASE("no-grad guard stops recording") {
  auto x = V::parameter(random_tensor({2}, 18));
  NoGradGuard ng;
  CHECK_FALSE(ops::mul(x, x).requires_grad());
}

TEST_CASE("finite differences: identity and softmax") {
  CHECK(finite_diff_check([](const V& v) { return v; }, random_tensor({3, 3}, 19), kStep) < 1e-10);
  CHECK(finite_diff_check([](const V& v) { return ops::softmax(v, 1); }, random_tensor({3, 5}, 20), kStep) < 1e-6);
}

TEST_CASE("finite differences: every primitive") {
  struct Case {
    const char* name;
    std::function<V(const V&)> f;
    T x;
  };
  const T other = random_tensor({3, 4}, 21);
  const T row = random_tensor({1, 4}, 22);
  const T rhs = random_tensor({4, 2}, 23);
  const T lhs = random_tensor({2, 3}, 24);
  const T brhs = random_tensor({2, 4, 3}, 25);
  const T kernel = random_tensor({3, 2, 3, 3}, 26);
  const T img = random_tensor({2, 2, 5, 5}, 27);
  const T gamma = random_tensor({4}, 28, 0.5, 1.5), beta = random_tensor({4}, 29);
  const T gn_in = random_tensor({2, 4, 3, 3}, 30);

  const std::vector<Case> cases = {
      {"add", [&](const V& v) { return ops::add(v, c(other)); }, random_tensor({3, 4}, 31)},
      {"add broadcast rhs", [&](const V& v) { return ops::add(c(other), v); }, row},
      {"sub", [&](const V& v) { return ops::sub(c(other), v); }, random_tensor({3, 4}, 32)},
      {"mul", [&](const V& v) { return ops::mul(v, c(other)); }, random_tensor({3, 4}, 33)},
      {"mul broadcast rhs", [&](const V& v) { return ops::mul(c(other), v); }, row},
      {"mul self", [](const V& v) { return ops::mul(v, v); }, random_tensor({3, 4}, 34)},
      {"scale", [](const V& v) { return ops::scale(v, 1.7); }, random_tensor({3, 4}, 35)},
      {"matmul lhs", [&](const V& v) { return ops::matmul(v, c(rhs)); }, random_tensor({3, 4}, 36)},
      {"matmul rhs", [&](const V& v) { return ops::matmul(c(lhs), v); }, random_tensor({3, 5}, 37)},
      {"batched matmul lhs", [&](const V& v) { return ops::matmul(v, c(brhs)); }, random_tensor({2, 3, 4}, 38)},
      {"batched matmul rhs", [&](const V& v) { return ops::matmul(c(random_tensor({2, 3, 4}, 39)), v); }, brhs},
      {"shared matmul rhs", [&](const V& v) { return ops::matmul(c(random_tensor({2, 3, 4}, 40)), v); }, rhs},
      {"reshape", [](const V& v) { return ops::reshape(v, {2, 6}); }, random_tensor({3, 4}, 41)},
      {"permute", [](const V& v) { return ops::permute(v, {2, 0, 1}); }, random_tensor({2, 3, 4}, 42)},
      {"transpose", [](const V& v) { return ops::transpose(v, 0, 1); }, random_tensor({3, 4}, 43)},
      {"softmax last", [](const V& v) { return ops::softmax(v, 2); }, random_tensor({2, 3, 4}, 44)},
      {"softmax middle", [](const V& v) { return ops::softmax(v, 1); }, random_tensor({2, 3, 4}, 45)},
      {"conv2d input", [&](const V& v) { return ops::conv2d(v, c(kernel), V(), 1, 1); }, img},
      {"conv2d kernel", [&](const V& v) { return ops::conv2d(c(img), v, V(), 2, 1); }, kernel},
      {"conv2d bias", [&](const V& v) { return ops::conv2d(c(img), c(kernel), v, 1, 0); }, random_tensor({3}, 46)},
      {"bilinear up", [](const V& v) { return ops::bilinear_resize(v, 10, 7); }, img},
      {"bilinear down", [](const V& v) { return ops::bilinear_resize(v, 2, 3); }, img},
      {"group_norm input", [&](const V& v) { return ops::group_norm(v, 2, c(gamma), c(beta)); }, gn_in},
      {"group_norm gamma", [&](const V& v) { return ops::group_norm(c(gn_in), 2, v, c(beta)); }, gamma},
      {"group_norm beta", [&](const V& v) { return ops::group_norm(c(gn_in), 4, c(gamma), v); }, beta},
      {"silu", [](const V& v) { return ops::silu(v); }, random_tensor({3, 4}, 47, -4, 4)},
      {"concat", [&](const V& v) { return ops::concat(std::vector<V>{c(other), v, c(other)}, 1); }, random_tensor({3, 2}, 48)},
      {"slice", [](const V& v) { return ops::slice(v, 1, 1, 3); }, random_tensor({3, 4}, 49)},
      {"sum", [](const V& v) { return ops::sum(v); }, random_tensor({3, 4}, 50)},
      {"mean", [](const V& v) { return ops::mean(v); }, random_tensor({3, 4}, 51)},
  };
  for (const auto& k : cases) {
    CAPTURE(k.name);
    CHECK(finite_diff_check(k.f, k.x, kStep) < kPrimitiveTol);
  }
}

TEST_CASE("finite differences: three-layer composite") {
  const T w1 = random_tensor({4, 6}, 52), w2 = random_tensor({6, 5}, 53), w3 = random_tensor({5, 3}, 54);
  auto net = [&](const V& x) {
    auto h = ops::silu(ops::matmul(x, c(w1)));
    h = ops::softmax(ops::matmul(h, c(w2)), 1);
    return ops::matmul(h, c(w3));
  };
  CHECK(finite_diff_check(net, random_tensor({3, 4}, 55), kStep) < kPrimitiveTol);
}

TEST_CASE("forward results do not depend on the thread count") {
#ifdef _OPENMP
  const T x = random_tensor({4, 16, 16, 16}, 56), w = random_tensor({16, 16, 3, 3}, 57);
  const T g = random_tensor({16}, 58), b = random_tensor({16}, 59);
  auto run = [&] {
    auto y = ops::conv2d(c(x), c(w), V(), 1, 1);
    y = ops::group_norm(y, 4, c(g), c(b));
    return ops::matmul(ops::reshape(y, {64, 256}), c(random_tensor({256, 8}, 60))).value();
  };
  const int before = omp_get_max_threads();
  omp_set_num_threads(1);
  const T one = run();
  omp_set_num_threads(4);
  const T four = run();
  omp_set_num_threads(before);
  CHECK(one == four);
#endif
}

TEST_CASE("adam: zero gradient leaves parameters and decays moments") {
  T p = random_tensor({5}, 61);
  const T before = p;
  AdamMoments<double> st{T({5}, 0.3), T({5}, 0.2)};
  adam_step(p, T({5}, 0.0), st, 1, AdamHyper{});
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(st.m[i] == doctest::Approx(0.27));
    CHECK(st.v[i] == doctest::Approx(0.2 * 0.999));
  }
  // nonzero moments still move p; with zero moments p stays fixed
  T q = before;
  AdamMoments<double> zero;
  adam_step(q, T({5}, 0.0), zero, 1, AdamHyper{});
  CHECK(q == before);
}

TEST_CASE("adam: single step from zero state") {
  const AdamHyper h{1e-3, 0.9, 0.999, 1e-8};
  T p({3}, std::vector<double>{1.0, -2.0, 0.5});
  const T g({3}, std::vector<double>{0.4, -3.0, 1e-9});
  AdamMoments<double> st;
  adam_step(p, g, st, 1, h);
  // bias-corrected m = g and v = g^2, so the step is lr g / (|g| + eps)
  const double expect[3] = {1.0 - 1e-3 * 0.4 / (0.4 + 1e-8), -2.0 + 1e-3 * 3.0 / (3.0 + 1e-8),
                            0.5 - 1e-3 * 1e-9 / (1e-9 + 1e-8)};
  for (int i = 0; i < 3; ++i) CHECK(p[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("adam: constant gradient settles to lr-sized steps") {
  const AdamHyper h{1e-2, 0.9, 0.999, 1e-8};
  T p({2}, 0.0);
  AdamMoments<double> st;
  T prev = p;
  for (int s = 1; s <= 500; ++s) {
    prev = p;
    adam_step(p, T({2}, std::vector<double>{2.5, -0.01}), st, s, h);
  }
  CHECK(std::abs(p[0] - prev[0]) == doctest::Approx(1e-2).epsilon(1e-6));
  CHECK(p[0] - prev[0] < 0);
  CHECK(std::abs(p[1] - prev[1]) == doctest::Approx(1e-2).epsilon(1e-5));
  CHECK(p[1] - prev[1] > 0);

  AdamMoments<double> bad;
  T wrong({3});
  CHECK_THROWS_AS(adam_step(p, wrong, bad, 1, h), ShapeMismatch);
}

TEST_CASE("adam optimizer clears gradients after a step") {
  auto x = V::parameter(T({2}, 1.0));
  Adam<double> opt({x}, AdamHyper{0.1});
  backward(ops::sum(ops::mul(x, x)));
  opt.step();
  CHECK(opt.steps_taken() == 1);
  CHECK(x.value()[0] == doctest::Approx(0.9));
  CHECK_FALSE(x.has_grad());
}
