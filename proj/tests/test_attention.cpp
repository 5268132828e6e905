#include <doctest.h>

#include <cmath>
#include <vector>

#include "posediff/attention.hpp"
#include "posediff/ops.hpp"
#include "support.hpp"

using namespace posediff;
using testing::random_tensor;
using V = Var<double>;
using T = Tensor<double>;

namespace {

V c(const T& t) { return V::constant(t); }

AttentionParams<double> params(std::size_t channels, std::size_t head_channels, std::uint64_t seed) {
  Rng rng(seed);
  auto p = make_attention_params<double>(channels, head_channels, rng);
  // nonzero output projection so every path is visible
  p.wo = V::parameter(random_tensor({channels, channels}, seed + 1));
  return p;
}

// Dense evaluation of softmax((q k^T / sqrt(d)) * E) v followed by the output projection.
// E may be null (plain attention). Returns (N, C, H, W).
T dense_attention(const T& tgt, const T& src, const T* E, const AttentionParams<double>& p) {
  const std::size_t N = tgt.dim(0), C = tgt.dim(1), L = tgt.dim(2) * tgt.dim(3);
  const std::size_t heads = p.heads, d = p.head_channels;
  const T &wq = p.wq.value(), &wk = p.wk.value(), &wv = p.wv.value(), &wo = p.wo.value();
  T out({N, C, tgt.dim(2), tgt.dim(3)});
  for (std::size_t n = 0; n < N; ++n) {
    auto feat = [&](const T& x, std::size_t l, std::size_t ch) { return x[(n * C + ch) * L + l]; };
    auto proj = [&](const T& x, const T& w, std::size_t l, std::size_t j) {
      double s = 0;
      for (std::size_t ch = 0; ch < C; ++ch) s += feat(x, l, ch) * w[ch * C + j];
      return s;
    };
    std::vector<double> mixed(L * C, 0.0);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < L; ++i) {
        std::vector<double> logit(L);
        for (std::size_t j = 0; j < L; ++j) {
          double s = 0;
          for (std::size_t e = 0; e < d; ++e) s += proj(tgt, wq, i, h * d + e) * proj(src, wk, j, h * d + e);
          s /= std::sqrt(double(d));
          if (E) s *= (*E)[(E->dim(0) == 1 ? 0 : n) * L * L + i * L + j];
          logit[j] = s;
        }
        const double mx = *std::max_element(logit.begin(), logit.end());
        double z = 0;
        for (double& v : logit) z += (v = std::exp(v - mx));
        for (std::size_t e = 0; e < d; ++e) {
          double s = 0;
          for (std::size_t j = 0; j < L; ++j) s += logit[j] / z * proj(src, wv, j, h * d + e);
          mixed[i * C + h * d + e] = s;
        }
      }
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < C; ++j) {
        double s = 0;
        for (std::size_t ch = 0; ch < C; ++ch) s += mixed[i * C + ch] * wo[ch * C + j];
        out[(n * C + j) * L + i] = s;
      }
  }
  return out;
}

}  // namespace

TEST_CASE("spatially constant source gives a spatially constant output") {
  const auto p = params(4, 2, 1);
  T src({1, 4, 3, 3});
  for (std::size_t ch = 0; ch < 4; ++ch)
    for (std::size_t i = 0; i < 9; ++i) src[ch * 9 + i] = 0.3 * double(ch) - 0.4;
  const auto out = cross_view_attention(c(random_tensor({1, 4, 3, 3}, 2)), c(src), p).value();
  for (std::size_t ch = 0; ch < 4; ++ch)
    for (std::size_t i = 1; i < 9; ++i) CHECK(std::abs(out[ch * 9 + i] - out[ch * 9]) < 1e-14);
}

TEST_CASE("a single pixel attends to itself with weight one") {
  const auto p = params(4, 4, 3);
  const T x = random_tensor({2, 4, 1, 1}, 4);
  AttentionTrace<double> tr;
  const auto out = self_attention(c(x), p, &tr).value();
  for (double v : tr.probabilities.value().data()) CHECK(v == 1.0);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t j = 0; j < 4; ++j) {
      double s = 0;
      for (std::size_t a = 0; a < 4; ++a)
        for (std::size_t b = 0; b < 4; ++b) s += x[n * 4 + a] * p.wv.value()[a * 4 + b] * p.wo.value()[b * 4 + j];
      CHECK(out[n * 4 + j] == doctest::Approx(s).epsilon(1e-13));
    }
}

TEST_CASE("hand-set 2x2 attention") {
  AttentionParams<double> p;
  p.heads = 1;
  p.head_channels = 2;
  T eye({2, 2});
  eye[0] = eye[3] = 1;
  p.wq = p.wk = p.wv = p.wo = c(eye);
  // target tokens t_i and source tokens s_j as (C=2, H=2, W=2) maps
  T tgt({1, 2, 2, 2}, std::vector<double>{1, 0, 0, 1, 0, 1, 0, 1});
  T src({1, 2, 2, 2}, std::vector<double>{2, 0, 1, 0, 0, 2, 1, 0});
  const auto out = cross_view_attention(c(tgt), c(src), p).value();
  const double s[4][2] = {{2, 0}, {0, 2}, {1, 1}, {0, 0}};
  const double t[4][2] = {{1, 0}, {0, 1}, {0, 0}, {1, 1}};
  for (int i = 0; i < 4; ++i) {
    double w[4], z = 0;
    for (int j = 0; j < 4; ++j) z += (w[j] = std::exp((t[i][0] * s[j][0] + t[i][1] * s[j][1]) / std::sqrt(2.0)));
    for (int ch = 0; ch < 2; ++ch) {
      double v = 0;
      for (int j = 0; j < 4; ++j) v += w[j] / z * s[j][ch];
      CHECK(out[ch * 4 + i] == doctest::Approx(v).epsilon(1e-14));
    }
  }
}

TEST_CASE("all-ones weights reproduce cross-view attention bit for bit") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto p = params(8, 4, 100 + seed);
    const T tgt = random_tensor({2, 8, 3, 2}, 200 + seed, -3, 3), src = random_tensor({2, 8, 3, 2}, 300 + seed, -3, 3);
    const auto plain = cross_view_attention(c(tgt), c(src), p).value();
    const auto ones = geometry::EpipolarWeightMatrix::ones(3, 2);
    CHECK(epipolar_attention(c(tgt), c(src), ones, p).value() == plain);
    CHECK(epipolar_attention(c(tgt), c(src), c(T({2, 6, 6}, 1.0)), p).value() == plain);
  }
}

TEST_CASE("epipolar attention matches dense evaluation") {
  const auto p = params(4, 2, 5);
  const T tgt = random_tensor({2, 4, 2, 2}, 6), src = random_tensor({2, 4, 2, 2}, 7);
  const T E = random_tensor({2, 4, 4}, 8, 0, 1);
  const auto out = epipolar_attention(c(tgt), c(src), c(E), p).value();
  CHECK(testing::max_abs_diff(out, dense_attention(tgt, src, &E, p)) < 1e-12);

  const T shared = random_tensor({1, 4, 4}, 9, 0, 1);
  const auto out1 = epipolar_attention(c(tgt), c(src), c(shared), p).value();
  CHECK(testing::max_abs_diff(out1, dense_attention(tgt, src, &shared, p)) < 1e-12);
}

TEST_CASE("one-hot weight rows keep one logit and zero the rest") {
  const auto p = params(4, 4, 10);
  const T tgt = random_tensor({1, 4, 2, 2}, 11, -4, 4), src = random_tensor({1, 4, 2, 2}, 12, -4, 4);
  T E({1, 4, 4});
  for (std::size_t i = 0; i < 4; ++i) E[i * 4 + (i + 1) % 4] = 1.0;
  AttentionTrace<double> tr;
  const auto out = epipolar_attention(c(tgt), c(src), c(E), p, &tr).value();
  CHECK(testing::max_abs_diff(out, dense_attention(tgt, src, &E, p)) < 1e-12);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      if (j != (i + 1) % 4) CHECK(tr.logits.value()[i * 4 + j] == 0.0);
}

TEST_CASE("self attention matches dense evaluation and is permutation equivariant") {
  const auto p = params(6, 3, 13);
  const T x = random_tensor({1, 6, 3, 3}, 14);
  const auto out = self_attention(c(x), p).value();
  CHECK(testing::max_abs_diff(out, dense_attention(x, x, nullptr, p)) < 1e-12);

  const std::vector<std::size_t> perm = {4, 0, 8, 2, 6, 1, 3, 7, 5};
  T xp({1, 6, 3, 3});
  for (std::size_t ch = 0; ch < 6; ++ch)
    for (std::size_t i = 0; i < 9; ++i) xp[ch * 9 + i] = x[ch * 9 + perm[i]];
  const auto outp = self_attention(c(xp), p).value();
  for (std::size_t ch = 0; ch < 6; ++ch)
    for (std::size_t i = 0; i < 9; ++i) CHECK(std::abs(outp[ch * 9 + i] - out[ch * 9 + perm[i]]) < 1e-12);
}

TEST_CASE("attention probabilities are row-stochastic") {
  const auto p = params(8, 4, 15);
  const T tgt = random_tensor({2, 8, 3, 3}, 16, -5, 5), src = random_tensor({2, 8, 3, 3}, 17, -5, 5);
  AttentionTrace<double> plain, epi;
  cross_view_attention(c(tgt), c(src), p, &plain);
  epipolar_attention(c(tgt), c(src), c(random_tensor({2, 9, 9}, 18, 0, 1)), p, &epi);
  for (const auto* tr : {&plain, &epi}) {
    const auto& P = tr->probabilities.value();
    for (std::size_t r = 0; r < P.numel() / 9; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 9; ++j) s += P[r * 9 + j];
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("scaling the weights keeps the arg-max for nonnegative affinities") {
  AttentionParams<double> p;
  p.heads = 1;
  p.head_channels = 3;
  p.wq = c(random_tensor({3, 3}, 19, 0, 1));
  p.wk = c(random_tensor({3, 3}, 20, 0, 1));
  p.wv = c(random_tensor({3, 3}, 21));
  p.wo = c(random_tensor({3, 3}, 22));
  const T tgt = random_tensor({1, 3, 2, 3}, 23, 0, 1), src = random_tensor({1, 3, 2, 3}, 24, 0, 1);
  const T E = random_tensor({1, 6, 6}, 25, 0, 1);
  T E3 = E;
  for (auto& v : E3.data()) v *= 3.7;
  AttentionTrace<double> a, b;
  epipolar_attention(c(tgt), c(src), c(E), p, &a);
  epipolar_attention(c(tgt), c(src), c(E3), p, &b);
  for (std::size_t i = 0; i < 6; ++i) {
    const auto pa = a.probabilities.value().data().subspan(i * 6, 6), pb = b.probabilities.value().data().subspan(i * 6, 6);
    CHECK(std::max_element(pa.begin(), pa.end()) - pa.begin() == std::max_element(pb.begin(), pb.end()) - pb.begin());
  }
}

TEST_CASE("epipolar attention gradients pass finite differences") {
  const auto p = params(4, 2, 26);
  const T tgt = random_tensor({2, 4, 2, 3}, 27), src = random_tensor({2, 4, 2, 3}, 28);
  const V E = c(random_tensor({2, 6, 6}, 29, 0, 1));
  auto with = [&](const V& t, const V& s, const AttentionParams<double>& q) { return epipolar_attention(t, s, E, q); };
  CHECK(finite_diff_check([&](const V& v) { return with(v, c(src), p); }, tgt, 1e-6) < 1e-4);
  CHECK(finite_diff_check([&](const V& v) { return with(c(tgt), v, p); }, src, 1e-6) < 1e-4);
  for (int which = 0; which < 4; ++which) {
    CAPTURE(which);
    auto f = [&](const V& v) {
      auto q = p;
      (which == 0 ? q.wq : which == 1 ? q.wk : which == 2 ? q.wv : q.wo) = v;
      return with(c(tgt), c(src), q);
    };
    const V& base = which == 0 ? p.wq : which == 1 ? p.wk : which == 2 ? p.wv : p.wo;
    CHECK(finite_diff_check(f, base.value(), 1e-6) < 1e-4);
  }
}

TEST_CASE("attention shape checks") {
  const auto p = params(4, 2, 30);
  const T a = random_tensor({1, 4, 2, 2}, 31);
  CHECK_THROWS_AS(cross_view_attention(c(a), c(random_tensor({1, 4, 2, 3}, 32)), p), ShapeMismatch);
  CHECK_THROWS_AS(epipolar_attention(c(a), c(a), c(T({1, 3, 3}, 1.0)), p), ShapeMismatch);
  CHECK_THROWS_AS(epipolar_attention(c(a), c(a), geometry::EpipolarWeightMatrix::ones(3, 3), p), ShapeMismatch);
  CHECK_THROWS_AS(self_attention(c(random_tensor({1, 6, 2, 2}, 33)), p), ShapeMismatch);
  Rng rng(1);
  CHECK_THROWS_AS(make_attention_params<double>(6, 4, rng), InvalidConfig);
  auto bad = p;
  bad.wq = c(T({4, 3}));
  CHECK_THROWS_AS(bad.validate(), InvalidConfig);
}

TEST_CASE("zero output projection starts as a zero map") {
  Rng rng(2);
  const auto p = make_attention_params<double>(4, 2, rng, true);
  const auto out = self_attention(c(random_tensor({1, 4, 2, 2}, 34)), p).value();
  for (double v : out.data()) CHECK(v == 0.0);
}
