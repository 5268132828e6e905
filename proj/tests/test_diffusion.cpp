#include <doctest.h>

#include <cmath>
#include <numbers>

#include "oracles.hpp"
#include "posediff/diffusion.hpp"
#include "posediff/ops.hpp"
#include "support.hpp"

using namespace posediff;
using T = Tensor<double>;

namespace {

T scalar_tensor(double v) { return T({1}, v); }

double direct_cosine_abar(std::size_t t, std::size_t T_) {
  auto f = [&](double x) { return std::pow(std::cos((x / double(T_) + 0.008) / 1.008 * std::numbers::pi / 2), 2); };
  return f(double(t)) / f(0.0);
}

}  // namespace

TEST_CASE("cosine schedule invariants") {
  const auto s = cosine_schedule(1000);
  REQUIRE(s.steps() == 1000);
  CHECK(s.alpha_bar(0) == 1.0);
  double prod = 1.0;
  bool clipped = false;
  for (std::size_t t = 1; t <= 1000; ++t) {
    CHECK(s.alpha(t) == 1.0 - s.beta(t));
    prod *= s.alpha(t);
    CHECK(std::abs(s.alpha_bar(t) - prod) < 1e-12);
    CHECK(std::abs(s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)) < 1e-12);
    CHECK(s.beta(t) > 0.0);
    CHECK(s.beta(t) <= 0.999);
    CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    if (t > 1 && !clipped) CHECK(s.beta(t) >= s.beta(t - 1));
    clipped = clipped || s.beta(t) == 0.999;
    if (!clipped) CHECK(std::abs(s.alpha_bar(t) - direct_cosine_abar(t, 1000)) < 1e-12);
  }
  CHECK(s.alpha_bar(1000) < 1e-3);
  CHECK_THROWS_AS(s.beta(0), StepOutOfRange);
  CHECK_THROWS_AS(s.beta(1001), StepOutOfRange);
}

TEST_CASE("forward marginal coefficients") {
  const auto s = NoiseSchedule::from_betas({0.75});  // abar_1 = 0.25
  CHECK(forward_marginal(scalar_tensor(2.0), 1, scalar_tensor(-1.0), s)[0] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(forward_marginal(scalar_tensor(2.0), 1, scalar_tensor(-1.0), s, ForwardNoise{true})[0] ==
        doctest::Approx(1.0 - std::sqrt(0.75)).epsilon(1e-15));

  const auto near_one = NoiseSchedule::from_betas({1e-15});
  CHECK(forward_marginal(scalar_tensor(0.7), 1, scalar_tensor(3.0), near_one)[0] == doctest::Approx(0.7).epsilon(1e-12));
  const auto near_zero = NoiseSchedule::from_betas({1.0});
  CHECK(forward_marginal(scalar_tensor(0.7), 1, scalar_tensor(3.0), near_zero)[0] == 3.0);

  CHECK_THROWS_AS(forward_marginal(T({2}), 1, T({3}), s), ShapeMismatch);
  CHECK_THROWS_AS(forward_marginal(T({2}), 2, T({2}), s), StepOutOfRange);
}

TEST_CASE("forward step limits") {
  const auto s = NoiseSchedule::from_betas({0.0, 1.0});
  CHECK(forward_step(scalar_tensor(0.4), 1, scalar_tensor(5.0), s)[0] == 0.4);
  CHECK(forward_step(scalar_tensor(0.4), 2, scalar_tensor(5.0), s)[0] == 5.0);
}

TEST_CASE("iterated forward steps match the marginal in distribution") {
  const auto s = cosine_schedule(1000);
  const std::size_t t = 300, trials = 100000;
  for (bool vp : {true, false}) {
    CAPTURE(vp);
    Rng rng(vp ? 1 : 2);
    T x({trials}, 0.8), eps({trials});
    for (std::size_t k = 1; k <= t; ++k) {
      for (auto& v : eps.data()) v = rng.normal();
      x = forward_step(x, k, eps, s, ForwardNoise{vp});
    }
    double mean = 0, var = 0;
    for (double v : x.data()) mean += v;
    mean /= double(trials);
    for (double v : x.data()) var += (v - mean) * (v - mean);
    var /= double(trials - 1);
    // expected variance of the recursion: sum_k c(1 - alpha_k)^2 prod_{j>k} alpha_j
    double expect_var = 0;
    for (std::size_t k = 1; k <= t; ++k) {
      const double ck = ForwardNoise{vp}.coefficient(1 - s.alpha(k));
      expect_var += ck * ck * s.alpha_bar(t) / s.alpha_bar(k);
    }
    const double expect_mean = std::sqrt(s.alpha_bar(t)) * 0.8;
    CHECK(std::abs(mean - expect_mean) < 3 * std::sqrt(expect_var / double(trials)));
    CHECK(std::abs(var - expect_var) < 3 * expect_var * std::sqrt(2.0 / double(trials - 1)));
    if (vp) CHECK(std::abs(expect_var - (1 - s.alpha_bar(t))) < 1e-12);
  }
}

TEST_CASE("mu from eps examples") {
  const auto s = NoiseSchedule::from_betas({1.0 - 0.36 / 0.81, 0.19});  // step 2: alpha 0.81, abar 0.36
  CHECK(s.alpha(2) == doctest::Approx(0.81).epsilon(1e-15));
  CHECK(s.alpha_bar(2) == doctest::Approx(0.36).epsilon(1e-15));
  CHECK(mu_from_eps(scalar_tensor(1.0), 2, scalar_tensor(0.5), s)[0] ==
        doctest::Approx((1 - (0.19 / 0.8) * 0.5) / 0.9).epsilon(1e-14));
  CHECK(mu_from_eps(scalar_tensor(1.3), 2, scalar_tensor(0.0), s)[0] == doctest::Approx(1.3 / 0.9).epsilon(1e-15));
  const double a1 = s.alpha(1);
  CHECK(mu_from_eps(scalar_tensor(1.0), 1, scalar_tensor(0.5), s)[0] ==
        doctest::Approx((1 - std::sqrt(1 - a1) * 0.5) / std::sqrt(a1)).epsilon(1e-14));
}

TEST_CASE("backward step noise handling") {
  const auto s = cosine_schedule(50);
  const T x = testing::random_tensor({5}, 3), e = testing::random_tensor({5}, 4), n = testing::random_tensor({5}, 5);
  const T mu7 = mu_from_eps(x, 7, e, s);
  CHECK(backward_step(x, 7, e, T({5}), s) == mu7);
  const T stepped = backward_step(x, 7, e, n, s);
  for (std::size_t i = 0; i < 5; ++i) CHECK(stepped[i] == doctest::Approx(mu7[i] + std::sqrt(s.posterior_variance(7)) * n[i]));
  CHECK(backward_step(x, 1, e, n, s) == mu_from_eps(x, 1, e, s));
  CHECK_THROWS_AS(backward_step(x, 51, e, n, s), StepOutOfRange);
  CHECK_THROWS_AS(backward_step(x, 3, T({4}), n, s), ShapeMismatch);
  CHECK(s.posterior_variance(7) ==
        doctest::Approx((1 - s.alpha_bar(6)) / (1 - s.alpha_bar(7)) * s.beta(7)).epsilon(1e-15));
}

TEST_CASE("clipped step equals the plain step when nothing is clipped") {
  const auto s = respace(cosine_schedule(1000), 50);
  const ForwardNoise vp{true};
  Rng rng(6);
  for (std::size_t t : {3u, 20u, 49u}) {
    T x0({6}), e({6}), n({6});
    for (auto& v : x0.data()) v = rng.uniform(-0.9, 0.9);
    for (auto& v : e.data()) v = rng.normal();
    for (auto& v : n.data()) v = rng.normal();
    const T xt = forward_marginal(x0, t, e, s, vp);
    const T a = backward_step(xt, t, e, n, s), b = backward_step_clipped(xt, t, e, n, s, vp);
    CHECK(testing::max_abs_diff(a, b) < 1e-12);
    CHECK(testing::max_abs_diff(predict_x0(xt, t, e, s, vp), x0) < 1e-12);
  }
  // an estimate far outside the data range is pulled back to it
  const T xt({1}, 50.0);
  const T out = backward_step_clipped(xt, 1, T({1}, 0.0), T({1}), s, vp);
  CHECK(out[0] <= 1.0 + 1e-12);
}

TEST_CASE("diffusion loss") {
  const T a = testing::random_tensor({2, 3, 4}, 7), b = testing::random_tensor({2, 3, 4}, 8);
  CHECK(diffusion_loss(Var<double>::constant(a), Var<double>::constant(a)).item() == 0.0);
  CHECK(diffusion_loss(Var<double>::constant(T({2, 3}, 1.0)), Var<double>::constant(T({2, 3}))).item() == 1.0);
  double naive = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) naive += (a[i] - b[i]) * (a[i] - b[i]);
  naive /= double(a.numel());
  CHECK(std::abs(diffusion_loss(Var<double>::constant(a), Var<double>::constant(b)).item() - naive) < 1e-12);
  CHECK_THROWS_AS(diffusion_loss(Var<double>::constant(a), Var<double>::constant(T({24}))), ShapeMismatch);
}

TEST_CASE("respacing") {
  const auto s = cosine_schedule(1000);
  const auto same = respace(s, 1000);
  for (std::size_t t = 1; t <= 1000; ++t) {
    CHECK(std::abs(same.beta(t) - s.beta(t)) < 1e-12);
    CHECK(same.original_timestep(t) == t);
  }
  const auto one = respace(s, 1);
  CHECK(one.steps() == 1);
  CHECK(one.alpha_bar(1) == s.alpha_bar(1000));
  CHECK(one.original_timestep(1) == 1000);

  const auto r = respace(s, 250);
  REQUIRE(r.steps() == 250);
  for (std::size_t k = 1; k <= 250; ++k) {
    CHECK(r.original_timestep(k) == 4 * k);
    CHECK(std::abs(r.alpha_bar(k) - s.alpha_bar(4 * k)) < 1e-12);
    CHECK(std::abs(r.alpha_bar(k) - r.alpha_bar(k - 1) * r.alpha(k)) < 1e-12);
  }
  const auto odd = respace(s, 7);
  for (std::size_t k = 1; k <= 7; ++k) CHECK(odd.original_timestep(k) == (k * 1000) / 7);
  CHECK_THROWS_AS(respace(s, 0), StepOutOfRange);
  CHECK_THROWS_AS(respace(s, 1001), StepOutOfRange);
}

TEST_CASE("backward chains with the analytic predictor reproduce Gaussian data") {
  const double m = 0.3, sd = 0.5;
  const std::size_t chains = 4000;
  const auto got = oracle::gaussian_chains(m, sd, chains, 250, 11);
  CHECK(std::abs(got.mean - m) < 4 * sd / std::sqrt(double(chains)));
  CHECK(std::abs(got.variance - sd * sd) < 0.1 * sd * sd);
}

TEST_CASE("identical inputs give identical trajectories") {
  const auto s = respace(cosine_schedule(1000), 20);
  auto run = [&] {
    Rng rng(12);
    T x = testing::random_tensor({8}, 13);
    for (std::size_t t = 20; t >= 1; --t) {
      T e({8}), n({8});
      for (std::size_t i = 0; i < 8; ++i) {
        e[i] = std::tanh(x[i]);
        n[i] = rng.normal();
      }
      x = backward_step(x, t, e, n, s);
    }
    return x;
  };
  CHECK(run() == run());
}

TEST_CASE("sampler config validation") {
  SamplerConfig c;
  CHECK_NOTHROW(c.validate(1000));
  c.refresh_tail = 251;
  CHECK_THROWS_AS(c.validate(1000), InvalidConfig);
  c.refresh_tail = 100;
  c.inference_steps = 1001;
  CHECK_THROWS_AS(c.validate(1000), InvalidConfig);
  c.inference_steps = 0;
  CHECK_THROWS_AS(c.validate(1000), InvalidConfig);
}
