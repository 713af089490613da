#include <cmath>
#include <stdexcept>

#include "chguide/schedule.hpp"
#include "doctest.h"
#include "oracles/oracles.hpp"

using chg::build_linear_schedule;

TEST_CASE("linear schedule endpoints match the step-size formula") {
  const auto s = build_linear_schedule(1000, 1e-4, 0.02);
  CHECK(s.steps() == 1000);
  CHECK(s.beta(0) == doctest::Approx(1e-4).epsilon(1e-14));
  CHECK(s.beta(999) == doctest::Approx(0.02).epsilon(1e-14));
  CHECK(s.step_size_into(1) == s.beta(0));
}

TEST_CASE("two half steps give alpha_bar 0.5 and 0.25") {
  const auto s = build_linear_schedule(2, 0.5, 0.5);
  CHECK(s.alpha_bar(0) == 1.0);
  CHECK(s.alpha_bar(1) == doctest::Approx(0.5));
  CHECK(s.alpha_bar(2) == doctest::Approx(0.25));
  CHECK(s.time(2) == doctest::Approx(1.0));
}

TEST_CASE("derived fields agree with an extended-precision recomputation") {
  const auto s = build_linear_schedule(1000, 1e-4, 0.015);
  const auto ref = oracle::linear_schedule(1000, 1e-4, 0.015);
  for (int i = 0; i <= 1000; ++i) {
    const auto& r = ref[static_cast<std::size_t>(i)];
    CHECK(s.alpha_bar(i) == doctest::Approx(static_cast<double>(r.alpha_bar)).epsilon(1e-12));
    CHECK(s.time(i) == doctest::Approx(static_cast<double>(r.time)).epsilon(1e-12));
  }
}

TEST_CASE("alpha_bar / exp(-t) follows the second-order expansion in beta") {
  // log alpha_bar + t = -sum beta^2 / 2 - sum beta^3 / 3 - sum beta^4 / 4 - ...
  const int n = 1000;
  const double b1 = 1e-4;
  const double b2 = 0.015;
  const auto s = build_linear_schedule(n, b1, b2);
  long double sq = 0.0L;
  long double cube = 0.0L;
  long double quart = 0.0L;
  for (int i = 0; i <= n; ++i) {
    const double ratio = s.alpha_bar(i) / std::exp(-s.time(i));
    const double predicted = static_cast<double>(std::exp(-sq / 2.0L - cube / 3.0L - quart / 4.0L));
    CHECK(ratio == doctest::Approx(predicted).epsilon(1e-6));
    CHECK(ratio <= 1.0);
    if (i < n) {
      const long double beta = b1 + static_cast<long double>(i) * (b2 - b1) / (n - 1);
      sq += beta * beta;
      cube += beta * beta * beta;
      quart += beta * beta * beta * beta;
    }
  }
}

TEST_CASE("sigma squared plus alpha_bar is one") {
  for (int n : {2, 10, 500, 1000}) {
    const auto s = build_linear_schedule(n, 1e-4, 0.02);
    for (int i = 0; i <= n; ++i) {
      CHECK(s.sigma(i) * s.sigma(i) + s.alpha_bar(i) == doctest::Approx(1.0).epsilon(1e-15));
    }
  }
}

TEST_CASE("refining the step count at fixed total time shrinks the exponential gap") {
  // Fixed total time T = 5 with constant steps beta = T / n.
  double previous = INFINITY;
  for (int n : {50, 100, 200, 400, 800, 1600}) {
    const double beta = 5.0 / n;
    const auto s = build_linear_schedule(n, beta, beta);
    double gap = 0.0;
    for (int i = 0; i <= n; ++i) {
      const double expo = std::exp(-s.time(i));
      gap = std::max(gap, std::abs(s.alpha_bar(i) - expo) / expo);
    }
    CHECK(gap < previous);
    previous = gap;
  }
}

TEST_CASE("sigma_of_time") {
  CHECK(chg::sigma_of_time(0.0) == 0.0);
  CHECK(chg::sigma_of_time(50.0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(chg::sigma_of_time(std::log(4.0 / 3.0)) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK_THROWS_AS(chg::sigma_of_time(-1e-9), std::invalid_argument);
  const auto level = chg::NoiseLevel::at_time(0.7);
  CHECK(level.alpha_bar + level.sigma * level.sigma == doctest::Approx(1.0));
}

TEST_CASE("invalid schedule parameters are rejected") {
  CHECK_THROWS_AS(build_linear_schedule(1, 1e-4, 0.02), std::invalid_argument);
  CHECK_THROWS_AS(build_linear_schedule(10, 0.0, 0.02), std::invalid_argument);
  CHECK_THROWS_AS(build_linear_schedule(10, 0.03, 0.02), std::invalid_argument);
  CHECK_THROWS_AS(build_linear_schedule(10, 1e-4, 1.0), std::invalid_argument);
  const auto s = build_linear_schedule(10, 1e-4, 0.02);
  CHECK_THROWS_AS(s.alpha_bar(11), std::out_of_range);
  CHECK_THROWS_AS(s.beta(10), std::out_of_range);
  CHECK(s.warnings().empty());
  CHECK_FALSE(build_linear_schedule(4, 0.1, 0.1).warnings().empty());
}
