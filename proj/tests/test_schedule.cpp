// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "hdrdiff/schedule.hpp"
#include "test_util.hpp"

using namespace hdrdiff;
using Catch::Approx;
using schedule::Kind;

TEST_CASE("log_snr closed forms") {
  CHECK(schedule::log_snr(0.5, 1.0) == Approx(0.0).margin(1e-15));
  CHECK(schedule::log_snr(0.5, 64.0 / 256.0) == Approx(-2.0 * std::log(4.0)).epsilon(1e-14));
  // tan(pi/8) = sqrt(2) - 1, so -2 ln tan(pi/8) = 2 asinh(1)
  CHECK(schedule::log_snr(0.25, 1.0) == Approx(2.0 * std::asinh(1.0)).epsilon(1e-14));
  CHECK(schedule::log_snr(0.25, 1.0) == Approx(1.76275).epsilon(1e-5));
  CHECK_THROWS_AS(schedule::log_snr(0.0, 1.0), Error);
  CHECK_THROWS_AS(schedule::log_snr(1.0, 1.0), Error);
  CHECK_THROWS_AS(schedule::log_snr(0.5, 0.0), Error);
}

TEST_CASE("alpha_bar_continuous closed forms and limits") {
  CHECK(schedule::alpha_bar_continuous(0.5, 1.0) == Approx(0.5).epsilon(1e-15));
  CHECK(schedule::alpha_bar_continuous(0.5, 0.25) == Approx(1.0 / 17.0).epsilon(1e-14));
  CHECK(schedule::alpha_bar_continuous(1e-9, 1.0) > 1.0 - 1e-12);
  CHECK(schedule::alpha_bar_continuous(1.0 - 1e-9, 1.0) < 1e-12);
}

TEST_CASE("unshifted schedule is cos^2") {
  for (int i = 1; i < 1000; ++i) {
    const double t = i / 1000.0;
    const double c = std::cos(std::numbers::pi * t / 2.0);
    REQUIRE(std::abs(schedule::alpha_bar_continuous(t, 1.0) - c * c) < 1e-9);
  }
}

TEST_CASE("shift is a pure vertical offset in log SNR") {
  for (double r : {0.125, 0.25, 0.5, 2.0}) {
    for (int i = 1; i < 200; ++i) {
      const double t = i / 200.0;
      REQUIRE(schedule::log_snr(t, r) - schedule::log_snr(t, 1.0) == Approx(2.0 * std::log(r)).margin(1e-12));
    }
  }
}

TEST_CASE("log_snr and alpha_bar decrease strictly") {
  double prev_l = INFINITY, prev_a = 2.0;
  for (int i = 1; i < 5000; ++i) {
    const double t = i / 5000.0;
    const double l = schedule::log_snr(t, 0.25), a = schedule::alpha_bar_continuous(t, 0.25);
    REQUIRE(l < prev_l);
    REQUIRE(a < prev_a);
    prev_l = l;
    prev_a = a;
  }
}

TEST_CASE("discretized schedule invariants") {
  for (Kind k : {Kind::Cosine, Kind::ShiftedCosine}) {
    for (int T : {2, 10, 200, 1000}) {
      const auto s = schedule::discretize(k, 0.25, T);
      REQUIRE(s.alpha_bar.size() == static_cast<std::size_t>(T + 1));
      CHECK(s.alpha_bar[0] <= 1.0 - 1e-5);
      CHECK(s.alpha_bar[T] > 0.0);
      double prod = 1.0;
      for (int i = 0; i <= T; ++i) {
        if (i > 0) REQUIRE(s.alpha_bar[i] < s.alpha_bar[i - 1]);
        REQUIRE(s.beta[i] > 0.0);
        REQUIRE(s.beta[i] < 1.0);
        prod *= 1.0 - s.beta[i];
        REQUIRE(std::abs(prod - s.alpha_bar[i]) <= 1e-10 * s.alpha_bar[i]);
      }
      for (int i = 1; i <= T; ++i) {
        const double post = s.beta[i] * (1.0 - s.alpha_bar[i - 1]) / (1.0 - s.alpha_bar[i]);
        REQUIRE(s.sigma[i] == Approx(std::sqrt(post)).epsilon(1e-12));
        REQUIRE(s.sigma[i] * s.sigma[i] <= s.beta[i] * (1 + 1e-12));
      }
    }
  }
}

TEST_CASE("interior steps track the continuous schedule") {
  const auto s = schedule::discretize(Kind::ShiftedCosine, 0.25, 1000);
  for (int i = 1; i < 1000; ++i)
    REQUIRE(s.alpha_bar[i] == Approx(schedule::alpha_bar_continuous(i / 1000.0, 0.25)).margin(2e-5));
}

TEST_CASE("shifted schedule is noisier than cosine at every step") {
  const auto c = schedule::discretize(Kind::Cosine, 1.0, 1000);
  const auto sh = schedule::discretize(Kind::ShiftedCosine, 0.25, 1000);
  for (int i = 0; i <= 1000; ++i) REQUIRE(sh.alpha_bar[i] <= c.alpha_bar[i]);
  CHECK(c.shift_ratio == 1.0);  // cosine ignores the shift argument
}

TEST_CASE("discretize and parse_kind errors") {
  CHECK_THROWS_AS(schedule::discretize(Kind::Cosine, 1.0, 1), Error);
  CHECK_THROWS_AS(schedule::discretize(Kind::ShiftedCosine, -1.0, 10), Error);
  CHECK(schedule::parse_kind("cosine") == Kind::Cosine);
  CHECK(schedule::parse_kind("shifted") == Kind::ShiftedCosine);
  CHECK_THROWS_AS(schedule::parse_kind("linear"), Error);
  const auto s = schedule::discretize(Kind::Cosine, 1.0, 10);
  CHECK_THROWS_AS(s.check_step(0), Error);
  CHECK_THROWS_AS(s.check_step(11), Error);
  CHECK_NOTHROW(s.check_step(10));
}

TEST_CASE("snr_curve_csv round trip") {
  testutil::TempDir d("sched");
  const auto s = schedule::discretize(Kind::ShiftedCosine, 0.25, 50);
  schedule::snr_curve_csv(s, d / "s.csv");
  std::ifstream in(d / "s.csv");
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line == "t,log_snr,alpha_bar,beta");
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    std::stringstream ss(line);
    std::string cell;
    double v[4];
    for (double& x : v) {
      std::getline(ss, cell, ',');
      x = std::stod(cell);
    }
    CHECK(v[0] == Approx(rows / 50.0).margin(1e-12));
    CHECK(std::abs(v[1] - s.log_snr_at(rows)) <= 1e-9);
    CHECK(std::abs(v[2] - s.alpha_bar[rows]) <= 1e-9);
    CHECK(std::abs(v[3] - s.beta[rows]) <= 1e-9);
  }
  CHECK(rows == 50);
}
