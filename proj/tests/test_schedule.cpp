#include <doctest.h>

#include <cmath>
#include <map>

#include "cmtraj/errors.hpp"
#include "cmtraj/schedule.hpp"

using namespace cmtraj;

namespace {

// Independent long-double evaluation of the Karras grid.
long double karras(int t, int n, long double lo = 0.002L, long double hi = 1.0L, long double rho = 7.0L) {
  const long double a = std::pow(lo, 1.0L / rho), b = std::pow(hi, 1.0L / rho);
  return std::pow(a + (static_cast<long double>(t - 1) / (n - 1)) * (b - a), rho);
}

long double erf_term(long double sigma, long double mu = -1.1L, long double spread = 2.0L) {
  if (sigma == 0.0L) return -1.0L;
  return std::erf((std::log(sigma) - mu) / (std::sqrt(2.0L) * spread));
}

}  // namespace

TEST_CASE("sigma grid endpoints and left pad") {
  for (int n : {2, 10, 20, 40, 77}) {
    const auto s = build_sigmas(n);
    CHECK(s.sigmas.size() == static_cast<std::size_t>(n) + 1);
    CHECK(s[0] == 0.0);
    CHECK(s[1] == 0.002);
    CHECK(s[n] == 1.0);
    for (int t = 2; t <= n; ++t) CHECK(s[t] > s[t - 1]);
  }
}

TEST_CASE("sigma grid interior matches long-double evaluation") {
  const auto s = build_sigmas(10);
  CHECK(std::abs(s[5] - static_cast<double>(karras(5, 10))) < 1e-15);
  CHECK(s[5] == doctest::Approx(0.0626).epsilon(1e-3));
  for (int n : {10, 20, 40}) {
    const auto g = build_sigmas(n);
    for (int t = 1; t <= n; ++t) CHECK(std::abs(g[t] - static_cast<double>(karras(t, n))) < 1e-14);
  }
}

TEST_CASE("sigma grid rejects fewer than two steps") {
  CHECK_THROWS_AS(build_sigmas(1), ContractViolation);
  CHECK_THROWS_AS(build_sigmas(10, 0.5, 0.1), ContractViolation);
}

TEST_CASE("rebuilding after a stage change keeps endpoints exactly") {
  for (int n : {10, 20, 40}) {
    const auto s = build_sigmas(n);
    CHECK(s[1] == 0.002);
    CHECK(s[n] == 1.0);
  }
}

TEST_CASE("lognormal pmf normalisation, closed form and frozen values") {
  const auto s = build_sigmas(10);
  const auto p = build_pmf(s);
  double total = 0.0;
  for (std::size_t i = 1; i < p.pmf.size(); ++i) {
    CHECK(p.pmf[i] >= 0.0);
    total += p.pmf[i];
  }
  CHECK(std::abs(total - 1.0) < 1e-12);
  CHECK(p.pmf[0] == 0.0);

  long double raw_total = 0.0L;
  std::vector<long double> raw(11, 0.0L);
  for (int i = 1; i <= 10; ++i) {
    raw[static_cast<std::size_t>(i)] = erf_term(karras(i, 10)) - erf_term(i == 1 ? 0.0L : karras(i - 1, 10));
    raw_total += raw[static_cast<std::size_t>(i)];
  }
  for (int i = 1; i <= 10; ++i) {
    CHECK(std::abs(p.pmf[static_cast<std::size_t>(i)] - static_cast<double>(raw[static_cast<std::size_t>(i)] / raw_total)) <
          1e-12);
  }
  CHECK(raw[1] == doctest::Approx(0.01054).epsilon(1e-3));
  CHECK(p.unnormalized_total == doctest::Approx(1.4177).epsilon(1e-4));
  CHECK(p.pmf[1] == doctest::Approx(0.00743).epsilon(1e-3));
}

TEST_CASE("pmf is unimodal in log sigma for N = 20") {
  const auto s = build_sigmas(20);
  const auto p = build_pmf(s);
  // Mass per unit log-sigma: rises then falls.
  std::vector<double> density;
  for (int i = 2; i <= 20; ++i) {
    density.push_back(p.pmf[static_cast<std::size_t>(i)] / (std::log(s[i]) - std::log(s[i - 1])));
  }
  std::size_t peak = 0;
  for (std::size_t i = 1; i < density.size(); ++i) {
    if (density[i] > density[peak]) peak = i;
  }
  for (std::size_t i = 1; i <= peak; ++i) CHECK(density[i] >= density[i - 1]);
  for (std::size_t i = peak + 1; i < density.size(); ++i) CHECK(density[i] <= density[i - 1]);
  // The peak interval brackets ln sigma = mu.
  CHECK(std::log(s[static_cast<int>(peak) + 1]) <= -1.1 + 0.6);
  CHECK(std::log(s[static_cast<int>(peak) + 2]) >= -1.1 - 0.6);
}

TEST_CASE("student index sampling") {
  SUBCASE("degenerate pmf always returns its only index") {
    TimestepSampler d;
    d.pmf = {0.0, 0.0, 0.0, 1.0, 0.0};
    d.cdf = {0.0, 0.0, 0.0, 1.0, 1.0};
    Rng rng(3);
    for (int i = 0; i < 1000; ++i) CHECK(sample_student_index(d, rng) == 3);
  }
  SUBCASE("same seed gives the same sequence") {
    const auto p = build_pmf(build_sigmas(20));
    Rng a(11), b(11);
    for (int i = 0; i < 500; ++i) CHECK(sample_student_index(p, a) == sample_student_index(p, b));
  }
  SUBCASE("frequencies within 3 sigma binomial bounds") {
    const auto p = build_pmf(build_sigmas(10));
    Rng rng(2024);
    const int draws = 200000;
    std::vector<int> counts(11, 0);
    for (int i = 0; i < draws; ++i) ++counts[static_cast<std::size_t>(sample_student_index(p, rng))];
    CHECK(counts[0] == 0);
    for (int i = 1; i <= 10; ++i) {
      const double pi = p.pmf[static_cast<std::size_t>(i)];
      const double sd = std::sqrt(draws * pi * (1.0 - pi));
      CHECK(std::abs(counts[static_cast<std::size_t>(i)] - draws * pi) <= 3.0 * sd + 1.0);
    }
  }
}

TEST_CASE("curriculum stages and N") {
  CHECK(curriculum_N(1, 60) == 10);
  CHECK(curriculum_N(20, 60) == 10);
  CHECK(curriculum_N(21, 60) == 20);
  CHECK(curriculum_N(25, 60) == 20);
  CHECK(curriculum_N(41, 60) == 40);
  CHECK(curriculum_N(60, 60) == 40);
  // E not divisible by 3: the final stage absorbs the remainder.
  CHECK(curriculum_stage(7, 7) == 3);
  CHECK(curriculum_stage(3, 7) == 2);
  CHECK(curriculum_stage(1, 1) == 1);
  CHECK(curriculum_stage(2, 2) == 2);
  TeacherScheduler t;
  t.max_epochs = 60;
  CHECK(t.threshold_epoch() == 20);
}

TEST_CASE("teacher index examples") {
  TeacherScheduler s;
  s.q = 4;
  s.max_epochs = 60;
  // Stage 2, N = 20, t = 20.
  const double n = 1.0 + 8.0 / (1.0 + std::exp(1.0));
  CHECK(n == doctest::Approx(3.1516).epsilon(1e-4));
  CHECK(teacher_ratio(1.0, 2, s) == doctest::Approx(1.0 - n / 16.0));
  CHECK(teacher_index(20, 25, s, 20) == 16);
  // Stage 1 with q = 4: negative factor near t' = 0 clamps to r = 0.
  CHECK(teacher_ratio(0.0, 1, s) == 0.0);
  CHECK(teacher_index(1, 1, s, 10) == 0);
}

TEST_CASE("teacher index is always in [0, t)") {
  for (int q : {1, 2, 4, 6, 8}) {
    TeacherScheduler s;
    s.q = q;
    s.max_epochs = 60;
    for (int epoch : {1, 20, 21, 40, 41, 60}) {
      const int n = curriculum_N(epoch, 60);
      for (int t = 1; t <= n; ++t) {
        const int r = teacher_index(t, epoch, s, n);
        CHECK(r >= 0);
        CHECK(r < t);
      }
    }
  }
}

TEST_CASE("adjacent-step teacher rule") {
  CHECK(teacher_index_ict(5, 1, 10) == 4);
  CHECK(teacher_index_ict(1, 1, 10) == 0);
  TeacherScheduler s;
  s.mode = TeacherMode::kIct;
  CHECK(select_teacher_index(7, 30, s, 20) == 6);
  s.mode = TeacherMode::kEct;
  CHECK(select_teacher_index(20, 25, s, 20) == 16);
  CHECK(teacher_mode_from_string("ict") == TeacherMode::kIct);
  CHECK_THROWS_AS(teacher_mode_from_string("DDIM"), ConfigError);
}

TEST_CASE("ratio ranges against the reference grid") {
  // (q, stage) -> reference range at two decimals.
  const std::map<std::pair<int, int>, std::pair<double, double>> ref{
      {{2, 1}, {0.0, 0.0}},   {{2, 2}, {0.0, 0.21}},  {{2, 3}, {0.38, 0.60}}, {{4, 1}, {0.0, 0.21}},
      {{4, 2}, {0.69, 0.80}}, {{4, 3}, {0.92, 0.96}}, {{6, 1}, {0.17, 0.48}}, {{6, 2}, {0.86, 0.91}},
      {{6, 3}, {0.98, 0.99}}, {{8, 1}, {0.38, 0.60}}, {{8, 2}, {0.92, 0.96}}, {{8, 3}, {0.98, 0.99}}};
  for (const auto& [key, range] : ref) {
    const auto r = ratio_range(key.first, key.second);
    CAPTURE(key.first);
    CAPTURE(key.second);
    CHECK(std::abs(r.hi - range.second) <= 0.01);
    if (key == std::make_pair(8, 3)) {
      // 1 - 5/512: the reference lower bound 0.98 is 0.0102 away.
      CHECK(r.lo == doctest::Approx(1.0 - 5.0 / 512.0).epsilon(1e-12));
    } else {
      CHECK(std::abs(r.lo - range.first) <= 0.01);
    }
  }
}
