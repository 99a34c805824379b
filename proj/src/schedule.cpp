#include "cmtraj/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cmtraj/errors.hpp"

namespace cmtraj {

SigmaSchedule build_sigmas(int steps, double sigma_min, double sigma_max, double rho) {
  require(steps >= 2, "build_sigmas: N must be at least 2");
  require(sigma_min > 0.0 && sigma_min < sigma_max, "build_sigmas: need 0 < sigma_min < sigma_max");
  require(rho > 0.0, "build_sigmas: rho must be positive");
  SigmaSchedule s;
  s.steps = steps;
  s.sigma_min = sigma_min;
  s.sigma_max = sigma_max;
  s.rho = rho;
  s.sigmas.assign(static_cast<std::size_t>(steps) + 1, 0.0);
  const double lo = std::pow(sigma_min, 1.0 / rho);
  const double hi = std::pow(sigma_max, 1.0 / rho);
  for (int t = 1; t <= steps; ++t) {
    const double frac = static_cast<double>(t - 1) / static_cast<double>(steps - 1);
    s.sigmas[static_cast<std::size_t>(t)] = std::pow(lo + frac * (hi - lo), rho);
  }
  // Pin endpoints exactly.
  s.sigmas[1] = sigma_min;
  s.sigmas[static_cast<std::size_t>(steps)] = sigma_max;
  return s;
}

std::vector<double> lognormal_mass(const SigmaSchedule& schedule, double mu, double spread) {
  require(spread > 0.0, "lognormal_mass: spread must be positive");
  const double denom = std::sqrt(2.0) * spread;
  auto cdf_term = [&](double sigma) {
    if (sigma <= 0.0) return -1.0;
    return std::erf((std::log(sigma) - mu) / denom);
  };
  std::vector<double> mass(schedule.sigmas.size(), 0.0);
  for (std::size_t i = 1; i < schedule.sigmas.size(); ++i) {
    mass[i] = cdf_term(schedule.sigmas[i]) - cdf_term(schedule.sigmas[i - 1]);
  }
  return mass;
}

TimestepSampler build_pmf(const SigmaSchedule& schedule, double mu, double spread) {
  require(schedule.steps >= 2 && schedule.sigmas.size() == static_cast<std::size_t>(schedule.steps) + 1,
          "build_pmf: schedule not built");
  TimestepSampler sampler;
  sampler.mu = mu;
  sampler.spread = spread;
  sampler.pmf = lognormal_mass(schedule, mu, spread);
  double total = 0.0;
  for (double m : sampler.pmf) total += m;
  require(total > 0.0, "build_pmf: zero total mass");
  sampler.unnormalized_total = total;
  for (double& m : sampler.pmf) m /= total;
  sampler.cdf.assign(sampler.pmf.size(), 0.0);
  for (std::size_t i = 1; i < sampler.pmf.size(); ++i) {
    sampler.cdf[i] = sampler.cdf[i - 1] + sampler.pmf[i];
  }
  return sampler;
}

int sample_student_index(const TimestepSampler& sampler, Rng& rng) {
  const double u = rng.uniform() * sampler.cdf.back();
  const auto it = std::upper_bound(sampler.cdf.begin() + 1, sampler.cdf.end(), u);
  int idx = static_cast<int>(it - sampler.cdf.begin());
  idx = std::min(idx, sampler.steps());
  // Skip zero-mass indices that upper_bound can land on at exact cdf ties.
  while (idx > 1 && sampler.pmf[static_cast<std::size_t>(idx)] == 0.0) --idx;
  while (idx < sampler.steps() && sampler.pmf[static_cast<std::size_t>(idx)] == 0.0) ++idx;
  return idx;
}

std::string to_string(TeacherMode mode) { return mode == TeacherMode::kEct ? "ECT" : "ICT"; }

TeacherMode teacher_mode_from_string(const std::string& name) {
  if (name == "ECT" || name == "ect") return TeacherMode::kEct;
  if (name == "ICT" || name == "ict") return TeacherMode::kIct;
  throw ConfigError("unknown schedule mode '" + name + "' (expected ECT or ICT)");
}

int curriculum_stage(int epoch, int max_epochs) {
  require(max_epochs >= 1 && epoch >= 1, "curriculum_stage: epochs are 1-based");
  const int stage_len = std::max(1, max_epochs / 3);
  return std::min(3, 1 + (epoch - 1) / stage_len);
}

int curriculum_N(int epoch, int max_epochs, int base_N) {
  return base_N << (curriculum_stage(epoch, max_epochs) - 1);
}

double gap_function(double t_prime, double k, double b) {
  return 1.0 + k / (1.0 + std::exp(b * t_prime));
}

double teacher_ratio(double t_prime, int stage, const TeacherScheduler& sched) {
  const double denom = std::pow(static_cast<double>(sched.q), stage);
  return std::max(0.0, 1.0 - gap_function(t_prime, sched.k, sched.b) / denom);
}

int teacher_index(int t, int epoch, const TeacherScheduler& sched, int N) {
  require(t >= 1 && t <= N, "teacher_index: t must lie in 1..N");
  const int stage = curriculum_stage(epoch, sched.max_epochs);
  const double t_prime = static_cast<double>(t) / static_cast<double>(N);
  const int r = static_cast<int>(std::floor(t * teacher_ratio(t_prime, stage, sched)));
  return std::clamp(r, 0, t - 1);
}

int teacher_index_ict(int t, int /*epoch*/, int N) {
  require(t >= 1 && t <= N, "teacher_index_ict: t must lie in 1..N");
  return t - 1;
}

int select_teacher_index(int t, int epoch, const TeacherScheduler& sched, int N) {
  return sched.mode == TeacherMode::kEct ? teacher_index(t, epoch, sched, N)
                                         : teacher_index_ict(t, epoch, N);
}

RatioRange ratio_range(int q, int stage, double k, double b) {
  TeacherScheduler sched;
  sched.q = q;
  sched.k = k;
  sched.b = b;
  RatioRange range{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  constexpr int kSamples = 10000;
  for (int i = 0; i <= kSamples; ++i) {
    const double v = teacher_ratio(static_cast<double>(i) / kSamples, stage, sched);
    range.lo = std::min(range.lo, v);
    range.hi = std::max(range.hi, v);
  }
  return range;
}

}  // namespace cmtraj
