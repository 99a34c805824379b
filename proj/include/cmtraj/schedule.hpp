#pragma once

// Noise levels, student index sampling, the discretization curriculum and
// teacher index rules for consistency training.

#include <string>
#include <vector>

#include "cmtraj/random.hpp"

namespace cmtraj {

/// Karras sigma grid with a zero left pad: sigmas[0] = 0, sigmas[1] = sigma_min,
/// sigmas[N] = sigma_max.
struct SigmaSchedule {
  int steps = 0;
  double sigma_min = 0.002;
  double sigma_max = 1.0;
  double rho = 7.0;
  std::vector<double> sigmas;

  double operator[](int i) const { return sigmas.at(static_cast<std::size_t>(i)); }
};

SigmaSchedule build_sigmas(int steps, double sigma_min = 0.002, double sigma_max = 1.0,
                           double rho = 7.0);

/// Discrete lognormal distribution over indices 1..N. pmf[0] is unused (0).
struct TimestepSampler {
  double mu = -1.1;
  double spread = 2.0;
  std::vector<double> pmf;
  std::vector<double> cdf;
  // Mass before normalization; sums to ~1.418 at the default parameters.
  double unnormalized_total = 0.0;

  int steps() const { return static_cast<int>(pmf.size()) - 1; }
};

/// erf((ln sigma_i - mu)/(sqrt(2) spread)) - erf((ln sigma_{i-1} - mu)/(sqrt(2) spread)),
/// with erf(-inf) = -1 at sigma_0 = 0, for i = 1..N (index 0 is 0).
std::vector<double> lognormal_mass(const SigmaSchedule& schedule, double mu, double spread);

TimestepSampler build_pmf(const SigmaSchedule& schedule, double mu = -1.1, double spread = 2.0);

// Inverse-cdf draw; deterministic for a given generator state.
int sample_student_index(const TimestepSampler& sampler, Rng& rng);

enum class TeacherMode { kEct, kIct };

std::string to_string(TeacherMode mode);
TeacherMode teacher_mode_from_string(const std::string& name);

struct TeacherScheduler {
  double k = 8.0;
  double b = 1.0;
  int q = 4;
  int max_epochs = 60;
  TeacherMode mode = TeacherMode::kEct;

  // Stage length; at least one epoch.
  int threshold_epoch() const { return max_epochs / 3 > 0 ? max_epochs / 3 : 1; }
};

/// Stage in {1, 2, 3}; the final stage absorbs epochs past 3 * floor(E/3).
int curriculum_stage(int epoch, int max_epochs);
int curriculum_N(int epoch, int max_epochs, int base_N = 10);

/// n(t') = 1 + k / (1 + exp(b t')).
double gap_function(double t_prime, double k, double b);

/// max(0, 1 - n(t') / q^stage): the clamped continuous teacher/student ratio.
double teacher_ratio(double t_prime, int stage, const TeacherScheduler& sched);

/// ECT rule: r = floor(t * teacher_ratio(t/N, stage(epoch))). Always 0 <= r < t.
int teacher_index(int t, int epoch, const TeacherScheduler& sched, int N);

/// ICT rule: adjacent discretization step, r = t - 1.
int teacher_index_ict(int t, int epoch, int N);

/// Dispatches on sched.mode.
int select_teacher_index(int t, int epoch, const TeacherScheduler& sched, int N);

struct RatioRange {
  double lo = 0.0;
  double hi = 0.0;
};

/// Min/max of teacher_ratio over t' in [0, 1] (dense scan plus endpoints).
RatioRange ratio_range(int q, int stage, double k = 8.0, double b = 1.0);

}  // namespace cmtraj
