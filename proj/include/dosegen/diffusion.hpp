#pragma once
// Noise schedules and the sampling machinery for the conditional denoiser:
// forward q-sampling, the training objective, and DDIM sub-sequence stepping.
// All schedule math is done on log(alpha_bar) — the raw cumulative product
// underflows double precision near t = T for the default schedule.

#include <cstdint>
#include <functional>
#include <vector>

#include "dosegen/rng.hpp"

namespace dosegen {

struct NoiseSchedule {
  int T = 0;
  std::vector<double> alpha;          // alpha[t-1] = α_t, t in [1, T]
  std::vector<double> log_alpha_bar;  // [0..T], log ᾱ_t with ᾱ_0 = 1
  std::vector<double> alpha_bar;      // exp(log_alpha_bar); underflows near T

  double a(int t) const;                // α_t
  double ab(int t) const;               // ᾱ_t (t in [0, T])
  double log_ab(int t) const;           // log ᾱ_t
  double sqrt_ab(int t) const;          // sqrt(ᾱ_t), exp-based
  double one_minus_ab(int t) const;     // 1 − ᾱ_t via expm1 (exact 0 at t=0)
  double sqrt_one_minus_ab(int t) const;
  double sigma(int t) const;  // sqrt((1−ᾱ_{t−1})/(1−ᾱ_t)) · sqrt(1−α_t)
};

NoiseSchedule make_linear_schedule(int T, double a1, double aT);
inline NoiseSchedule make_default_schedule() {
  return make_linear_schedule(1000, 0.9999, 0.08);
}

struct DdimPlan {
  std::vector<int> tau;      // strictly increasing, tau.back() == T
  std::vector<double> sigma;  // sigma[i-1] pairs with tau[i-1]; sigma[0] = 0
  int steps() const { return static_cast<int>(tau.size()); }
};

DdimPlan make_tau(int S, const NoiseSchedule& sched);

std::vector<double> q_sample(const std::vector<double>& y0, int t,
                             const std::vector<double>& eps,
                             const NoiseSchedule& sched);

std::vector<double> predict_y0(const std::vector<double>& y_t,
                               const std::vector<double>& eps_hat, int t,
                               const NoiseSchedule& sched);

// One reverse step along the plan; i is the 1-based plan index of the current
// state (so i == steps() at the start and 1 at the deterministic final hop).
std::vector<double> ddim_step(const std::vector<double>& y,
                              const std::vector<double>& eps_hat, int i,
                              const DdimPlan& plan, const NoiseSchedule& sched,
                              const std::vector<double>& z,
                              bool clip_y0 = false);

// epsilon predictor: (y_t, ct, sdm_stack, t) -> eps_hat, all flat buffers
using EpsModel = std::function<std::vector<double>(
    const std::vector<double>&, const std::vector<double>&,
    const std::vector<double>&, int)>;

// Draws t ~ U[1,T] and eps ~ N(0,I) from rng (in that order), forms y_t, and
// returns the epsilon-matching loss: mean |eps − model(...)|, or mean squared
// when l2 is set.
double training_loss(const EpsModel& model, const std::vector<double>& y0,
                     const std::vector<double>& x_ct,
                     const std::vector<double>& x_sdm,
                     const NoiseSchedule& sched, Rng& rng, bool l2 = false);

// Full reverse pass: y_T ~ N(0,I) from `seed`, then plan steps down to y_0.
// Intermediate y_{0|t} estimates and the final output are clipped to [−1,1].
std::vector<double> sample(const EpsModel& model,
                           const std::vector<double>& x_ct,
                           const std::vector<double>& x_sdm,
                           const DdimPlan& plan, const NoiseSchedule& sched,
                           uint64_t seed);

}  // namespace dosegen
