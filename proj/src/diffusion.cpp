#include "dosegen/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace dosegen {

namespace {

void check_t(int t, int T, int lo) {
  if (t < lo || t > T)
    throw std::invalid_argument("timestep " + std::to_string(t) +
                                " outside [" + std::to_string(lo) + ", " +
                                std::to_string(T) + "]");
}

void check_same_size(const std::vector<double>& a, const std::vector<double>& b,
                     const char* what) {
  if (a.size() != b.size())
    throw std::invalid_argument(std::string(what) + ": size mismatch");
}

}  // namespace

double NoiseSchedule::a(int t) const {
  check_t(t, T, 1);
  return alpha[t - 1];
}
double NoiseSchedule::log_ab(int t) const {
  check_t(t, T, 0);
  return log_alpha_bar[t];
}
double NoiseSchedule::ab(int t) const {
  check_t(t, T, 0);
  return alpha_bar[t];
}
double NoiseSchedule::sqrt_ab(int t) const { return std::exp(0.5 * log_ab(t)); }
double NoiseSchedule::one_minus_ab(int t) const { return -std::expm1(log_ab(t)); }
double NoiseSchedule::sqrt_one_minus_ab(int t) const {
  return std::sqrt(one_minus_ab(t));
}

double NoiseSchedule::sigma(int t) const {
  check_t(t, T, 1);
  double num = one_minus_ab(t - 1);
  if (num == 0.0) return 0.0;  // t = 1 under the ᾱ_0 = 1 convention
  return std::sqrt(num / one_minus_ab(t)) * std::sqrt(1.0 - a(t));
}

NoiseSchedule make_linear_schedule(int T, double a1, double aT) {
  if (T < 2) throw std::invalid_argument("schedule needs T >= 2");
  if (!(0.0 < aT && aT < a1 && a1 < 1.0))
    throw std::invalid_argument("schedule needs 0 < aT < a1 < 1");
  NoiseSchedule s;
  s.T = T;
  s.alpha.resize(T);
  for (int t = 1; t <= T; t++)
    s.alpha[t - 1] = a1 - static_cast<double>(t - 1) * (a1 - aT) / (T - 1);
  s.alpha.front() = a1;  // pin endpoints bit-exactly
  s.alpha.back() = aT;
  s.log_alpha_bar.resize(T + 1);
  s.log_alpha_bar[0] = 0.0;
  for (int t = 1; t <= T; t++)
    s.log_alpha_bar[t] = s.log_alpha_bar[t - 1] + std::log(s.alpha[t - 1]);
  s.alpha_bar.resize(T + 1);
  for (int t = 0; t <= T; t++) s.alpha_bar[t] = std::exp(s.log_alpha_bar[t]);
  for (int t = 1; t <= T; t++) {
    if (!(s.log_alpha_bar[t] < s.log_alpha_bar[t - 1]))
      throw std::logic_error("cumulative schedule not strictly decreasing");
  }
  return s;
}

DdimPlan make_tau(int S, const NoiseSchedule& sched) {
  const int T = sched.T;
  if (S < 1 || S > T)
    throw std::invalid_argument("plan length must satisfy 1 <= S <= T");
  DdimPlan plan;
  plan.tau.reserve(S);
  for (int i = 1; i <= S; i++) {
    int t = static_cast<int>(std::llround(static_cast<double>(i) * T / S));
    t = std::max(1, std::min(T, t));
    if (plan.tau.empty() || t > plan.tau.back()) plan.tau.push_back(t);
  }
  plan.tau.back() = T;
  plan.sigma.resize(plan.tau.size());
  plan.sigma[0] = 0.0;  // final hop to y_0 is deterministic
  for (size_t i = 1; i < plan.tau.size(); i++)
    plan.sigma[i] = sched.sigma(plan.tau[i]);
  return plan;
}

std::vector<double> q_sample(const std::vector<double>& y0, int t,
                             const std::vector<double>& eps,
                             const NoiseSchedule& sched) {
  check_same_size(y0, eps, "q_sample");
  check_t(t, sched.T, 1);
  const double sa = sched.sqrt_ab(t);
  const double sb = sched.sqrt_one_minus_ab(t);
  std::vector<double> y(y0.size());
  for (size_t i = 0; i < y.size(); i++) y[i] = sa * y0[i] + sb * eps[i];
  return y;
}

std::vector<double> predict_y0(const std::vector<double>& y_t,
                               const std::vector<double>& eps_hat, int t,
                               const NoiseSchedule& sched) {
  check_same_size(y_t, eps_hat, "predict_y0");
  check_t(t, sched.T, 1);
  const double inv_sa = std::exp(-0.5 * sched.log_ab(t));
  const double sb = sched.sqrt_one_minus_ab(t);
  std::vector<double> y0(y_t.size());
  for (size_t i = 0; i < y0.size(); i++)
    y0[i] = (y_t[i] - sb * eps_hat[i]) * inv_sa;
  return y0;
}

std::vector<double> ddim_step(const std::vector<double>& y,
                              const std::vector<double>& eps_hat, int i,
                              const DdimPlan& plan, const NoiseSchedule& sched,
                              const std::vector<double>& z, bool clip_y0) {
  if (i < 1 || i > plan.steps())
    throw std::invalid_argument("ddim_step: plan index out of range");
  check_same_size(y, eps_hat, "ddim_step");
  const int t = plan.tau[i - 1];
  std::vector<double> y0 = predict_y0(y, eps_hat, t, sched);
  if (clip_y0)
    for (double& v : y0) v = std::clamp(v, -1.0, 1.0);
  if (i == 1) return y0;

  check_same_size(y, z, "ddim_step");
  const int prev = plan.tau[i - 2];
  const double sg = plan.sigma[i - 1];
  const double radicand = sched.one_minus_ab(prev) - sg * sg;
  if (radicand < -1e-12)
    throw std::domain_error(
        "ddim_step: direction radicand negative; plan inconsistent with schedule");
  const double dir = std::sqrt(std::max(0.0, radicand));
  const double sa_prev = sched.sqrt_ab(prev);
  std::vector<double> out(y.size());
  for (size_t j = 0; j < out.size(); j++)
    out[j] = sa_prev * y0[j] + dir * eps_hat[j] + sg * z[j];
  return out;
}

double training_loss(const EpsModel& model, const std::vector<double>& y0,
                     const std::vector<double>& x_ct,
                     const std::vector<double>& x_sdm,
                     const NoiseSchedule& sched, Rng& rng, bool l2) {
  const int t = static_cast<int>(rng.uniform_int(1, sched.T));
  std::vector<double> eps(y0.size());
  rng.fill_normal(eps.data(), eps.size());
  std::vector<double> y_t = q_sample(y0, t, eps, sched);
  std::vector<double> eps_hat = model(y_t, x_ct, x_sdm, t);
  check_same_size(eps, eps_hat, "training_loss");
  double acc = 0.0;
  for (size_t i = 0; i < eps.size(); i++) {
    double d = eps[i] - eps_hat[i];
    acc += l2 ? d * d : std::abs(d);
  }
  return acc / static_cast<double>(eps.size());
}

std::vector<double> sample(const EpsModel& model,
                           const std::vector<double>& x_ct,
                           const std::vector<double>& x_sdm,
                           const DdimPlan& plan, const NoiseSchedule& sched,
                           uint64_t seed) {
  Rng rng(seed);
  std::vector<double> y(x_ct.size());
  rng.fill_normal(y.data(), y.size());
  std::vector<double> z(y.size(), 0.0);
  for (int i = plan.steps(); i >= 1; i--) {
    std::vector<double> eps_hat = model(y, x_ct, x_sdm, plan.tau[i - 1]);
    if (i > 1) rng.fill_normal(z.data(), z.size());
    y = ddim_step(y, eps_hat, i, plan, sched, z, /*clip_y0=*/true);
  }
  for (double& v : y) v = std::clamp(v, -1.0, 1.0);
  return y;
}

}  // namespace dosegen
