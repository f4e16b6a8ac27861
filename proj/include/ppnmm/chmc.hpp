#pragma once

// Box-constrained Hamiltonian Monte Carlo: reflective leapfrog integration,
// Metropolis correction, randomized trajectory length and burn-in step-size
// adaptation. Kinetic energy is fixed to p^T p / 2.

#include "ppnmm/core_model.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <random>
#include <stdexcept>
#include <utility>

namespace ppnmm {

struct BoxBounds {
  double lower = 0.0;
  double upper = 1.0;
};

/// Offset applied when a reflected coordinate lands exactly on a bound.
inline constexpr double kBoundaryNudge = 1e-12;

struct ChmcConfig {
  double epsilon = 0.01;
  int nlf_min = 45;
  int nlf_max = 55;
  BoxBounds bounds{};
  int adapt_window = 50;
  double adapt_low = 0.5;
  double adapt_high = 0.8;
  double adapt_factor = 0.25;

  void validate() const {
    if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw std::invalid_argument("ChmcConfig: epsilon must be positive");
    if (nlf_min < 1 || nlf_min > nlf_max) throw std::invalid_argument("ChmcConfig: need 1 <= nlf_min <= nlf_max");
    if (!(bounds.lower < bounds.upper)) throw std::invalid_argument("ChmcConfig: need lower < upper bound");
    if (adapt_window < 1) throw std::invalid_argument("ChmcConfig: adapt_window must be >= 1");
    if (!(0.0 < adapt_low && adapt_low < adapt_high && adapt_high < 1.0))
      throw std::invalid_argument("ChmcConfig: need 0 < adapt_low < adapt_high < 1");
    if (!(adapt_factor > 0.0 && adapt_factor < 1.0)) throw std::invalid_argument("ChmcConfig: adapt_factor must be in (0,1)");
  }
};

/// Folds q back into [lower, upper] by mirror reflections at the bounds and
/// negates p once per reflection. Equivalent to repeating
///   q < lower: q = 2 lower - q;  q > upper: q = 2 upper - q
/// until q is inside, but in constant time.
inline std::pair<double, double> reflect_into_box(double q, double p, const BoxBounds& bounds) {
  const double lo = bounds.lower;
  const double hi = bounds.upper;
  const double width = hi - lo;
  double out = q;
  long long reflections = 0;
  if (q > hi) {
    const double s = (q - lo) / width;
    const double c = std::ceil(s) - 1.0;
    const double frac = s - c;
    reflections = static_cast<long long>(c);
    out = (reflections % 2 == 0) ? lo + frac * width : hi - frac * width;
  } else if (q < lo) {
    const double r = (lo - q) / width;
    const double c = std::ceil(r);
    const double frac = r - (c - 1.0);
    reflections = static_cast<long long>(c);
    out = (reflections % 2 == 1) ? lo + frac * width : hi - frac * width;
  }
  out = std::clamp(out, lo, hi);
  if (out <= lo) out = lo + kBoundaryNudge;
  if (out >= hi) out = hi - kBoundaryNudge;
  return {out, (reflections % 2 == 0) ? p : -p};
}

struct LeapfrogResult {
  Vector q;
  Vector p;
  bool diverged = false;
};

/// n_steps of: half momentum step, position step, reflection into the box,
/// half momentum step. grad(q, g) writes dU/dq into g.
template <class Grad>
LeapfrogResult constrained_leapfrog(const Vector& q0, const Vector& p0, double epsilon, int n_steps, Grad&& grad,
                                    const BoxBounds& bounds) {
  LeapfrogResult out{q0, p0, false};
  Vector g(q0.size());
  grad(out.q, g);
  for (int step = 0; step < n_steps; ++step) {
    out.p -= 0.5 * epsilon * g;
    out.q += epsilon * out.p;
    for (Index d = 0; d < out.q.size(); ++d) {
      if (!std::isfinite(out.q[d])) {
        out.diverged = true;
        return out;
      }
      const auto [qd, pd] = reflect_into_box(out.q[d], out.p[d], bounds);
      out.q[d] = qd;
      out.p[d] = pd;
    }
    grad(out.q, g);
    if (!g.allFinite()) {
      out.diverged = true;
      return out;
    }
    out.p -= 0.5 * epsilon * g;
  }
  return out;
}

struct ChmcStepResult {
  Vector q;
  bool accepted = false;
  bool diverged = false;
  double delta_h = 0.0;
  int n_leapfrog = 0;
};

/// One CHMC transition from q. Rejected or diverged proposals return q unchanged.
template <class Potential, class Grad, class Rng>
ChmcStepResult chmc_step(const Vector& q, Potential&& potential, Grad&& grad, const ChmcConfig& cfg, double epsilon,
                         Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector p(q.size());
  for (Index d = 0; d < p.size(); ++d) p[d] = normal(rng);
  const int n_lf = std::uniform_int_distribution<int>(cfg.nlf_min, cfg.nlf_max)(rng);
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);

  ChmcStepResult res{q, false, false, 0.0, n_lf};
  const double h0 = potential(q) + 0.5 * p.squaredNorm();
  LeapfrogResult traj = constrained_leapfrog(q, p, epsilon, n_lf, grad, cfg.bounds);
  if (traj.diverged) {
    res.diverged = true;
    return res;
  }
  const double h1 = potential(traj.q) + 0.5 * traj.p.squaredNorm();
  if (!std::isfinite(h1) || !std::isfinite(h0)) {
    res.diverged = true;
    return res;
  }
  res.delta_h = h1 - h0;
  if (std::log(u) < -res.delta_h) {
    res.q = std::move(traj.q);
    res.accepted = true;
  }
  return res;
}

template <class Potential, class Grad, class Rng>
ChmcStepResult chmc_step(const Vector& q, Potential&& potential, Grad&& grad, const ChmcConfig& cfg, Rng& rng) {
  return chmc_step(q, potential, grad, cfg, cfg.epsilon, rng);
}

/// Step-size tuning state for one sampled block. Acceptance entries are per
/// iteration rates in [0,1] (a single chain records 0 or 1).
struct ChmcAdaptState {
  double epsilon_current = 0.01;
  std::deque<double> recent_accepts;
  bool in_burn_in = true;

  void record(double accept_rate) { recent_accepts.push_back(accept_rate); }
  void record(bool accepted) { record(accepted ? 1.0 : 0.0); }
};

/// Once a full window of rates is available during burn-in: shrink epsilon by
/// adapt_factor when the mean rate is below adapt_low, grow it when above
/// adapt_high. Windows do not overlap. Outside burn-in epsilon is frozen.
[[nodiscard]] inline ChmcAdaptState adapt_stepsize(ChmcAdaptState state, const ChmcConfig& cfg) {
  if (!state.in_burn_in) {
    state.recent_accepts.clear();
    return state;
  }
  while (state.recent_accepts.size() > static_cast<std::size_t>(cfg.adapt_window)) state.recent_accepts.pop_front();
  if (state.recent_accepts.size() < static_cast<std::size_t>(cfg.adapt_window)) return state;
  double mean = 0.0;
  for (double a : state.recent_accepts) mean += a;
  mean /= static_cast<double>(state.recent_accepts.size());
  if (mean < cfg.adapt_low)
    state.epsilon_current *= (1.0 - cfg.adapt_factor);
  else if (mean > cfg.adapt_high)
    state.epsilon_current *= (1.0 + cfg.adapt_factor);
  state.recent_accepts.clear();
  return state;
}

}  // namespace ppnmm
