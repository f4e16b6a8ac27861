#pragma once

// CHMC-within-Gibbs sampler for the hierarchical PPNMM posterior. One
// iteration runs six moves in order: latent coefficients Z (CHMC per pixel),
// endmember rows (CHMC per band), nonlinearity parameters b (Bernoulli-Gaussian
// per pixel), band noise variances, sigma_b^2 and w.

#include "ppnmm/chmc.hpp"
#include "ppnmm/core_model.hpp"
#include "ppnmm/endmember_init.hpp"
#include "ppnmm/parallel.hpp"
#include "ppnmm/rng.hpp"

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ppnmm {

struct PriorConfig {
  double s2 = 50.0;
  double gamma = 0.1;
  double nu = 0.1;
  Matrix mbar;  // L x R; empty means "derive from the data"

  void validate() const {
    if (!(s2 > 0.0)) throw std::invalid_argument("PriorConfig: s2 must be positive");
    if (!(gamma > 0.0) || !(nu > 0.0)) throw std::invalid_argument("PriorConfig: gamma and nu must be positive");
    if (mbar.size() > 0 && !((mbar.array() >= 0.0).all() && (mbar.array() <= 1.0).all()))
      throw std::invalid_argument("PriorConfig: prior means must lie in [0,1]");
  }
};

inline ChmcConfig default_latent_chmc() {
  ChmcConfig c;
  c.epsilon = 0.01;
  return c;
}

inline ChmcConfig default_endmember_chmc() {
  ChmcConfig c;
  c.epsilon = 0.005;
  return c;
}

struct SamplerConfig {
  int n_mc = 5000;
  int n_burn = 2000;
  int thin = 5;
  std::uint64_t seed = 1;
  ChmcConfig chmc_z = default_latent_chmc();
  ChmcConfig chmc_m = default_endmember_chmc();
  PriorConfig priors{};
  int chmc_repeats = 1;
  int threads = 0;

  void validate() const {
    if (n_mc < 1) throw std::invalid_argument("SamplerConfig: n_mc must be >= 1");
    if (n_burn < 0 || n_burn >= n_mc) throw std::invalid_argument("SamplerConfig: need 0 <= n_burn < n_mc");
    if (thin < 1) throw std::invalid_argument("SamplerConfig: thin must be >= 1");
    if (chmc_repeats < 1) throw std::invalid_argument("SamplerConfig: chmc_repeats must be >= 1");
    chmc_z.validate();
    chmc_m.validate();
    priors.validate();
  }
};

enum class ChmcBlock { latent, endmember };

struct AdaptEvent {
  int iteration = 0;
  ChmcBlock block = ChmcBlock::latent;
  double old_epsilon = 0.0;
  double new_epsilon = 0.0;
};

struct BlockStats {
  int proposals = 0;
  int accepted = 0;
  int diverged = 0;

  double accept_rate() const { return proposals > 0 ? static_cast<double>(accepted) / proposals : 0.0; }
};

struct Chain {
  std::vector<ModelState> samples;
  std::vector<int> kept_iterations;
  int n_burn = 0;
  // One entry per iteration (burn-in included).
  std::vector<double> accept_z, accept_m;
  std::vector<double> epsilon_z, epsilon_m;
  std::vector<int> diverged_z, diverged_m;
  std::vector<AdaptEvent> adapt_events;
  Matrix prior_means;
};

struct UnmixResult {
  Matrix a_hat;
  Matrix m_hat;
  Vector b_hat;
  Vector b_nonzero_prob;
  Vector sigma2_hat;
  double sigma_b2_hat = 0.0;
  double w_hat = 0.0;
};

// ---------------------------------------------------------------------------
// Individual moves

/// Z-block: one CHMC transition (or chmc_repeats) per pixel column.
inline BlockStats sample_Z(ModelState& state, const SpectralImage& y, const ChmcConfig& cfg, double epsilon,
                           const IterationStreams& streams, int threads = 1, int repeats = 1) {
  const Index n = state.n_pixels();
  const Vector inv = inverse_variances(state.sigma2);
  std::vector<char> accepted(static_cast<std::size_t>(n) * repeats, 0), diverged(static_cast<std::size_t>(n) * repeats, 0);
  parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t idx) {
    const Index col = static_cast<Index>(idx);
    StreamRng rng = streams.stream(StreamBlock::latent, idx);
    PixelPotential pot(state.m, y.data().col(col), state.b[col], inv);
    auto value = [&](const Vector& q) { return pot.value(q); };
    auto grad = [&](const Vector& q, Vector& g) { pot.gradient(q, g); };
    Vector q = state.z.col(col);
    for (int rep = 0; rep < repeats; ++rep) {
      ChmcStepResult res = chmc_step(q, value, grad, cfg, epsilon, rng);
      accepted[idx * repeats + rep] = res.accepted;
      diverged[idx * repeats + rep] = res.diverged;
      q = std::move(res.q);
    }
    state.z.col(col) = q;
  });
  BlockStats st;
  st.proposals = static_cast<int>(accepted.size());
  for (std::size_t i = 0; i < accepted.size(); ++i) {
    st.accepted += accepted[i];
    st.diverged += diverged[i];
  }
  return st;
}

/// M-block: one CHMC transition per endmember row.
inline BlockStats sample_M(ModelState& state, const SpectralImage& y, const PriorConfig& priors, const ChmcConfig& cfg,
                           double epsilon, const IterationStreams& streams, int threads = 1, int repeats = 1) {
  const Index l_count = state.n_bands();
  if (priors.mbar.rows() != state.m.rows() || priors.mbar.cols() != state.m.cols())
    throw std::invalid_argument("sample_M: prior mean matrix shape != endmember shape");
  const Matrix a = abundances_from_latent(state.z);
  std::vector<char> accepted(static_cast<std::size_t>(l_count) * repeats, 0),
      diverged(static_cast<std::size_t>(l_count) * repeats, 0);
  parallel_for(static_cast<std::size_t>(l_count), threads, [&](std::size_t idx) {
    const Index row = static_cast<Index>(idx);
    StreamRng rng = streams.stream(StreamBlock::endmember, idx);
    const Vector mbar_row = priors.mbar.row(row).transpose();
    RowPotential pot(y.data().row(row), a, state.b, state.sigma2[row], priors.s2, mbar_row);
    auto value = [&](const Vector& q) { return pot.value(q); };
    auto grad = [&](const Vector& q, Vector& g) { pot.gradient(q, g); };
    Vector q = state.m.row(row).transpose();
    for (int rep = 0; rep < repeats; ++rep) {
      ChmcStepResult res = chmc_step(q, value, grad, cfg, epsilon, rng);
      accepted[idx * repeats + rep] = res.accepted;
      diverged[idx * repeats + rep] = res.diverged;
      q = std::move(res.q);
    }
    state.m.row(row) = q.transpose();
  });
  BlockStats st;
  st.proposals = static_cast<int>(accepted.size());
  for (std::size_t i = 0; i < accepted.size(); ++i) {
    st.accepted += accepted[i];
    st.diverged += diverged[i];
  }
  return st;
}

/// Parameters of the Bernoulli-Gaussian conditional of one b_n:
/// b_n = 0 with probability 1 - w_star, else b_n ~ N(mu, s2).
struct SpikeSlabConditional {
  double w_star = 0.0;
  double mu = 0.0;
  double s2 = 0.0;
};

/// resid = y_n - M a_n, h = (M a_n) .* (M a_n).
inline SpikeSlabConditional b_conditional(const Eigen::Ref<const Vector>& resid, const Eigen::Ref<const Vector>& h,
                                          const Vector& inv_sigma2, double sigma_b2, double w) {
  if (!(sigma_b2 > 0.0)) throw std::invalid_argument("b_conditional: sigma_b2 must be positive");
  const double hh = (h.array().square() * inv_sigma2.array()).sum();
  const double rh = (resid.array() * h.array() * inv_sigma2.array()).sum();
  const double denom = sigma_b2 * hh + 1.0;
  SpikeSlabConditional out;
  out.mu = sigma_b2 * rh / denom;
  out.s2 = sigma_b2 / denom;
  // beta = (sigma_b / s) exp(-mu^2 / (2 s^2)); w* = w / (beta + w (1 - beta)),
  // evaluated through the slab log-odds log w - log(1-w) - log beta.
  const double log_beta = 0.5 * std::log(sigma_b2 / out.s2) - 0.5 * out.mu * out.mu / out.s2;
  const double log_odds = std::log(w) - std::log1p(-w) - log_beta;
  out.w_star = log_odds >= 0.0 ? 1.0 / (1.0 + std::exp(-log_odds)) : std::exp(log_odds) / (1.0 + std::exp(log_odds));
  return out;
}

template <class Rng>
double draw_spike_slab(const SpikeSlabConditional& c, Rng& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  const double z = std::normal_distribution<double>(0.0, 1.0)(rng);
  if (u >= c.w_star) return 0.0;
  return c.mu + std::sqrt(c.s2) * z;
}

inline void sample_b(ModelState& state, const SpectralImage& y, const IterationStreams& streams, int threads = 1) {
  if (!(state.sigma_b2 > 0.0)) throw std::invalid_argument("sample_b: sigma_b2 must be positive");
  const Vector inv = inverse_variances(state.sigma2);
  const Matrix a = abundances_from_latent(state.z);
  const Matrix s = state.m * a;
  parallel_for(static_cast<std::size_t>(state.n_pixels()), threads, [&](std::size_t idx) {
    const Index n = static_cast<Index>(idx);
    const Vector h = s.col(n).array().square();
    const Vector resid = y.data().col(n) - s.col(n);
    const SpikeSlabConditional c = b_conditional(resid, h, inv, state.sigma_b2, state.w);
    StreamRng rng = streams.stream(StreamBlock::nonlinearity, idx);
    state.b[n] = draw_spike_slab(c, rng);
  });
}

/// Scale floor added to the inverse-gamma scale of each band variance.
inline constexpr double kNoiseScaleFloor = 1e-12;

inline void sample_sigma2(ModelState& state, const SpectralImage& y, const IterationStreams& streams, int threads = 1) {
  const Matrix x = ppnmm_image(state.m, abundances_from_latent(state.z), state.b);
  const Vector ss = (y.data() - x).array().square().rowwise().sum();
  const double shape = 0.5 * static_cast<double>(y.n_pixels());
  parallel_for(static_cast<std::size_t>(state.n_bands()), threads, [&](std::size_t idx) {
    StreamRng rng = streams.stream(StreamBlock::noise, idx);
    state.sigma2[static_cast<Index>(idx)] = inverse_gamma(shape, 0.5 * ss[static_cast<Index>(idx)] + kNoiseScaleFloor, rng);
  });
}

inline int count_nonzero(const Vector& b) { return static_cast<int>((b.array() != 0.0).count()); }

inline void sample_sigma_b2(ModelState& state, const PriorConfig& priors, const IterationStreams& streams) {
  const int k = count_nonzero(state.b);
  const double ss = state.b.squaredNorm();
  StreamRng rng = streams.stream(StreamBlock::hyper_sigma_b2, 0);
  state.sigma_b2 = inverse_gamma(0.5 * k + priors.gamma, 0.5 * ss + priors.nu, rng);
}

inline void sample_w(ModelState& state, const IterationStreams& streams) {
  const int k = count_nonzero(state.b);
  const int n = static_cast<int>(state.b.size());
  StreamRng rng = streams.stream(StreamBlock::hyper_w, 0);
  state.w = beta_draw(k + 1.0, (n - k) + 1.0, rng);
}

// ---------------------------------------------------------------------------
// Driver

/// Starting point: M = prior means (pulled into the open box), uniform
/// abundances, b = 0, band variances from the residual of an unconstrained
/// linear least-squares fit, sigma_b^2 = nu / gamma, w = 1/2.
inline ModelState initial_state(const SpectralImage& y, const Matrix& mbar, const PriorConfig& priors) {
  const Index r = mbar.cols();
  const Index n = y.n_pixels();
  ModelState s;
  s.m = mbar.cwiseMax(kBoundaryNudge).cwiseMin(1.0 - kBoundaryNudge);
  const Vector uniform = Vector::Constant(r, 1.0 / static_cast<double>(r));
  s.z = stick_breaking_inverse(uniform).replicate(1, n);
  s.b = Vector::Zero(n);
  const Matrix a_ls = s.m.colPivHouseholderQr().solve(y.data());
  const Matrix resid = y.data() - s.m * a_ls;
  s.sigma2 = (resid.array().square().rowwise().sum() / static_cast<double>(n)).matrix().cwiseMax(1e-8);
  s.sigma_b2 = priors.nu / priors.gamma;
  s.w = 0.5;
  return s;
}

using IterationObserver = std::function<void(int iteration, const ModelState& state)>;

inline Chain run(const SpectralImage& y, Index r, SamplerConfig cfg, const IterationObserver& observer = {}) {
  cfg.validate();
  if (r < 2) throw std::invalid_argument("run: R must be >= 2");
  if (r > y.n_bands()) throw std::invalid_argument("run: R must not exceed the band count");
  if (cfg.priors.mbar.size() == 0) cfg.priors.mbar = init_endmember_prior(y, r);
  if (cfg.priors.mbar.rows() != y.n_bands() || cfg.priors.mbar.cols() != r)
    throw std::invalid_argument("run: prior means must be L x R");

  Chain chain;
  chain.n_burn = cfg.n_burn;
  chain.prior_means = cfg.priors.mbar;
  ModelState state = initial_state(y, cfg.priors.mbar, cfg.priors);

  ChmcAdaptState adapt_z{cfg.chmc_z.epsilon, {}, true};
  ChmcAdaptState adapt_m{cfg.chmc_m.epsilon, {}, true};
  const auto n_iter = static_cast<std::size_t>(cfg.n_mc);
  chain.accept_z.reserve(n_iter);
  chain.accept_m.reserve(n_iter);
  chain.epsilon_z.reserve(n_iter);
  chain.epsilon_m.reserve(n_iter);

  auto adapt = [&](ChmcAdaptState& st, const ChmcConfig& c, double rate, int t, ChmcBlock block) {
    st.in_burn_in = t <= cfg.n_burn;
    st.record(rate);
    const double before = st.epsilon_current;
    st = adapt_stepsize(std::move(st), c);
    if (st.epsilon_current != before) chain.adapt_events.push_back({t, block, before, st.epsilon_current});
  };

  for (int t = 1; t <= cfg.n_mc; ++t) {
    const IterationStreams streams{cfg.seed, static_cast<std::uint64_t>(t)};

    chain.epsilon_z.push_back(adapt_z.epsilon_current);
    const BlockStats sz = sample_Z(state, y, cfg.chmc_z, adapt_z.epsilon_current, streams, cfg.threads, cfg.chmc_repeats);
    chain.accept_z.push_back(sz.accept_rate());
    chain.diverged_z.push_back(sz.diverged);
    adapt(adapt_z, cfg.chmc_z, sz.accept_rate(), t, ChmcBlock::latent);

    chain.epsilon_m.push_back(adapt_m.epsilon_current);
    const BlockStats sm =
        sample_M(state, y, cfg.priors, cfg.chmc_m, adapt_m.epsilon_current, streams, cfg.threads, cfg.chmc_repeats);
    chain.accept_m.push_back(sm.accept_rate());
    chain.diverged_m.push_back(sm.diverged);
    adapt(adapt_m, cfg.chmc_m, sm.accept_rate(), t, ChmcBlock::endmember);

    sample_b(state, y, streams, cfg.threads);
    sample_sigma2(state, y, streams, cfg.threads);
    sample_sigma_b2(state, cfg.priors, streams);
    sample_w(state, streams);

    if (observer) observer(t, state);
    if (t > cfg.n_burn && (t - cfg.n_burn) % cfg.thin == 0) {
      chain.samples.push_back(state);
      chain.kept_iterations.push_back(t);
    }
  }
  return chain;
}

/// Posterior means over the kept samples. Abundances are averaged on the simplex.
inline UnmixResult mmse_estimate(const Chain& chain) {
  if (chain.samples.empty()) throw std::invalid_argument("mmse_estimate: chain has no kept samples");
  const ModelState& first = chain.samples.front();
  const double k = static_cast<double>(chain.samples.size());
  UnmixResult out;
  out.a_hat = Matrix::Zero(first.z.rows() + 1, first.z.cols());
  out.m_hat = Matrix::Zero(first.m.rows(), first.m.cols());
  out.b_hat = Vector::Zero(first.b.size());
  out.b_nonzero_prob = Vector::Zero(first.b.size());
  out.sigma2_hat = Vector::Zero(first.sigma2.size());
  for (const ModelState& s : chain.samples) {
    out.a_hat += abundances_from_latent(s.z);
    out.m_hat += s.m;
    out.b_hat += s.b;
    out.b_nonzero_prob += (s.b.array() != 0.0).cast<double>().matrix();
    out.sigma2_hat += s.sigma2;
    out.sigma_b2_hat += s.sigma_b2;
    out.w_hat += s.w;
  }
  out.a_hat /= k;
  out.m_hat /= k;
  out.b_hat /= k;
  out.b_nonzero_prob /= k;
  out.sigma2_hat /= k;
  out.sigma_b2_hat /= k;
  out.w_hat /= k;
  return out;
}

/// Names of the columns produced by scalar_trace.
inline std::vector<std::string> scalar_trace_names(Index r) {
  std::vector<std::string> names{"sigma_b2", "w", "sigma2_mean", "nonzero_b_fraction"};
  for (Index j = 0; j < r; ++j) names.push_back("abundance_mean_" + std::to_string(j));
  for (Index j = 0; j < r; ++j) names.push_back("endmember_mean_" + std::to_string(j));
  return names;
}

/// One row per kept sample of low-dimensional summaries used by convergence diagnostics.
inline Matrix scalar_trace(const Chain& chain) {
  if (chain.samples.empty()) return Matrix(0, 0);
  const Index r = chain.samples.front().m.cols();
  Matrix out(static_cast<Index>(chain.samples.size()), 4 + 2 * r);
  for (std::size_t i = 0; i < chain.samples.size(); ++i) {
    const ModelState& s = chain.samples[i];
    const auto row = static_cast<Index>(i);
    out(row, 0) = s.sigma_b2;
    out(row, 1) = s.w;
    out(row, 2) = s.sigma2.mean();
    out(row, 3) = static_cast<double>(count_nonzero(s.b)) / static_cast<double>(s.b.size());
    const Vector a_mean = abundances_from_latent(s.z).rowwise().mean();
    const Vector m_mean = s.m.colwise().mean().transpose();
    out.block(row, 4, 1, r) = a_mean.transpose();
    out.block(row, 4 + r, 1, r) = m_mean.transpose();
  }
  return out;
}

}  // namespace ppnmm
