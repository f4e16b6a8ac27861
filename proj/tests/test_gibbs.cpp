#include "oracles.hpp"
#include "ppnmm/gibbs.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace ppnmm;

namespace {

Vector dirichlet_ones(Index r, std::mt19937_64& rng) {
  std::gamma_distribution<double> g(1.0, 1.0);
  Vector a(r);
  for (Index i = 0; i < r; ++i) a[i] = g(rng);
  return a / a.sum();
}

struct Scene {
  ModelState state;
  SpectralImage y;
  Matrix a_true;
};

/// Small noisy PPNMM scene with the sampler state placed at the truth.
Scene make_scene(Index l, Index r, Index n, double sigma2, std::uint64_t seed, double b_scale = 0.2) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Scene sc;
  ModelState& s = sc.state;
  s.m.resize(l, r);
  for (Index i = 0; i < s.m.size(); ++i) s.m.data()[i] = 0.1 + 0.8 * u(rng);
  sc.a_true.resize(r, n);
  s.z.resize(r - 1, n);
  s.b.resize(n);
  for (Index k = 0; k < n; ++k) {
    sc.a_true.col(k) = dirichlet_ones(r, rng);
    s.z.col(k) = stick_breaking_inverse(sc.a_true.col(k));
    s.b[k] = b_scale * (2.0 * u(rng) - 1.0);
  }
  s.sigma2 = Vector::Constant(l, sigma2);
  s.sigma_b2 = 0.05;
  s.w = 0.5;
  Matrix y = ppnmm_image(s.m, sc.a_true, s.b);
  std::normal_distribution<double> noise(0.0, std::sqrt(sigma2));
  for (Index i = 0; i < y.size(); ++i) y.data()[i] += noise(rng);
  sc.y = SpectralImage(std::move(y));
  return sc;
}

// Brute-force posterior of b for one pixel: spike mass (1-w) L(0) versus slab
// mass w * integral L(b) N(b; 0, sigma_b2) db, all by quadrature.
struct BruteForceB {
  double w_star, mu, s2;
};

BruteForceB brute_force_b(const Vector& resid, const Vector& h, const Vector& sigma2, double sigma_b2, double w) {
  auto log_lik = [&](double b) {
    double acc = 0.0;
    for (Index l = 0; l < resid.size(); ++l) acc -= 0.5 * std::pow(resid[l] - b * h[l], 2) / sigma2[l];
    return acc;
  };
  auto log_slab = [&](double b) {
    return log_lik(b) - 0.5 * b * b / sigma_b2 - 0.5 * std::log(2.0 * std::numbers::pi * sigma_b2);
  };
  // locate the slab mode by golden-section search on the concave log integrand
  double lo = -1e3, hi = 1e3;
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  for (int it = 0; it < 300; ++it) {
    const double c = hi - g * (hi - lo), d = lo + g * (hi - lo);
    (log_slab(c) > log_slab(d) ? hi : lo) = (log_slab(c) > log_slab(d) ? d : c);
  }
  const double mode = 0.5 * (lo + hi);
  const double step = 1e-3;
  const double curv = -(log_slab(mode + step) - 2.0 * log_slab(mode) + log_slab(mode - step)) / (step * step);
  const double width = 1.0 / std::sqrt(curv);
  const double ref = log_slab(mode);
  auto f = [&](double b) { return std::exp(log_slab(b) - ref); };
  const double a0 = mode - 40.0 * width, a1 = mode + 40.0 * width;
  const double z0 = oracle::integrate(f, a0, a1);
  const double z1 = oracle::integrate([&](double b) { return b * f(b); }, a0, a1);
  const double mu = z1 / z0;
  const double z2 = oracle::integrate([&](double b) { return (b - mu) * (b - mu) * f(b); }, a0, a1);
  // log slab mass and log spike mass on a common scale
  const double log_slab_mass = std::log(w) + std::log(z0) + ref;
  const double log_spike_mass = std::log1p(-w) + log_lik(0.0);
  const double w_star = 1.0 / (1.0 + std::exp(log_spike_mass - log_slab_mass));
  return {w_star, mu, z2 / z0};
}

}  // namespace

TEST(BConditional, MatchesQuadratureScalarCase) {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 50; ++t) {
    const Vector resid = Vector::Constant(1, u(rng) - 0.5);
    const Vector h = Vector::Constant(1, 0.05 + 0.9 * u(rng));
    const Vector s2 = Vector::Constant(1, 0.005 + 0.05 * u(rng));
    const double sb2 = 0.01 + u(rng), w = 0.05 + 0.9 * u(rng);
    const SpikeSlabConditional c = b_conditional(resid, h, s2.cwiseInverse(), sb2, w);
    const BruteForceB ref = brute_force_b(resid, h, s2, sb2, w);
    EXPECT_NEAR(c.w_star, ref.w_star, 1e-8 * ref.w_star);
    EXPECT_NEAR(c.mu, ref.mu, 1e-8 * std::abs(ref.mu));
    EXPECT_NEAR(c.s2, ref.s2, 1e-8 * ref.s2);
  }
}

TEST(BConditional, ExtremeWeights) {
  const Vector r = Vector::Constant(3, 0.1), h = Vector::Constant(3, 0.2), inv = Vector::Constant(3, 100.0);
  EXPECT_EQ(b_conditional(r, h, inv, 0.5, 0.0).w_star, 0.0);
  EXPECT_EQ(b_conditional(r, h, inv, 0.5, 1.0).w_star, 1.0);
}

TEST(SampleB, SpikeOnlyAndSlabOnlyPriors) {
  Scene sc = make_scene(6, 3, 40, 1e-3, 2);
  sc.state.w = 0.0;
  sample_b(sc.state, sc.y, IterationStreams{1, 1});
  EXPECT_EQ(count_nonzero(sc.state.b), 0);
  sc.state.w = 1.0;
  sample_b(sc.state, sc.y, IterationStreams{1, 2});
  EXPECT_EQ(count_nonzero(sc.state.b), 40);
}

TEST(SampleSigma2, InvGammaOneOneMedian) {
  Scene sc = make_scene(2, 2, 2, 1.0, 3, 0.0);
  Matrix y = ppnmm_image(sc.state.m, abundances_from_latent(sc.state.z), sc.state.b);
  y.row(0).array() += 1.0;
  const SpectralImage img(y);
  std::vector<double> draws;
  for (int t = 1; t <= 100000; ++t) {
    sample_sigma2(sc.state, img, IterationStreams{7, static_cast<std::uint64_t>(t)});
    draws.push_back(sc.state.sigma2[0]);
  }
  std::nth_element(draws.begin(), draws.begin() + 50000, draws.end());
  const double median = draws[50000];
  const double m0 = 1.0 / std::log(2.0);
  // asymptotic SE of a sample median: 1 / (2 f(m) sqrt(n)), f = InvGamma(1,1) density
  const double f = std::exp(-1.0 / m0) / (m0 * m0);
  EXPECT_LT(std::abs(median - m0), 3.0 / (2.0 * f * std::sqrt(100000.0)));
}

TEST(SampleSigma2, ZeroResidualGivesTinyVariances) {
  Scene sc = make_scene(4, 2, 10, 1.0, 4, 0.0);
  const SpectralImage exact(ppnmm_image(sc.state.m, abundances_from_latent(sc.state.z), sc.state.b));
  for (int t = 1; t <= 100; ++t) {
    sample_sigma2(sc.state, exact, IterationStreams{1, static_cast<std::uint64_t>(t)});
    EXPECT_LT(sc.state.sigma2.maxCoeff(), 1e-9);
    EXPECT_GT(sc.state.sigma2.minCoeff(), 0.0);
  }
}

TEST(SampleSigmaB2, PriorWhenAllLinear) {
  ModelState s;
  s.b = Vector::Zero(20);
  PriorConfig pr;
  std::vector<double> draws;
  for (int t = 1; t <= 10000; ++t) {
    sample_sigma_b2(s, pr, IterationStreams{3, static_cast<std::uint64_t>(t)});
    draws.push_back(s.sigma_b2);
  }
  const double d = oracle::ks_statistic(draws, [](double x) { return oracle::inverse_gamma_cdf(x, 0.1, 0.1); });
  EXPECT_GT(oracle::ks_pvalue(d, draws.size()), 0.01);
}

// IG(1.1, 1.1) has infinite variance, so compare the whole distribution.
TEST(SampleSigmaB2, PosteriorDistribution) {
  ModelState s;
  s.b = Vector(3);
  s.b << 1.0, 0.0, -1.0;
  PriorConfig pr;
  std::vector<double> draws;
  for (int t = 1; t <= 10000; ++t) {
    sample_sigma_b2(s, pr, IterationStreams{5, static_cast<std::uint64_t>(t)});
    draws.push_back(s.sigma_b2);
  }
  const double d = oracle::ks_statistic(draws, [](double x) { return oracle::inverse_gamma_cdf(x, 1.1, 1.1); });
  EXPECT_GT(oracle::ks_pvalue(d, draws.size()), 0.01);
}

TEST(SampleW, BetaMeans) {
  auto mean_w = [](Vector b) {
    ModelState s;
    s.b = std::move(b);
    std::vector<double> draws;
    for (int t = 1; t <= 20000; ++t) {
      sample_w(s, IterationStreams{9, static_cast<std::uint64_t>(t)});
      draws.push_back(s.w);
    }
    return oracle::mean_se(draws);
  };
  const oracle::MeanSe all = mean_w(Vector::Ones(10));
  EXPECT_LT(std::abs(all.mean - 11.0 / 12.0), 3.0 * all.se);
  const oracle::MeanSe none = mean_w(Vector::Zero(10));
  EXPECT_LT(std::abs(none.mean - 1.0 / 12.0), 3.0 * none.se);
  Vector half = Vector::Zero(10);
  half.head(5).setOnes();
  const oracle::MeanSe h = mean_w(half);
  EXPECT_LT(std::abs(h.mean - 0.5), 3.0 * h.se);
}

// One pixel, R = 2: the latent conditional is a 1D density on (0,1).
TEST(SampleZ, OnePixelMatchesQuadrature) {
  Scene sc = make_scene(3, 2, 1, 0.05, 6);
  const Vector y = sc.y.data().col(0);
  const ModelState& s = sc.state;
  auto density = [&](double z) {
    const double a0 = 1.0 - z, a1 = z;
    double e = 0.0;
    for (Index l = 0; l < 3; ++l) {
      const double lin = s.m(l, 0) * a0 + s.m(l, 1) * a1;
      e += 0.5 * std::pow(y[l] - lin - s.b[0] * lin * lin, 2) / s.sigma2[l];
    }
    return std::exp(-e);
  };
  const double mean = oracle::integrate([&](double z) { return z * density(z); }, 0.0, 1.0) /
                      oracle::integrate(density, 0.0, 1.0);

  ModelState st = sc.state;
  ChmcConfig cfg = default_latent_chmc();
  cfg.epsilon = 0.05;
  std::vector<double> zs;
  for (int t = 1; t <= 51000; ++t) {
    sample_Z(st, sc.y, cfg, cfg.epsilon, IterationStreams{13, static_cast<std::uint64_t>(t)});
    if (t > 1000) zs.push_back(st.z(0, 0));
  }
  const oracle::MeanSe m = oracle::batch_mean_se(zs);
  EXPECT_LT(std::abs(m.mean - mean), 3.0 * m.se) << "chain " << m.mean << " quadrature " << mean;
}

TEST(SampleZ, HugeNoiseRecoversUniformPrior) {
  Scene sc = make_scene(4, 3, 1, 1e6, 7);
  ChmcConfig cfg = default_latent_chmc();
  cfg.epsilon = 0.05;
  Matrix draws(3, 20000);
  for (int t = 1; t <= 21000; ++t) {
    sample_Z(sc.state, sc.y, cfg, cfg.epsilon, IterationStreams{17, static_cast<std::uint64_t>(t)});
    if (t > 1000) draws.col(t - 1001) = abundances_from_latent(sc.state.z);
  }
  for (Index r = 0; r < 3; ++r) {
    std::vector<double> x;
    for (Index i = 0; i < draws.cols(); ++i) x.push_back(draws(r, i));
    const oracle::MeanSe m = oracle::batch_mean_se(x);
    EXPECT_LT(std::abs(m.mean - 1.0 / 3.0), 3.0 * m.se) << "component " << r;
  }
}

TEST(SampleZ, TinyNoiseConcentratesOnTruth) {
  Scene sc = make_scene(10, 3, 1, 1e-8, 8);
  ModelState st = sc.state;
  st.z = stick_breaking_inverse(Vector::Constant(3, 1.0 / 3.0));
  ChmcConfig cfg = default_latent_chmc();
  ChmcAdaptState adapt{cfg.epsilon, {}, true};
  Vector mean = Vector::Zero(3);
  int kept = 0;
  for (int t = 1; t <= 4000; ++t) {
    const BlockStats bs = sample_Z(st, sc.y, cfg, adapt.epsilon_current, IterationStreams{19, static_cast<std::uint64_t>(t)});
    adapt.in_burn_in = t <= 3000;
    adapt.record(bs.accept_rate());
    adapt = adapt_stepsize(std::move(adapt), cfg);
    if (t > 3000) {
      mean += abundances_from_latent(st.z).col(0);
      ++kept;
    }
  }
  mean /= kept;
  EXPECT_LT((mean - sc.a_true.col(0)).cwiseAbs().maxCoeff(), 0.01);
}

TEST(SampleM, TightPriorPinsRowsToPriorMeans) {
  Scene sc = make_scene(5, 3, 30, 1e-3, 9);
  PriorConfig pr;
  pr.s2 = 1e-8;
  pr.mbar = Matrix::Constant(5, 3, 0.4);
  ModelState st = sc.state;
  ChmcConfig cfg = default_endmember_chmc();
  ChmcAdaptState adapt{cfg.epsilon, {}, true};
  Matrix mean = Matrix::Zero(5, 3);
  int kept = 0;
  for (int t = 1; t <= 1500; ++t) {
    const BlockStats bs =
        sample_M(st, sc.y, pr, cfg, adapt.epsilon_current, IterationStreams{23, static_cast<std::uint64_t>(t)});
    adapt.in_burn_in = t <= 1000;
    adapt.record(bs.accept_rate());
    adapt = adapt_stepsize(std::move(adapt), cfg);
    ASSERT_TRUE((st.m.array() > 0.0).all() && (st.m.array() < 1.0).all());
    if (t > 1000) {
      mean += st.m;
      ++kept;
    }
  }
  mean /= kept;
  EXPECT_LT((mean - pr.mbar).cwiseAbs().maxCoeff(), 0.01);
}

TEST(SampleM, FlatPriorLinearCaseMatchesLeastSquares) {
  const Index r = 3, n = 200;
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ModelState st;
  Matrix a(r, n);
  st.z.resize(r - 1, n);
  for (Index k = 0; k < n; ++k) {
    a.col(k) = dirichlet_ones(r, rng);
    st.z.col(k) = stick_breaking_inverse(a.col(k));
  }
  Vector m_true(3);
  m_true << 0.35, 0.5, 0.65;
  const double sigma2 = 1e-3;
  std::normal_distribution<double> noise(0.0, std::sqrt(sigma2));
  // SpectralImage needs two bands; the second one is a copy and is not examined.
  Matrix y(2, n);
  for (Index k = 0; k < n; ++k) y(0, k) = y(1, k) = a.col(k).dot(m_true) + noise(rng);
  const SpectralImage img(y);
  st.m = m_true.transpose().replicate(2, 1);
  st.b = Vector::Zero(n);
  st.sigma2 = Vector::Constant(2, sigma2);
  PriorConfig pr;
  pr.s2 = 1e6;
  pr.mbar = Matrix::Constant(2, 3, 0.5);

  const Vector ls = (a * a.transpose() + Matrix::Identity(r, r) * sigma2 / pr.s2)
                        .ldlt()
                        .solve(a * y.row(0).transpose() + sigma2 / pr.s2 * pr.mbar.row(0).transpose());
  ChmcConfig cfg = default_endmember_chmc();
  std::vector<std::vector<double>> draws(r);
  for (int t = 1; t <= 21000; ++t) {
    sample_M(st, img, pr, cfg, cfg.epsilon, IterationStreams{29, static_cast<std::uint64_t>(t)});
    if (t > 1000)
      for (Index j = 0; j < r; ++j) draws[static_cast<std::size_t>(j)].push_back(st.m(0, j));
  }
  for (Index j = 0; j < r; ++j) {
    const oracle::MeanSe m = oracle::batch_mean_se(draws[static_cast<std::size_t>(j)]);
    EXPECT_LT(std::abs(m.mean - ls[j]), 3.0 * m.se) << "coordinate " << j;
  }
}

TEST(Run, SmokeRunKeepsInvariants) {
  Scene sc = make_scene(5, 2, 4, 1e-3, 11);
  SamplerConfig cfg;
  cfg.n_mc = 200;
  cfg.n_burn = 100;
  cfg.thin = 1;
  cfg.priors.mbar = sc.state.m;
  int checked = 0;
  const Chain chain = run(sc.y, 2, cfg, [&](int, const ModelState& s) {
    EXPECT_TRUE(invariant_violations(s).empty());
    ++checked;
  });
  EXPECT_EQ(checked, 200);
  EXPECT_EQ(chain.samples.size(), 100u);
  for (const ModelState& s : chain.samples) EXPECT_TRUE(invariant_violations(s).empty());
}

TEST(Run, DeterministicAcrossRerunsAndThreadCounts) {
  Scene sc = make_scene(8, 3, 12, 1e-3, 12);
  SamplerConfig cfg;
  cfg.n_mc = 60;
  cfg.n_burn = 20;
  cfg.thin = 2;
  cfg.seed = 99;
  cfg.threads = 1;
  const Chain c1 = run(sc.y, 3, cfg);
  const Chain c2 = run(sc.y, 3, cfg);
  cfg.threads = 4;
  const Chain c3 = run(sc.y, 3, cfg);
  ASSERT_EQ(c1.samples.size(), c3.samples.size());
  for (std::size_t i = 0; i < c1.samples.size(); ++i) {
    for (const Chain* other : {&c2, &c3}) {
      const ModelState& a = c1.samples[i];
      const ModelState& b = other->samples[i];
      EXPECT_EQ(a.z, b.z);
      EXPECT_EQ(a.m, b.m);
      EXPECT_EQ(a.b, b.b);
      EXPECT_EQ(a.sigma2, b.sigma2);
      EXPECT_EQ(a.sigma_b2, b.sigma_b2);
      EXPECT_EQ(a.w, b.w);
    }
  }
}

TEST(Run, NoAdaptationAfterBurnIn) {
  Scene sc = make_scene(6, 3, 10, 1e-3, 14);
  SamplerConfig cfg;
  cfg.n_mc = 400;
  cfg.n_burn = 200;
  cfg.thin = 1;
  const Chain chain = run(sc.y, 3, cfg);
  for (const AdaptEvent& e : chain.adapt_events) EXPECT_LE(e.iteration, cfg.n_burn);
  for (std::size_t t = 200; t < chain.epsilon_z.size(); ++t) {
    EXPECT_EQ(chain.epsilon_z[t], chain.epsilon_z[200]);
    EXPECT_EQ(chain.epsilon_m[t], chain.epsilon_m[200]);
  }
}

TEST(Run, RejectsBadArguments) {
  Scene sc = make_scene(4, 2, 5, 1e-3, 15);
  SamplerConfig cfg;
  cfg.n_mc = 10;
  cfg.n_burn = 10;
  EXPECT_THROW(run(sc.y, 2, cfg), std::invalid_argument);
  cfg.n_burn = 5;
  EXPECT_THROW(run(sc.y, 1, cfg), std::invalid_argument);
  cfg.priors.mbar = Matrix::Constant(3, 2, 0.5);
  EXPECT_THROW(run(sc.y, 2, cfg), std::invalid_argument);
}

TEST(Mmse, IdenticalStates) {
  Scene sc = make_scene(4, 3, 6, 1e-3, 16);
  Chain chain;
  chain.samples.assign(5, sc.state);
  const UnmixResult r = mmse_estimate(chain);
  EXPECT_TRUE(r.a_hat.isApprox(abundances_from_latent(sc.state.z), 1e-14));
  EXPECT_TRUE(r.m_hat.isApprox(sc.state.m, 1e-14));
  EXPECT_TRUE(r.b_hat.isApprox(sc.state.b, 1e-14));
  EXPECT_NEAR(r.w_hat, sc.state.w, 1e-15);
}

TEST(Mmse, AveragesAbundancesAndNonlinearity) {
  ModelState s;
  s.m = Matrix::Constant(2, 2, 0.5);
  s.sigma2 = Vector::Ones(2);
  s.z = Matrix::Zero(1, 1);  // a = (1, 0)
  s.b = Vector::Zero(1);
  Chain chain;
  chain.samples.push_back(s);
  s.z(0, 0) = 1.0;  // a = (0, 1)
  chain.samples.push_back(s);
  const UnmixResult r = mmse_estimate(chain);
  EXPECT_DOUBLE_EQ(r.a_hat(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(r.a_hat(1, 0), 0.5);

  Chain bchain;
  for (double b : {0.0, 0.0, 3.0, 1.0}) {
    s.b[0] = b;
    bchain.samples.push_back(s);
  }
  const UnmixResult rb = mmse_estimate(bchain);
  EXPECT_DOUBLE_EQ(rb.b_hat[0], 1.0);
  EXPECT_DOUBLE_EQ(rb.b_nonzero_prob[0], 0.5);
  EXPECT_THROW(mmse_estimate(Chain{}), std::invalid_argument);
}

TEST(ScalarTrace, ShapeAndNames) {
  Scene sc = make_scene(4, 3, 6, 1e-3, 18);
  Chain chain;
  chain.samples.assign(3, sc.state);
  const Matrix tr = scalar_trace(chain);
  EXPECT_EQ(tr.rows(), 3);
  EXPECT_EQ(tr.cols(), static_cast<Index>(scalar_trace_names(3).size()));
  EXPECT_NEAR(tr(0, 4) + tr(0, 5) + tr(0, 6), 1.0, 1e-14);
}
