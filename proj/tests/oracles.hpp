#pragma once

// Reference computations used by the tests. Everything here is written
// independently of the library code paths it checks: densities are evaluated
// directly (long double where cancellation matters), CDFs come from Boost.Math
// and integrals from adaptive Gauss-Kronrod quadrature.

#include "ppnmm/core_model.hpp"

#include <Eigen/Cholesky>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/special_functions/beta.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

namespace oracle {

using ppnmm::Index;
using ppnmm::Matrix;
using ppnmm::Vector;

// ---------------------------------------------------------------------------
// Model quantities in long double, written from the definitions.

/// a_r = z_1 ... z_{r-1} (1 - z_r), last entry the full product.
inline std::vector<long double> abundances(const std::vector<long double>& z) {
  const std::size_t r = z.size() + 1;
  std::vector<long double> a(r);
  for (std::size_t i = 0; i < r; ++i) {
    long double prod = 1.0L;
    for (std::size_t k = 0; k < i && k < z.size(); ++k) prod *= z[k];
    a[i] = i + 1 < r ? prod * (1.0L - z[i]) : prod;
  }
  return a;
}

/// -log of (Gaussian likelihood of one pixel x prod Beta(R-r, 1) densities of z),
/// up to an additive constant.
inline long double pixel_energy(const std::vector<long double>& z, const Vector& y, const Matrix& m, double b,
                                const Vector& sigma2) {
  const auto a = abundances(z);
  long double e = 0.0L;
  for (Index l = 0; l < m.rows(); ++l) {
    long double s = 0.0L;
    for (Index r = 0; r < m.cols(); ++r) s += static_cast<long double>(m(l, r)) * a[static_cast<std::size_t>(r)];
    const long double x = s + static_cast<long double>(b) * s * s;
    const long double d = static_cast<long double>(y[l]) - x;
    e += 0.5L * d * d / static_cast<long double>(sigma2[l]);
  }
  const std::size_t rr = static_cast<std::size_t>(m.cols());
  for (std::size_t i = 0; i + 1 < rr; ++i) e -= static_cast<long double>(rr - i - 2) * std::log(z[i]);
  return e;
}

/// ||y_row - t||^2 / (2 sigma2) + ||m - mbar||^2 / (2 s2) in long double.
inline long double row_energy(const std::vector<long double>& mrow, const Vector& y_row, const Matrix& a,
                              const Vector& b, double sigma2, double s2, const Vector& mbar) {
  long double e = 0.0L;
  for (Index n = 0; n < a.cols(); ++n) {
    long double s = 0.0L;
    for (Index r = 0; r < a.rows(); ++r) s += mrow[static_cast<std::size_t>(r)] * static_cast<long double>(a(r, n));
    const long double t = s + static_cast<long double>(b[n]) * s * s;
    const long double d = static_cast<long double>(y_row[n]) - t;
    e += 0.5L * d * d / static_cast<long double>(sigma2);
  }
  if (std::isfinite(s2)) {
    for (Index r = 0; r < a.rows(); ++r) {
      const long double d = mrow[static_cast<std::size_t>(r)] - static_cast<long double>(mbar[r]);
      e += 0.5L * d * d / static_cast<long double>(s2);
    }
  }
  return e;
}

/// Central finite differences of f at x with step h.
inline Vector central_difference(const std::function<long double(const std::vector<long double>&)>& f,
                                 const Vector& x, double h) {
  Vector g(x.size());
  std::vector<long double> xp(static_cast<std::size_t>(x.size()));
  for (Index i = 0; i < x.size(); ++i) xp[static_cast<std::size_t>(i)] = x[i];
  for (Index i = 0; i < x.size(); ++i) {
    auto up = xp, dn = xp;
    up[static_cast<std::size_t>(i)] += h;
    dn[static_cast<std::size_t>(i)] -= h;
    g[i] = static_cast<double>((f(up) - f(dn)) / (2.0L * h));
  }
  return g;
}

/// Log density of N(mean, cov) at x via a dense Cholesky factorization.
inline double gaussian_logpdf(const Vector& x, const Vector& mean, const Matrix& cov) {
  const Eigen::LLT<Matrix> llt(cov);
  const Vector d = x - mean;
  const Vector w = llt.matrixL().solve(d);
  const Matrix lmat = llt.matrixL();
  double logdet = 0.0;
  for (Index i = 0; i < lmat.rows(); ++i) logdet += 2.0 * std::log(lmat(i, i));
  return -0.5 * w.squaredNorm() - 0.5 * logdet - 0.5 * static_cast<double>(x.size()) * std::log(2.0 * std::numbers::pi);
}

// ---------------------------------------------------------------------------
// Goodness of fit

/// Two-sided KS statistic of the sample against a CDF F that may have atoms;
/// F_left(x) is the left limit P(X < x). The usual critical values are
/// conservative for discontinuous F.
inline double ks_statistic(std::vector<double> xs, const std::function<double(double)>& cdf,
                           const std::function<double(double)>& cdf_left) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  std::size_t i = 0;
  while (i < xs.size()) {
    std::size_t j = i;
    while (j < xs.size() && xs[j] == xs[i]) ++j;
    const double below = static_cast<double>(i) / n;  // empirical CDF just left of xs[i]
    const double at = static_cast<double>(j) / n;     // empirical CDF at xs[i]
    d = std::max({d, std::abs(at - cdf(xs[i])), std::abs(below - cdf_left(xs[i]))});
    i = j;
  }
  return d;
}

inline double ks_statistic(std::vector<double> xs, const std::function<double(double)>& cdf) {
  return ks_statistic(std::move(xs), cdf, cdf);
}

/// P(K > t) for the Kolmogorov distribution.
inline double kolmogorov_survival(double t) {
  if (t <= 0.0) return 1.0;
  double s = 0.0;
  for (int k = 1; k <= 200; ++k) {
    const double term = std::exp(-2.0 * k * k * t * t);
    s += (k % 2 == 1 ? 2.0 : -2.0) * term;
    if (term < 1e-18) break;
  }
  return std::clamp(s, 0.0, 1.0);
}

/// Asymptotic KS p-value with Stephens' small-sample correction.
inline double ks_pvalue(double d, std::size_t n) {
  const double sn = std::sqrt(static_cast<double>(n));
  return kolmogorov_survival((sn + 0.12 + 0.11 / sn) * d);
}

// ---------------------------------------------------------------------------
// Distribution functions

inline double inverse_gamma_cdf(double x, double shape, double scale) {
  if (x <= 0.0) return 0.0;
  return boost::math::gamma_q(shape, scale / x);
}

inline double beta_cdf(double x, double a, double b) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  return boost::math::ibeta(a, b, x);
}

template <class F>
double integrate(F&& f, double lo, double hi) {
  return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, lo, hi, 15, 1e-13);
}

// ---------------------------------------------------------------------------
// Sample statistics

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};

/// Mean and i.i.d. standard error.
inline MeanSe mean_se(const std::vector<double>& x) {
  const double n = static_cast<double>(x.size());
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= n;
  double ss = 0.0;
  for (double v : x) ss += (v - mu) * (v - mu);
  return {mu, std::sqrt(ss / (n - 1.0) / n)};
}

/// Mean and batch-means standard error for autocorrelated sequences.
inline MeanSe batch_mean_se(const std::vector<double>& x, std::size_t n_batches = 50) {
  const std::size_t len = x.size() / n_batches;
  std::vector<double> means(n_batches);
  for (std::size_t b = 0; b < n_batches; ++b) {
    double s = 0.0;
    for (std::size_t i = 0; i < len; ++i) s += x[b * len + i];
    means[b] = s / static_cast<double>(len);
  }
  const MeanSe m = mean_se(means);
  double total = 0.0;
  for (std::size_t i = 0; i < n_batches * len; ++i) total += x[i];
  return {total / static_cast<double>(n_batches * len), m.se};
}

}  // namespace oracle
