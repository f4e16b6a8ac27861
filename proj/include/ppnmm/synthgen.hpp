#pragma once

// Synthetic scenes: abundances drawn uniformly on the simplex truncated below
// a purity ceiling, mixed by the linear, polynomial post-nonlinear or
// generalized bilinear model, then corrupted by i.i.d. Gaussian noise.

#include "ppnmm/core_model.hpp"
#include "ppnmm/parallel.hpp"
#include "ppnmm/rng.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>

namespace ppnmm {

enum class MixingModel { lmm, ppnmm, gbm };

inline std::string to_string(MixingModel m) {
  switch (m) {
    case MixingModel::lmm: return "LMM";
    case MixingModel::ppnmm: return "PPNMM";
    case MixingModel::gbm: return "GBM";
  }
  return "?";
}

inline MixingModel parse_mixing_model(const std::string& s) {
  if (s == "LMM" || s == "lmm") return MixingModel::lmm;
  if (s == "PPNMM" || s == "ppnmm") return MixingModel::ppnmm;
  if (s == "GBM" || s == "gbm") return MixingModel::gbm;
  throw std::invalid_argument("unknown mixing model '" + s + "' (expected LMM, PPNMM or GBM)");
}

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

struct SynthSpec {
  int n_rows = 50;
  int n_cols = 50;
  int n_endmembers = 3;
  int n_bands = 207;
  MixingModel mixing_model = MixingModel::ppnmm;
  double a_max = 0.9;
  double noise_sigma2 = 1e-4;
  Interval b_range{-0.3, 0.3};
  // PPNMM only: b_n is drawn from b_range with (-b_min_abs, b_min_abs) removed.
  double b_min_abs = 0.0;
  Interval gamma_range{0.0, 1.0};
  std::optional<Matrix> endmembers;
  std::uint64_t seed = 1;

  Index n_pixels() const { return static_cast<Index>(n_rows) * n_cols; }

  void validate() const {
    if (n_rows < 1 || n_cols < 1) throw std::invalid_argument("SynthSpec: grid dimensions must be positive");
    if (n_endmembers < 2) throw std::invalid_argument("SynthSpec: R must be >= 2");
    if (n_bands < 2) throw std::invalid_argument("SynthSpec: L must be >= 2");
    if (n_endmembers > n_bands) throw std::invalid_argument("SynthSpec: R must not exceed L");
    if (!(a_max > 1.0 / n_endmembers && a_max <= 1.0)) throw std::invalid_argument("SynthSpec: a_max must be in (1/R, 1]");
    if (!(noise_sigma2 > 0.0)) throw std::invalid_argument("SynthSpec: noise variance must be positive");
    if (b_range.lo > b_range.hi) throw std::invalid_argument("SynthSpec: empty b range");
    if (gamma_range.lo > gamma_range.hi) throw std::invalid_argument("SynthSpec: empty gamma range");
    if (b_min_abs < 0.0) throw std::invalid_argument("SynthSpec: b_min_abs must be non-negative");
    if (b_min_abs > 0.0 && std::max(b_range.lo, b_min_abs) > b_range.hi && std::min(b_range.hi, -b_min_abs) < b_range.lo)
      throw std::invalid_argument("SynthSpec: b_min_abs excludes the whole b range");
    if (endmembers) {
      if (endmembers->rows() != n_bands || endmembers->cols() != n_endmembers)
        throw std::invalid_argument("SynthSpec: endmember matrix must be L x R");
      if (!((endmembers->array() >= 0.0).all() && (endmembers->array() <= 1.0).all()))
        throw std::invalid_argument("SynthSpec: endmember entries must lie in [0,1]");
    }
  }
};

struct GroundTruth {
  MixingModel mixing_model = MixingModel::lmm;
  Matrix m_true;
  Matrix a_true;
  Vector b_true;      // PPNMM; zeros otherwise
  Matrix gamma_true;  // GBM: R(R-1)/2 x N, pair order (0,1), (0,2), ..., (1,2), ...
  double sigma2_true = 0.0;
  Matrix x_clean;  // noiseless mixture
};

class RejectionBudgetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TruncatedSimplexDraw {
  Vector a;
  long tries = 0;
};

/// Uniform point of the open simplex (normalized exponential spacings).
template <class Rng>
Vector uniform_simplex(Index r, Rng& rng) {
  std::exponential_distribution<double> expo(1.0);
  Vector e(r);
  for (Index i = 0; i < r; ++i) e[i] = expo(rng);
  return e / e.sum();
}

/// Uniform draw from {a : 0 < a_r < a_max, sum a = 1} by rejection.
template <class Rng>
TruncatedSimplexDraw sample_truncated_simplex(Index r, double a_max, Rng& rng, long max_tries = 1000000) {
  if (r < 2) throw std::invalid_argument("sample_truncated_simplex: R must be >= 2");
  if (!(a_max > 1.0 / static_cast<double>(r))) throw std::invalid_argument("sample_truncated_simplex: a_max must exceed 1/R");
  for (long t = 1; t <= max_tries; ++t) {
    Vector a = uniform_simplex(r, rng);
    if (a.maxCoeff() < a_max && a.minCoeff() > 0.0) return {std::move(a), t};
  }
  throw RejectionBudgetError("sample_truncated_simplex: no acceptable draw after " + std::to_string(max_tries) +
                             " tries (R=" + std::to_string(r) + ", a_max=" + std::to_string(a_max) + ")");
}

/// Spectral angle between two nonzero vectors, radians.
inline double spectral_angle(const Eigen::Ref<const Vector>& u, const Eigen::Ref<const Vector>& v) {
  const double nu = u.norm();
  const double nv = v.norm();
  if (nu == 0.0 || nv == 0.0) throw std::invalid_argument("spectral_angle: zero-norm vector");
  const double c = std::clamp(u.dot(v) / (nu * nv), -1.0, 1.0);
  return std::acos(c);
}

inline constexpr double kMinEndmemberAngle = 0.15;
// Per-spectrum RMS reflectance range; with the default noise level
// (sigma2 = 1e-4) mixed scenes land near 21 dB.
inline constexpr double kEndmemberRmsLo = 0.11;
inline constexpr double kEndmemberRmsHi = 0.13;

/// R smooth spectra in [0.05, 0.95] built from 3-6 Gaussian bumps over a low
/// baseline and scaled to an RMS reflectance in [kEndmemberRmsLo,
/// kEndmemberRmsHi], resampled until every pair is at least 0.15 rad apart.
template <class Rng>
Matrix procedural_endmembers(Index r, Index l, Rng& rng, int max_attempts = 10000) {
  if (r < 2 || l < 2 || r > l) throw std::invalid_argument("procedural_endmembers: need 2 <= R <= L");
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::uniform_int_distribution<int> bump_count(3, 6);
  const double span = static_cast<double>(l - 1);
  auto one_spectrum = [&] {
    Vector s = Vector::Constant(l, 0.01 * unif(rng));
    const int k = bump_count(rng);
    for (int b = 0; b < k; ++b) {
      const double center = span * unif(rng);
      const double width = span * (0.03 + 0.05 * unif(rng));
      const double height = 0.05 + 0.25 * unif(rng);
      for (Index i = 0; i < l; ++i) {
        const double d = (static_cast<double>(i) - center) / width;
        s[i] += height * std::exp(-0.5 * d * d);
      }
    }
    // fix the brightness so scene SNR is governed by the noise level alone
    const double rms = kEndmemberRmsLo + (kEndmemberRmsHi - kEndmemberRmsLo) * unif(rng);
    s *= rms / std::sqrt(s.squaredNorm() / static_cast<double>(l));
    return Vector(s.cwiseMax(0.05).cwiseMin(0.95));
  };
  Matrix m(l, r);
  Index filled = 0;
  for (int attempt = 0; attempt < max_attempts && filled < r; ++attempt) {
    Vector cand = one_spectrum();
    bool ok = true;
    for (Index j = 0; j < filled && ok; ++j) ok = spectral_angle(cand, m.col(j)) >= kMinEndmemberAngle;
    if (ok) m.col(filled++) = cand;
  }
  if (filled < r) throw RejectionBudgetError("procedural_endmembers: could not reach the minimum pairwise angle");
  return m;
}

/// Average signal-to-noise ratio in dB: 10 log10(||X||_F^2 / (N L sigma2)).
inline double snr_db(const Matrix& x_clean, double sigma2) {
  return 10.0 * std::log10(x_clean.squaredNorm() / (static_cast<double>(x_clean.size()) * sigma2));
}

template <class Rng>
double draw_b(const SynthSpec& spec, Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double lo = spec.b_range.lo;
  const double hi = spec.b_range.hi;
  if (spec.b_min_abs <= 0.0) return lo + (hi - lo) * unif(rng);
  const double neg_hi = std::min(hi, -spec.b_min_abs);
  const double pos_lo = std::max(lo, spec.b_min_abs);
  const double neg_len = std::max(0.0, neg_hi - lo);
  const double pos_len = std::max(0.0, hi - pos_lo);
  const double u = (neg_len + pos_len) * unif(rng);
  return u < neg_len ? lo + u : pos_lo + (u - neg_len);
}

inline std::pair<SpectralImage, GroundTruth> generate(const SynthSpec& spec, int threads = 1) {
  spec.validate();
  const Index r = spec.n_endmembers;
  const Index l = spec.n_bands;
  const Index n = spec.n_pixels();
  const Index n_pairs = r * (r - 1) / 2;

  GroundTruth truth;
  truth.mixing_model = spec.mixing_model;
  truth.sigma2_true = spec.noise_sigma2;
  if (spec.endmembers) {
    truth.m_true = *spec.endmembers;
  } else {
    StreamRng rng(stream_key(spec.seed, 0, StreamBlock::endmember_gen, 0));
    truth.m_true = procedural_endmembers(r, l, rng);
  }
  truth.a_true.resize(r, n);
  truth.b_true = Vector::Zero(n);
  if (spec.mixing_model == MixingModel::gbm) truth.gamma_true = Matrix::Zero(n_pairs, n);
  truth.x_clean.resize(l, n);
  Matrix y(l, n);

  const Matrix& m = truth.m_true;
  parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t idx) {
    const Index px = static_cast<Index>(idx);
    StreamRng rng_a(stream_key(spec.seed, 0, StreamBlock::abundance, idx));
    const Vector a = sample_truncated_simplex(r, spec.a_max, rng_a).a;
    truth.a_true.col(px) = a;
    Vector x = m * a;
    if (spec.mixing_model == MixingModel::ppnmm) {
      StreamRng rng_b(stream_key(spec.seed, 0, StreamBlock::synth_b, idx));
      const double b = draw_b(spec, rng_b);
      truth.b_true[px] = b;
      x = ppnmm_pixel(m, a, b);
    } else if (spec.mixing_model == MixingModel::gbm) {
      StreamRng rng_g(stream_key(spec.seed, 0, StreamBlock::synth_gamma, idx));
      std::uniform_real_distribution<double> ug(spec.gamma_range.lo, spec.gamma_range.hi);
      Index pair = 0;
      for (Index i = 0; i < r; ++i) {
        for (Index j = i + 1; j < r; ++j, ++pair) {
          const double g = spec.gamma_range.lo == spec.gamma_range.hi ? spec.gamma_range.lo : ug(rng_g);
          truth.gamma_true(pair, px) = g;
          x += g * a[i] * a[j] * m.col(i).cwiseProduct(m.col(j));
        }
      }
    }
    truth.x_clean.col(px) = x;
    StreamRng rng_e(stream_key(spec.seed, 0, StreamBlock::synth_noise, idx));
    std::normal_distribution<double> noise(0.0, std::sqrt(spec.noise_sigma2));
    for (Index b = 0; b < l; ++b) y(b, px) = x[b] + noise(rng_e);
  });
  return {SpectralImage(std::move(y)), std::move(truth)};
}

}  // namespace ppnmm
