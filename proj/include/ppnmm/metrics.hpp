#pragma once

// Scoring of unmixing results against ground truth, PCA projections for
// plotting, nonlinearity summaries and MCMC convergence diagnostics.

#include "ppnmm/core_model.hpp"
#include "ppnmm/synthgen.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace ppnmm {

inline double rnmse(const Matrix& a_true, const Matrix& a_hat) {
  if (a_true.rows() != a_hat.rows() || a_true.cols() != a_hat.cols())
    throw std::invalid_argument("rnmse: abundance shapes differ");
  return std::sqrt((a_hat - a_true).squaredNorm() / static_cast<double>(a_true.size()));
}

inline double sam(const Eigen::Ref<const Vector>& m_true, const Eigen::Ref<const Vector>& m_hat) {
  if (m_true.size() != m_hat.size()) throw std::invalid_argument("sam: length mismatch");
  return spectral_angle(m_hat, m_true);
}

inline double re(const SpectralImage& y, const Matrix& y_hat) {
  if (y_hat.rows() != y.n_bands() || y_hat.cols() != y.n_pixels()) throw std::invalid_argument("re: shape mismatch");
  return std::sqrt((y_hat - y.data()).squaredNorm() / static_cast<double>(y_hat.size()));
}

// ---------------------------------------------------------------------------
// Endmember alignment

/// Minimum-cost assignment: returns assign[row] = column. O(n^3).
inline std::vector<Index> hungarian_assignment(const Matrix& cost) {
  const Index n = cost.rows();
  if (cost.cols() != n) throw std::invalid_argument("hungarian_assignment: cost matrix must be square");
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based potentials formulation
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<Index> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (Index i = 1; i <= n; ++i) {
    p[0] = i;
    Index j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const Index i0 = p[j0];
      double delta = inf;
      Index j1 = 0;
      for (Index j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (Index j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const Index j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<Index> assign(n);
  for (Index j = 1; j <= n; ++j) assign[p[j] - 1] = j - 1;
  return assign;
}

struct Alignment {
  // aligned.col(j) == m_hat.col(permutation[j])
  std::vector<Index> permutation;
  Matrix aligned;
  double total_sam = 0.0;
};

inline Matrix sam_cost_matrix(const Matrix& m_true, const Matrix& m_hat) {
  Matrix cost(m_true.cols(), m_hat.cols());
  for (Index i = 0; i < m_true.cols(); ++i)
    for (Index j = 0; j < m_hat.cols(); ++j) cost(i, j) = sam(m_true.col(i), m_hat.col(j));
  return cost;
}

/// Column permutation of m_hat minimizing total SAM against m_true: exhaustive
/// for R <= 8, Hungarian assignment beyond.
inline Alignment align_endmembers(const Matrix& m_true, const Matrix& m_hat) {
  if (m_true.rows() != m_hat.rows() || m_true.cols() != m_hat.cols())
    throw std::invalid_argument("align_endmembers: shape mismatch");
  const Index r = m_true.cols();
  const Matrix cost = sam_cost_matrix(m_true, m_hat);
  Alignment out;
  if (r <= 8) {
    std::vector<Index> perm(r);
    std::iota(perm.begin(), perm.end(), Index{0});
    double best = std::numeric_limits<double>::infinity();
    do {
      double total = 0.0;
      for (Index i = 0; i < r; ++i) total += cost(i, perm[i]);
      if (total < best) {
        best = total;
        out.permutation = perm;
      }
    } while (std::next_permutation(perm.begin(), perm.end()));
  } else {
    out.permutation = hungarian_assignment(cost);
  }
  out.aligned.resize(m_hat.rows(), r);
  out.total_sam = 0.0;
  for (Index i = 0; i < r; ++i) {
    out.aligned.col(i) = m_hat.col(out.permutation[i]);
    out.total_sam += cost(i, out.permutation[i]);
  }
  return out;
}

inline Matrix permute_rows(const Matrix& a, const std::vector<Index>& perm) {
  Matrix out(a.rows(), a.cols());
  for (Index i = 0; i < a.rows(); ++i) out.row(i) = a.row(perm[i]);
  return out;
}

// ---------------------------------------------------------------------------
// PCA

struct PcaProjection {
  Matrix scores;  // k x N
  Matrix basis;   // L x k, orthonormal columns
  Vector mean;    // L
  Vector singular_values;

  Matrix project(const Matrix& x) const { return basis.transpose() * (x.colwise() - mean); }
};

/// Mean-centred projection on the top-k principal directions. Each basis
/// vector is signed so that its largest-magnitude loading is positive.
inline PcaProjection pca_project(const SpectralImage& y, Index k) {
  if (k < 1 || k > std::min(y.n_bands(), y.n_pixels())) throw std::invalid_argument("pca_project: k out of range");
  PcaProjection out;
  out.mean = y.data().rowwise().mean();
  const Matrix centered = y.data().colwise() - out.mean;
  Eigen::BDCSVD<Matrix> svd(centered, Eigen::ComputeThinU);
  out.singular_values = svd.singularValues();
  out.basis = svd.matrixU().leftCols(k);
  for (Index j = 0; j < k; ++j) {
    Index idx = 0;
    out.basis.col(j).cwiseAbs().maxCoeff(&idx);
    if (out.basis(idx, j) < 0.0) out.basis.col(j) *= -1.0;
  }
  out.scores = out.basis.transpose() * centered;
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearity summaries

/// Threshold on P(b_n != 0) below which a pixel is declared linearly mixed.
inline constexpr double kLinearPixelThreshold = 0.5;

struct BSummary {
  std::vector<double> edges;  // bins + 1 entries
  std::vector<long> counts;
  double linear_fraction = 0.0;
};

inline BSummary b_summary(const Vector& b_hat, const Vector& b_nonzero_prob, int bins = 50) {
  if (b_hat.size() == 0) throw std::invalid_argument("b_summary: empty b");
  if (b_nonzero_prob.size() != b_hat.size()) throw std::invalid_argument("b_summary: probability length mismatch");
  if (bins < 1) throw std::invalid_argument("b_summary: bins must be >= 1");
  BSummary out;
  const double lo = b_hat.minCoeff();
  const double hi = b_hat.maxCoeff();
  if (lo == hi) {
    out.edges = {lo, hi};
    out.counts = {static_cast<long>(b_hat.size())};
  } else {
    out.edges.resize(static_cast<std::size_t>(bins) + 1);
    for (int i = 0; i <= bins; ++i) out.edges[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / bins;
    out.counts.assign(static_cast<std::size_t>(bins), 0);
    for (Index n = 0; n < b_hat.size(); ++n) {
      int bin = static_cast<int>((b_hat[n] - lo) / (hi - lo) * bins);
      bin = std::clamp(bin, 0, bins - 1);
      ++out.counts[static_cast<std::size_t>(bin)];
    }
  }
  out.linear_fraction =
      static_cast<double>((b_nonzero_prob.array() < kLinearPixelThreshold).count()) / static_cast<double>(b_hat.size());
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation report

struct EvalReport {
  double rnmse = 0.0;
  std::vector<double> sam_per_endmember;
  double sam_average = 0.0;
  double re = 0.0;
  std::vector<Index> permutation;
  BSummary b_histogram;
  double linear_fraction = 0.0;
};

inline EvalReport evaluate(const SpectralImage& y, const Matrix& m_true, const Matrix& a_true, const Matrix& m_hat,
                           const Matrix& a_hat, const Vector& b_hat, const Vector& b_nonzero_prob, int bins = 50) {
  EvalReport rep;
  const Alignment al = align_endmembers(m_true, m_hat);
  rep.permutation = al.permutation;
  const Matrix a_aligned = permute_rows(a_hat, al.permutation);
  rep.rnmse = rnmse(a_true, a_aligned);
  for (Index r = 0; r < m_true.cols(); ++r) rep.sam_per_endmember.push_back(sam(m_true.col(r), al.aligned.col(r)));
  rep.sam_average = std::accumulate(rep.sam_per_endmember.begin(), rep.sam_per_endmember.end(), 0.0) /
                    static_cast<double>(rep.sam_per_endmember.size());
  rep.re = re(y, ppnmm_image(m_hat, a_hat, b_hat));
  rep.b_histogram = b_summary(b_hat, b_nonzero_prob, bins);
  rep.linear_fraction = rep.b_histogram.linear_fraction;
  return rep;
}

// ---------------------------------------------------------------------------
// Convergence diagnostics

struct TraceStats {
  double mean = 0.0;
  double sd = 0.0;
  double min = 0.0;
  double max = 0.0;
  double ess = 0.0;
};

/// Effective sample size from autocorrelations truncated at the first
/// non-positive pair sum (Geyer's initial positive sequence).
inline double effective_sample_size(const Eigen::Ref<const Vector>& x) {
  const Index n = x.size();
  if (n < 4) return static_cast<double>(n);
  const double mean = x.mean();
  const Vector c = x.array() - mean;
  const double c0 = c.squaredNorm() / static_cast<double>(n);
  if (c0 <= 0.0) return static_cast<double>(n);
  auto rho = [&](Index lag) { return c.head(n - lag).dot(c.tail(n - lag)) / (static_cast<double>(n) * c0); };
  double tau = -1.0;
  for (Index k = 0; 2 * k + 1 < n; ++k) {
    const double pair = rho(2 * k) + rho(2 * k + 1);
    if (pair <= 0.0) break;
    tau += 2.0 * pair;
  }
  tau = std::max(tau, 1.0 / static_cast<double>(n));
  return static_cast<double>(n) / tau;
}

/// Standard error of the mean by non-overlapping batch means.
inline double batch_means_se(const Eigen::Ref<const Vector>& x, Index n_batches = 50) {
  const Index batch = x.size() / n_batches;
  if (batch < 1) throw std::invalid_argument("batch_means_se: too few samples for the batch count");
  Vector means(n_batches);
  for (Index b = 0; b < n_batches; ++b) means[b] = x.segment(b * batch, batch).mean();
  const double mu = means.mean();
  const double var = (means.array() - mu).square().sum() / static_cast<double>(n_batches - 1);
  return std::sqrt(var / static_cast<double>(n_batches));
}

inline TraceStats trace_stats(const Eigen::Ref<const Vector>& x) {
  TraceStats s;
  if (x.size() == 0) return s;
  s.mean = x.mean();
  s.sd = x.size() > 1 ? std::sqrt((x.array() - s.mean).square().sum() / static_cast<double>(x.size() - 1)) : 0.0;
  s.min = x.minCoeff();
  s.max = x.maxCoeff();
  s.ess = effective_sample_size(x);
  return s;
}

/// Returned when chains are internally constant but disagree with each other.
inline constexpr double kPsrfSentinel = 1e12;

/// Potential scale reduction sqrt(1 + B / (n W)) where B / n is the variance
/// of the chain means and W the mean within-chain variance. Chains are
/// truncated to the shortest length.
inline double psrf(const std::vector<Vector>& chains) {
  if (chains.size() < 2) throw std::invalid_argument("psrf: need at least two chains");
  Index n = chains.front().size();
  for (const Vector& c : chains) n = std::min(n, c.size());
  if (n < 2) throw std::invalid_argument("psrf: chains need at least two samples");
  const double m = static_cast<double>(chains.size());
  Vector means(static_cast<Index>(chains.size()));
  double w = 0.0;
  for (std::size_t j = 0; j < chains.size(); ++j) {
    const auto seg = chains[j].head(n);
    means[static_cast<Index>(j)] = seg.mean();
    w += (seg.array() - seg.mean()).square().sum() / static_cast<double>(n - 1);
  }
  w /= m;
  const double grand = means.mean();
  const double var_means = (means.array() - grand).square().sum() / (m - 1.0);
  if (w <= 0.0) return var_means > 0.0 ? kPsrfSentinel : 1.0;
  return std::sqrt(1.0 + var_means / w);
}

/// What diagnostics needs from one chain: scalar trace rows per kept sample,
/// per-iteration acceptance rates and divergence counts of the two CHMC blocks.
struct ChainSummary {
  std::vector<std::string> names;
  Matrix trace;
  Vector accept_z, accept_m;
  Vector diverged_z, diverged_m;
};

struct DiagnosticsReport {
  std::vector<std::string> names;
  std::vector<std::vector<TraceStats>> per_chain;  // [chain][parameter]
  std::vector<double> psrf;                        // empty with a single chain
  std::vector<double> mean_accept_z, mean_accept_m;
  std::vector<double> total_diverged_z, total_diverged_m;
};

inline DiagnosticsReport diagnostics(const std::vector<ChainSummary>& chains) {
  if (chains.empty()) throw std::invalid_argument("diagnostics: need at least one chain");
  DiagnosticsReport rep;
  rep.names = chains.front().names;
  const Index k = chains.front().trace.cols();
  for (const ChainSummary& c : chains) {
    if (c.trace.cols() != k) throw std::invalid_argument("diagnostics: chains have different parameter sets");
    std::vector<TraceStats> stats;
    for (Index j = 0; j < k; ++j) stats.push_back(trace_stats(c.trace.col(j)));
    rep.per_chain.push_back(std::move(stats));
    rep.mean_accept_z.push_back(c.accept_z.size() ? c.accept_z.mean() : 0.0);
    rep.mean_accept_m.push_back(c.accept_m.size() ? c.accept_m.mean() : 0.0);
    rep.total_diverged_z.push_back(c.diverged_z.sum());
    rep.total_diverged_m.push_back(c.diverged_m.sum());
  }
  if (chains.size() >= 2) {
    for (Index j = 0; j < k; ++j) {
      std::vector<Vector> cols;
      for (const ChainSummary& c : chains) cols.emplace_back(c.trace.col(j));
      rep.psrf.push_back(psrf(cols));
    }
  }
  return rep;
}

}  // namespace ppnmm
