#pragma once

// Purest-pixel selection used to seed the endmember prior means: project the
// pixels onto the leading R-1 principal directions, then grow and refine a set
// of R pixels spanning the largest simplex (N-FINDR style).

#include "ppnmm/core_model.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <stdexcept>
#include <vector>

namespace ppnmm {

class DegenerateDataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Volume (up to the constant 1/(k-1)!) of the simplex spanned by the columns
/// of pts, computed from the Gram determinant of the edge vectors.
inline double simplex_volume(const Matrix& pts) {
  const Index k = pts.cols();
  if (k < 2) return 0.0;
  Matrix edges(pts.rows(), k - 1);
  for (Index j = 1; j < k; ++j) edges.col(j - 1) = pts.col(j) - pts.col(0);
  const double gram = (edges.transpose() * edges).determinant();
  return gram > 0.0 ? std::sqrt(gram) : 0.0;
}

/// Pixels projected onto the leading `dims` principal directions (dims x N).
inline Matrix principal_projection(const Matrix& y, Index dims, Vector* singular_values = nullptr) {
  const Vector mean = y.rowwise().mean();
  const Matrix centered = y.colwise() - mean;
  Eigen::BDCSVD<Matrix> svd(centered, Eigen::ComputeThinU);
  if (singular_values != nullptr) *singular_values = svd.singularValues();
  return svd.matrixU().leftCols(dims).transpose() * centered;
}

/// Indices of the R pixels spanning the largest simplex in the reduced space.
inline std::vector<Index> select_purest_pixels(const SpectralImage& y, Index r) {
  const Index n = y.n_pixels();
  if (r < 2) throw std::invalid_argument("select_purest_pixels: R must be >= 2");
  if (n < r) throw std::invalid_argument("select_purest_pixels: need at least R pixels");
  if (r - 1 > y.n_bands()) throw std::invalid_argument("select_purest_pixels: R - 1 exceeds band count");

  Vector sv;
  const Matrix proj = principal_projection(y.data(), r - 1, &sv);
  const double tol = 1e-10 * (sv.size() > 0 ? sv[0] : 0.0);
  if (sv.size() < r - 1 || sv[r - 2] <= tol)
    throw DegenerateDataError("data rank is below R-1; supply endmember prior means explicitly");

  // Greedy growth: start from the pixel farthest from the centroid, then add
  // the pixel that maximizes the volume of the current partial simplex.
  std::vector<Index> chosen;
  Index first = 0;
  proj.colwise().squaredNorm().maxCoeff(&first);
  chosen.push_back(first);
  while (static_cast<Index>(chosen.size()) < r) {
    Matrix pts(r - 1, static_cast<Index>(chosen.size()) + 1);
    for (std::size_t j = 0; j < chosen.size(); ++j) pts.col(static_cast<Index>(j)) = proj.col(chosen[j]);
    double best = -1.0;
    Index best_idx = 0;
    for (Index i = 0; i < n; ++i) {
      pts.col(pts.cols() - 1) = proj.col(i);
      const double v = simplex_volume(pts);
      if (v > best) {
        best = v;
        best_idx = i;
      }
    }
    chosen.push_back(best_idx);
  }

  // Swap refinement until no single replacement increases the volume.
  Matrix pts(r - 1, r);
  for (Index j = 0; j < r; ++j) pts.col(j) = proj.col(chosen[static_cast<std::size_t>(j)]);
  double current = simplex_volume(pts);
  for (int sweep = 0; sweep < 100; ++sweep) {
    bool improved = false;
    for (Index j = 0; j < r; ++j) {
      for (Index i = 0; i < n; ++i) {
        const Vector saved = pts.col(j);
        pts.col(j) = proj.col(i);
        const double v = simplex_volume(pts);
        if (v > current * (1.0 + 1e-12)) {
          current = v;
          chosen[static_cast<std::size_t>(j)] = i;
          improved = true;
        } else {
          pts.col(j) = saved;
        }
      }
    }
    if (!improved) break;
  }
  if (!(current > 0.0)) throw DegenerateDataError("selected pixels span a zero-volume simplex");
  return chosen;
}

/// L x R prior mean matrix built from the selected pixel spectra, clamped to [0,1].
inline Matrix init_endmember_prior(const SpectralImage& y, Index r) {
  const std::vector<Index> idx = select_purest_pixels(y, r);
  Matrix mbar(y.n_bands(), r);
  for (Index j = 0; j < r; ++j) mbar.col(j) = y.data().col(idx[static_cast<std::size_t>(j)]).cwiseMax(0.0).cwiseMin(1.0);
  return mbar;
}

}  // namespace ppnmm
