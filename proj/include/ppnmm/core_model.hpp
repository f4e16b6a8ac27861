#pragma once

// Domain types, the polynomial post-nonlinear forward model, the stick-breaking
// abundance reparameterization and the two CHMC potential energies with their
// analytic gradients.

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace ppnmm {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Observed L x N reflectance matrix, one pixel per column.
class SpectralImage {
 public:
  SpectralImage() = default;
  explicit SpectralImage(Matrix data, std::vector<double> wavelengths = {})
      : data_(std::move(data)), wavelengths_(std::move(wavelengths)) {
    if (data_.rows() < 2) throw std::invalid_argument("SpectralImage: need at least 2 bands");
    if (data_.cols() < 1) throw std::invalid_argument("SpectralImage: need at least 1 pixel");
    if (!data_.allFinite()) throw std::invalid_argument("SpectralImage: non-finite entries");
    if (!wavelengths_.empty() && static_cast<Index>(wavelengths_.size()) != data_.rows())
      throw std::invalid_argument("SpectralImage: wavelength count does not match band count");
  }

  const Matrix& data() const { return data_; }
  Index n_bands() const { return data_.rows(); }
  Index n_pixels() const { return data_.cols(); }
  const std::vector<double>& wavelengths() const { return wavelengths_; }

 private:
  Matrix data_;
  std::vector<double> wavelengths_;
};

/// Full sampler state: latent coefficients Z ((R-1) x N), endmembers M (L x R),
/// nonlinearity vector b (N), band noise variances (L) and the two hyperparameters.
struct ModelState {
  Matrix z;
  Matrix m;
  Vector b;
  Vector sigma2;
  double sigma_b2 = 1.0;
  double w = 0.5;

  Index n_endmembers() const { return m.cols(); }
  Index n_bands() const { return m.rows(); }
  Index n_pixels() const { return z.cols(); }
};

// ---------------------------------------------------------------------------
// Stick-breaking reparameterization

/// a_r = (prod_{k<r} z_k)(1 - z_r) for r < R, a_R = prod_{k<R} z_k.
inline void stick_breaking_forward(const Eigen::Ref<const Vector>& z, Eigen::Ref<Vector> a) {
  const Index rm1 = z.size();
  double stick = 1.0;
  for (Index r = 0; r < rm1; ++r) {
    a[r] = stick * (1.0 - z[r]);
    stick *= z[r];
  }
  a[rm1] = stick;
}

inline Vector stick_breaking_forward(const Eigen::Ref<const Vector>& z) {
  for (Index r = 0; r < z.size(); ++r) {
    if (!(z[r] > 0.0 && z[r] < 1.0))
      throw std::domain_error("stick_breaking_forward: coordinate " + std::to_string(r) +
                              " outside (0,1)");
  }
  Vector a(z.size() + 1);
  stick_breaking_forward(z, a);
  return a;
}

inline Vector stick_breaking_inverse(const Eigen::Ref<const Vector>& a) {
  if (a.size() < 2) throw std::domain_error("stick_breaking_inverse: need at least 2 abundances");
  if ((a.array() <= 0.0).any()) throw std::domain_error("stick_breaking_inverse: non-positive abundance");
  if (std::abs(a.sum() - 1.0) > 1e-9) throw std::domain_error("stick_breaking_inverse: abundances do not sum to 1");
  const Index rm1 = a.size() - 1;
  Vector z(rm1);
  double stick = 1.0;
  for (Index r = 0; r < rm1; ++r) {
    z[r] = 1.0 - a[r] / stick;
    stick *= z[r];
  }
  return z;
}

/// Column-wise forward transform of an (R-1) x N latent matrix.
inline Matrix abundances_from_latent(const Matrix& z) {
  Matrix a(z.rows() + 1, z.cols());
  for (Index n = 0; n < z.cols(); ++n) {
    Eigen::Ref<Vector> col = a.col(n);
    stick_breaking_forward(z.col(n), col);
  }
  return a;
}

// ---------------------------------------------------------------------------
// Forward model

inline Vector ppnmm_pixel(const Matrix& m, const Eigen::Ref<const Vector>& a, double b_n) {
  if (m.cols() != a.size()) throw std::invalid_argument("ppnmm_pixel: M has " + std::to_string(m.cols()) +
                                                        " columns but a has " + std::to_string(a.size()) + " entries");
  Vector s = m * a;
  if (b_n == 0.0) return s;
  return s + b_n * s.cwiseProduct(s);
}

/// X = MA + [(MA) .* (MA)] diag(b).
inline Matrix ppnmm_image(const Matrix& m, const Matrix& a, const Vector& b) {
  if (m.cols() != a.rows()) throw std::invalid_argument("ppnmm_image: M columns != A rows");
  if (a.cols() != b.size()) throw std::invalid_argument("ppnmm_image: A columns != length of b");
  Matrix x = m * a;
  x += (x.array() * x.array()).matrix() * b.asDiagonal();
  return x;
}

/// (N/2) sum_l log sigma2_l + 1/2 sum_{n,l} (y - x)^2 / sigma2_l. Constant (NL/2) log 2pi dropped.
inline double neg_log_likelihood(const SpectralImage& y, const Matrix& x, const Vector& sigma2) {
  if (x.rows() != y.n_bands() || x.cols() != y.n_pixels())
    throw std::invalid_argument("neg_log_likelihood: model matrix shape mismatch");
  if (sigma2.size() != y.n_bands()) throw std::invalid_argument("neg_log_likelihood: sigma2 length mismatch");
  if ((sigma2.array() <= 0.0).any()) throw std::invalid_argument("neg_log_likelihood: non-positive variance");
  const double n = static_cast<double>(y.n_pixels());
  const double logdet = 0.5 * n * sigma2.array().log().sum();
  const Vector row_ss = (y.data() - x).array().square().rowwise().sum();
  return logdet + 0.5 * (row_ss.array() / sigma2.array()).sum();
}

// ---------------------------------------------------------------------------
// Potential energy for one latent column z_n.
//
// U(z) = 1/2 (y - x)^T Sigma^{-1} (y - x) - sum_r (R - r - 1) log z_r  (r 1-based)
//
// The workspace is reused across leapfrog steps; instances are not shared
// between threads.
class PixelPotential {
 public:
  PixelPotential(const Matrix& m, const Eigen::Ref<const Vector>& y, double b_n, const Vector& inv_sigma2)
      : m_(m), y_(y), b_(b_n), inv_sigma2_(inv_sigma2), a_(m.cols()), s_(m.rows()), resid_(m.rows()),
        da_(m.cols()) {
    if (y.size() != m.rows()) throw std::invalid_argument("PixelPotential: pixel length != band count");
    if (inv_sigma2.size() != m.rows()) throw std::invalid_argument("PixelPotential: sigma2 length != band count");
  }

  double value(const Eigen::Ref<const Vector>& z) {
    forward(z);
    double u = 0.5 * (resid_.array().square() * inv_sigma2_.array()).sum();
    const Index rdim = m_.cols();
    for (Index r = 0; r + 1 < rdim; ++r) {
      const double expo = static_cast<double>(rdim - r - 2);
      if (expo != 0.0) u -= expo * std::log(z[r]);
    }
    return u;
  }

  void gradient(const Eigen::Ref<const Vector>& z, Eigen::Ref<Vector> grad) {
    forward(z);
    const Index rdim = m_.cols();
    // dU1/da_r = -sum_l resid_l / sigma2_l * M_lr (1 + 2 b s_l)
    for (Index r = 0; r < rdim; ++r) {
      double acc = 0.0;
      for (Index l = 0; l < m_.rows(); ++l)
        acc += resid_[l] * inv_sigma2_[l] * m_(l, r) * (1.0 + 2.0 * b_ * s_[l]);
      da_[r] = -acc;
    }
    // da_r/dz_i: 0 (i>r), a_r/(z_i-1) (i=r), a_r/z_i (i<r)
    for (Index i = 0; i + 1 < rdim; ++i) {
      double g = da_[i] * a_[i] / (z[i] - 1.0);
      double tail = 0.0;
      for (Index r = i + 1; r < rdim; ++r) tail += da_[r] * a_[r];
      g += tail / z[i];
      g -= static_cast<double>(rdim - i - 2) / z[i];
      grad[i] = g;
    }
  }

 private:
  void forward(const Eigen::Ref<const Vector>& z) {
    stick_breaking_forward(z, a_);
    s_.noalias() = m_ * a_;
    resid_ = y_ - s_ - b_ * s_.cwiseProduct(s_);
  }

  const Matrix& m_;
  Vector y_;
  double b_;
  const Vector& inv_sigma2_;
  Vector a_, s_, resid_, da_;
};

inline void check_latent(const Eigen::Ref<const Vector>& z, Index r, const char* who) {
  if (z.size() != r - 1) throw std::invalid_argument(std::string(who) + ": latent vector must have R-1 entries");
  for (Index i = 0; i < z.size(); ++i)
    if (!(z[i] > 0.0 && z[i] < 1.0)) throw std::domain_error(std::string(who) + ": latent coordinate outside (0,1)");
}

inline Vector inverse_variances(const Vector& sigma2) {
  if ((sigma2.array() <= 0.0).any()) throw std::invalid_argument("non-positive noise variance");
  return sigma2.cwiseInverse();
}

inline double potential_U(const Eigen::Ref<const Vector>& z, const Eigen::Ref<const Vector>& y, const Matrix& m,
                          double b_n, const Vector& sigma2) {
  check_latent(z, m.cols(), "potential_U");
  const Vector inv = inverse_variances(sigma2);
  PixelPotential pot(m, y, b_n, inv);
  return pot.value(z);
}

inline Vector grad_U(const Eigen::Ref<const Vector>& z, const Eigen::Ref<const Vector>& y, const Matrix& m,
                     double b_n, const Vector& sigma2) {
  check_latent(z, m.cols(), "grad_U");
  const Vector inv = inverse_variances(sigma2);
  PixelPotential pot(m, y, b_n, inv);
  Vector g(z.size());
  pot.gradient(z, g);
  return g;
}

// ---------------------------------------------------------------------------
// Potential energy for one endmember row m_{l,:}.
//
// V(m) = ||y_row - t||^2 / (2 sigma_l^2) + ||m - mbar||^2 / (2 s^2),
// t = A^T m + diag(b) [(A^T m) .* (A^T m)].
//
// A row prior variance of +infinity drops the prior term.
class RowPotential {
 public:
  RowPotential(const Eigen::Ref<const RowVector>& y_row, const Matrix& a, const Vector& b, double sigma_l2, double s2,
               const Eigen::Ref<const Vector>& mbar_row)
      : y_(y_row.transpose()), a_(a), b_(b), inv_sigma_(1.0 / sigma_l2), inv_s2_(1.0 / s2), mbar_(mbar_row),
        lin_(a.cols()), resid_(a.cols()), weight_(a.cols()) {
    if (!(sigma_l2 > 0.0)) throw std::invalid_argument("RowPotential: non-positive band variance");
    if (!(s2 > 0.0)) throw std::invalid_argument("RowPotential: non-positive prior variance");
    if (y_row.size() != a.cols()) throw std::invalid_argument("RowPotential: row length != pixel count");
    if (b.size() != a.cols()) throw std::invalid_argument("RowPotential: b length != pixel count");
    if (mbar_row.size() != a.rows()) throw std::invalid_argument("RowPotential: prior mean length != R");
  }

  double value(const Eigen::Ref<const Vector>& m_row) {
    forward(m_row);
    return 0.5 * inv_sigma_ * resid_.squaredNorm() + 0.5 * inv_s2_ * (m_row - mbar_).squaredNorm();
  }

  void gradient(const Eigen::Ref<const Vector>& m_row, Eigen::Ref<Vector> grad) {
    forward(m_row);
    // -(resid_n / sigma^2)(1 + 2 b_n lin_n) A_{:,n} summed over pixels
    weight_ = -inv_sigma_ * resid_.cwiseProduct((1.0 + 2.0 * b_.array() * lin_.array()).matrix());
    grad.noalias() = a_ * weight_;
    grad += inv_s2_ * (m_row - mbar_);
  }

 private:
  void forward(const Eigen::Ref<const Vector>& m_row) {
    lin_.noalias() = a_.transpose() * m_row;
    resid_ = y_ - lin_ - b_.cwiseProduct(lin_.cwiseProduct(lin_));
  }

  Vector y_;
  const Matrix& a_;
  const Vector& b_;
  double inv_sigma_;
  double inv_s2_;
  Vector mbar_;
  Vector lin_, resid_, weight_;
};

inline void check_row(const Eigen::Ref<const Vector>& m_row, const char* who) {
  for (Index i = 0; i < m_row.size(); ++i)
    if (!(m_row[i] > 0.0 && m_row[i] < 1.0)) throw std::domain_error(std::string(who) + ": endmember entry outside (0,1)");
}

inline double potential_V(const Eigen::Ref<const Vector>& m_row, const Eigen::Ref<const RowVector>& y_row,
                          const Matrix& a, const Vector& b, double sigma_l2, double s2,
                          const Eigen::Ref<const Vector>& mbar_row) {
  check_row(m_row, "potential_V");
  RowPotential pot(y_row, a, b, sigma_l2, s2, mbar_row);
  return pot.value(m_row);
}

inline Vector grad_V(const Eigen::Ref<const Vector>& m_row, const Eigen::Ref<const RowVector>& y_row, const Matrix& a,
                     const Vector& b, double sigma_l2, double s2, const Eigen::Ref<const Vector>& mbar_row) {
  check_row(m_row, "grad_V");
  RowPotential pot(y_row, a, b, sigma_l2, s2, mbar_row);
  Vector g(m_row.size());
  pot.gradient(m_row, g);
  return g;
}

// ---------------------------------------------------------------------------
// Invariant checks

/// Returns a description of every violated ModelState invariant (empty when valid).
inline std::vector<std::string> invariant_violations(const ModelState& s) {
  std::vector<std::string> out;
  const Index r = s.m.cols();
  const Index l = s.m.rows();
  const Index n = s.z.cols();
  if (r < 2 || r > l) out.push_back("endmember count outside [2, L]");
  if (s.z.rows() != r - 1) out.push_back("latent matrix row count != R-1");
  if (s.b.size() != n) out.push_back("b length != N");
  if (s.sigma2.size() != l) out.push_back("sigma2 length != L");
  if (!out.empty()) return out;

  if (!((s.z.array() > 0.0).all() && (s.z.array() < 1.0).all())) out.push_back("latent coefficient outside (0,1)");
  if (!((s.m.array() >= 0.0).all() && (s.m.array() <= 1.0).all())) out.push_back("endmember entry outside [0,1]");
  if (!s.b.allFinite()) out.push_back("non-finite nonlinearity parameter");
  if (!(s.sigma2.array() > 0.0).all() || !s.sigma2.allFinite()) out.push_back("non-positive noise variance");
  if (!(s.sigma_b2 > 0.0) || !std::isfinite(s.sigma_b2)) out.push_back("non-positive sigma_b2");
  if (!(s.w >= 0.0 && s.w <= 1.0)) out.push_back("w outside [0,1]");
  if (out.empty()) {
    const Matrix a = abundances_from_latent(s.z);
    if (!(a.array() > 0.0).all()) out.push_back("non-positive abundance");
    if (((a.colwise().sum().array() - 1.0).abs() > 1e-12).any()) out.push_back("abundance column does not sum to 1");
  }
  return out;
}

}  // namespace ppnmm
