#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ttac {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Raised when an argument violates a documented precondition
/// (shape mismatch, asymmetric covariance, empty input, ...).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised by cholesky_psd when a pivot is not strictly positive.
class DecompositionError : public std::runtime_error {
 public:
  DecompositionError(const std::string& what, int pivot)
      : std::runtime_error(what), pivot_(pivot) {}
  int pivot() const noexcept { return pivot_; }

 private:
  int pivot_;
};

/// Mean vector and full covariance of one Gaussian component.
struct GaussianStats {
  Vector mean;
  Matrix cov;

  GaussianStats() = default;
  GaussianStats(Vector m, Matrix c);

  int dim() const noexcept { return static_cast<int>(mean.size()); }
};

/// Sentinel for "no clipping" of the streaming update rate.
inline constexpr std::int64_t kNoClip = std::numeric_limits<std::int64_t>::max();

/// Memory-bounded streaming estimate of a Gaussian. `count` is the number of
/// samples absorbed so far (plus any warm-start pseudo count); `clip` bounds
/// the effective window so that late batches keep a rate of at least 1/clip.
struct RunningStats {
  Vector mean;
  Matrix cov;
  std::int64_t count = 0;
  std::int64_t clip = kNoClip;

  static RunningStats zeros(int dim, std::int64_t clip = kNoClip);
  static RunningStats warm_start(const GaussianStats& prior, std::int64_t pseudo_count,
                                 std::int64_t clip = kNoClip);

  int dim() const noexcept { return static_cast<int>(mean.size()); }
  GaussianStats stats() const { return {mean, cov}; }
};

/// Nonnegative weights summing to one.
class MixtureWeights {
 public:
  MixtureWeights() = default;
  explicit MixtureWeights(Vector weights);
  static MixtureWeights uniform(int k);

  const Vector& values() const noexcept { return weights_; }
  int size() const noexcept { return static_cast<int>(weights_.size()); }
  double operator[](int i) const { return weights_(i); }

 private:
  Vector weights_;
};

/// Diagonal loading policy applied before every inverse or determinant.
/// eps = max(relative * trace(cov) / d, floor).
struct Regularizer {
  double relative = 1e-5;
  double floor = 1e-6;

  double eps_for(const Matrix& cov) const;
  Matrix apply(const Matrix& cov) const;
  /// Pulls a gradient w.r.t. the regularized matrix back to the raw matrix,
  /// including the dependence of eps on trace(cov).
  Matrix backward(const Matrix& cov, const Matrix& grad_regularized) const;
};

void require_symmetric(const Matrix& m, const char* what);

Matrix regularize_cov(const Matrix& cov, double eps);

/// Lower-triangular L with L * L^T == matrix. Throws DecompositionError naming
/// the first non-positive pivot.
Matrix cholesky_psd(const Matrix& matrix);

/// log|A| from the Cholesky factor of A.
double log_det_from_cholesky(const Matrix& lower);

/// Inverse of an SPD matrix through its Cholesky factor.
Matrix spd_inverse_from_cholesky(const Matrix& lower);

/// Closed-form D_KL(p || q). Covariances are used as given; callers
/// regularize beforehand.
double gaussian_kl(const GaussianStats& p, const GaussianStats& q);

struct KlWithGradient {
  double value = 0.0;
  Vector d_mean_q;  // dKL / d mu_q
  Matrix d_cov_q;   // dKL / d Sigma_q (symmetric)
};

/// D_KL(p || q) together with its gradient w.r.t. the parameters of q.
KlWithGradient gaussian_kl_with_grad(const GaussianStats& p, const GaussianStats& q);

/// Population (1/N) moments of the rows of `samples`.
GaussianStats batch_moments(const Matrix& samples);

double clipped_rate(std::int64_t count, std::int64_t clip);

/// One streaming update with a batch (rows are samples). The rate is
/// clipped_rate(count + n, clip), capped at 1/n so a batch larger than the
/// clip replaces the estimate instead of overshooting it.
RunningStats running_update(const RunningStats& stats, const Matrix& batch);

/// Gradient of a loss w.r.t. the batch rows, given the loss gradient w.r.t.
/// the updated mean and covariance. The prior state is held constant; only
/// the batch terms of the update carry gradient.
Matrix running_update_backward(const RunningStats& before, const Matrix& batch,
                               const Vector& d_mean, const Matrix& d_cov);

GaussianStats merge_mixture(std::span<const GaussianStats> components,
                            const MixtureWeights& weights);

/// Stacks a list of vectors into a row-per-sample matrix.
Matrix stack_rows(std::span<const Vector> rows);

}  // namespace ttac
