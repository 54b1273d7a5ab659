#include "ttac/core_math.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace ttac {

namespace {

void require_square(const Matrix& m, const char* what) {
  if (m.rows() != m.cols()) {
    std::ostringstream os;
    os << what << ": expected a square matrix, got " << m.rows() << "x" << m.cols();
    throw ContractError(os.str());
  }
}

Matrix symmetrized(const Matrix& m) { return 0.5 * (m + m.transpose()); }

}  // namespace

GaussianStats::GaussianStats(Vector m, Matrix c) : mean(std::move(m)), cov(std::move(c)) {
  require_square(cov, "GaussianStats");
  if (cov.rows() != mean.size()) {
    throw ContractError("GaussianStats: mean and covariance dimensions differ");
  }
  require_symmetric(cov, "GaussianStats");
  cov = symmetrized(cov);
}

RunningStats RunningStats::zeros(int dim, std::int64_t clip) {
  if (clip < 1) throw ContractError("RunningStats: clip must be positive");
  RunningStats s;
  s.mean = Vector::Zero(dim);
  s.cov = Matrix::Zero(dim, dim);
  s.count = 0;
  s.clip = clip;
  return s;
}

RunningStats RunningStats::warm_start(const GaussianStats& prior, std::int64_t pseudo_count,
                                      std::int64_t clip) {
  if (pseudo_count < 0) throw ContractError("RunningStats: negative pseudo count");
  RunningStats s = zeros(prior.dim(), clip);
  s.mean = prior.mean;
  s.cov = prior.cov;
  s.count = pseudo_count;
  return s;
}

MixtureWeights::MixtureWeights(Vector weights) : weights_(std::move(weights)) {
  if (weights_.size() == 0) throw ContractError("MixtureWeights: empty");
  if ((weights_.array() < 0.0).any()) throw ContractError("MixtureWeights: negative weight");
  if (std::abs(weights_.sum() - 1.0) > 1e-12) {
    throw ContractError("MixtureWeights: weights must sum to 1");
  }
}

MixtureWeights MixtureWeights::uniform(int k) {
  if (k < 1) throw ContractError("MixtureWeights: need at least one component");
  return MixtureWeights(Vector::Constant(k, 1.0 / k));
}

double Regularizer::eps_for(const Matrix& cov) const {
  const double d = static_cast<double>(cov.rows());
  return std::max(relative * cov.trace() / d, floor);
}

Matrix Regularizer::apply(const Matrix& cov) const { return regularize_cov(cov, eps_for(cov)); }

Matrix Regularizer::backward(const Matrix& cov, const Matrix& grad_regularized) const {
  Matrix grad = grad_regularized;
  const double d = static_cast<double>(cov.rows());
  if (relative * cov.trace() / d > floor) {
    grad.diagonal().array() += relative / d * grad_regularized.trace();
  }
  return grad;
}

void require_symmetric(const Matrix& m, const char* what) {
  require_square(m, what);
  const double scale = 1.0 + m.cwiseAbs().maxCoeff();
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) {
    throw ContractError(std::string(what) + ": matrix is not symmetric");
  }
}

Matrix regularize_cov(const Matrix& cov, double eps) {
  require_symmetric(cov, "regularize_cov");
  if (!(eps > 0.0)) throw ContractError("regularize_cov: eps must be positive");
  Matrix out = cov;
  out.diagonal().array() += eps;
  return out;
}

Matrix cholesky_psd(const Matrix& matrix) {
  require_symmetric(matrix, "cholesky_psd");
  const Eigen::Index n = matrix.rows();
  Matrix lower = Matrix::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double pivot = matrix(j, j);
    for (Eigen::Index k = 0; k < j; ++k) pivot -= lower(j, k) * lower(j, k);
    if (!(pivot > 0.0) || !std::isfinite(pivot)) {
      std::ostringstream os;
      os << "cholesky_psd: non-positive pivot " << pivot << " at index " << j;
      throw DecompositionError(os.str(), static_cast<int>(j));
    }
    const double diag = std::sqrt(pivot);
    lower(j, j) = diag;
    for (Eigen::Index i = j + 1; i < n; ++i) {
      double s = matrix(i, j);
      for (Eigen::Index k = 0; k < j; ++k) s -= lower(i, k) * lower(j, k);
      lower(i, j) = s / diag;
    }
  }
  return lower;
}

double log_det_from_cholesky(const Matrix& lower) {
  return 2.0 * lower.diagonal().array().log().sum();
}

Matrix spd_inverse_from_cholesky(const Matrix& lower) {
  const Eigen::Index n = lower.rows();
  Matrix linv = lower.triangularView<Eigen::Lower>().solve(Matrix::Identity(n, n));
  return symmetrized(linv.transpose() * linv);
}

double gaussian_kl(const GaussianStats& p, const GaussianStats& q) {
  return gaussian_kl_with_grad(p, q).value;
}

KlWithGradient gaussian_kl_with_grad(const GaussianStats& p, const GaussianStats& q) {
  if (p.dim() != q.dim()) throw ContractError("gaussian_kl: dimension mismatch");
  const double d = static_cast<double>(p.dim());
  const Matrix lp = cholesky_psd(p.cov);
  const Matrix lq = cholesky_psd(q.cov);
  const Matrix q_inv = spd_inverse_from_cholesky(lq);
  const Vector diff = q.mean - p.mean;
  const Vector q_inv_diff = q_inv * diff;
  const Matrix q_inv_p = q_inv * p.cov;

  KlWithGradient out;
  out.value = 0.5 * (log_det_from_cholesky(lq) - log_det_from_cholesky(lp) - d +
                     diff.dot(q_inv_diff) + q_inv_p.trace());
  out.d_mean_q = q_inv_diff;
  out.d_cov_q = 0.5 * (q_inv - q_inv_diff * q_inv_diff.transpose() - q_inv_p * q_inv);
  out.d_cov_q = symmetrized(out.d_cov_q);
  return out;
}

GaussianStats batch_moments(const Matrix& samples) {
  if (samples.rows() == 0) throw ContractError("batch_moments: empty input");
  const double n = static_cast<double>(samples.rows());
  Vector mean = samples.colwise().mean().transpose();
  const Matrix centered = samples.rowwise() - mean.transpose();
  Matrix cov = symmetrized(centered.transpose() * centered / n);
  return {std::move(mean), std::move(cov)};
}

double clipped_rate(std::int64_t count, std::int64_t clip) {
  if (count < 1 || clip < 1) throw ContractError("clipped_rate: count and clip must be >= 1");
  return count < clip ? 1.0 / static_cast<double>(count) : 1.0 / static_cast<double>(clip);
}

RunningStats running_update(const RunningStats& stats, const Matrix& batch) {
  if (batch.rows() == 0) throw ContractError("running_update: empty batch");
  if (batch.cols() != stats.dim()) throw ContractError("running_update: dimension mismatch");

  RunningStats next = stats;
  next.count = stats.count + batch.rows();
  const double n = static_cast<double>(batch.rows());
  const double rate = std::min(clipped_rate(next.count, stats.clip), 1.0 / n);

  const Matrix centered = batch.rowwise() - stats.mean.transpose();
  const Vector delta = rate * centered.colwise().sum().transpose();
  next.mean = stats.mean + delta;
  Matrix cov = stats.cov + rate * (centered.transpose() * centered - n * stats.cov) -
               delta * delta.transpose();
  next.cov = symmetrized(cov);
  return next;
}

Matrix running_update_backward(const RunningStats& before, const Matrix& batch,
                               const Vector& d_mean, const Matrix& d_cov) {
  if (batch.cols() != before.dim()) {
    throw ContractError("running_update_backward: dimension mismatch");
  }
  const std::int64_t count = before.count + batch.rows();
  const double rate =
      std::min(clipped_rate(count, before.clip), 1.0 / static_cast<double>(batch.rows()));
  const Matrix centered = batch.rowwise() - before.mean.transpose();
  const Vector delta = rate * centered.colwise().sum().transpose();
  const Matrix g = symmetrized(d_cov);

  // mean' = mean + delta; cov' = cov + rate * sum(y y^T - cov) - delta delta^T
  const Vector d_delta = d_mean - 2.0 * g * delta;
  Matrix d_batch = (2.0 * rate) * (centered * g);
  d_batch.rowwise() += rate * d_delta.transpose();
  return d_batch;
}

GaussianStats merge_mixture(std::span<const GaussianStats> components,
                            const MixtureWeights& weights) {
  if (components.empty()) throw ContractError("merge_mixture: no components");
  if (static_cast<int>(components.size()) != weights.size()) {
    throw ContractError("merge_mixture: weight count differs from component count");
  }
  const int d = components.front().dim();
  Vector mean = Vector::Zero(d);
  for (std::size_t k = 0; k < components.size(); ++k) {
    if (components[k].dim() != d) throw ContractError("merge_mixture: dimension mismatch");
    mean += weights[static_cast<int>(k)] * components[k].mean;
  }
  Matrix cov = Matrix::Zero(d, d);
  for (std::size_t k = 0; k < components.size(); ++k) {
    const Vector diff = components[k].mean - mean;
    cov += weights[static_cast<int>(k)] * (components[k].cov + diff * diff.transpose());
  }
  return {std::move(mean), symmetrized(cov)};
}

Matrix stack_rows(std::span<const Vector> rows) {
  if (rows.empty()) return Matrix(0, 0);
  Matrix out(static_cast<Eigen::Index>(rows.size()), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != out.cols()) throw ContractError("stack_rows: ragged input");
    out.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  }
  return out;
}

}  // namespace ttac
