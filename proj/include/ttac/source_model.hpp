#pragma once

#include "ttac/banks.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace ttac {

/// Per-class and global MLE moments of labelled source features. Mixture
/// weights are uniform.
SourceBank estimate_source_stats(std::span<const Matrix> features_by_class);

/// Same, from a feature matrix and integer labels in [0, num_classes).
SourceBank estimate_source_stats(const Matrix& features, std::span<const int> labels,
                                 int num_classes);

struct InferConfig {
  double lr = 0.001;
  double weight_decay = 0.001;
  double rms_alpha = 0.99;
  double rms_eps = 1e-8;
  int max_iterations = 5000;
  /// Stop when the objective improved by less than `tolerance` over `window` steps.
  double tolerance = 1e-7;
  int window = 100;
  double init_std = 0.1;
  std::uint64_t seed = 0;
};

/// Optimizer state of the classifier-only source inference. The class means
/// are the elementwise squares of the unconstrained parameters.
struct InferState {
  Matrix sqrt_means;       // K x d, unconstrained
  Matrix square_avg;       // RMSprop accumulator, K x d
  double lr = 0.001;
  double weight_decay = 0.001;
  int iteration = 0;

  Matrix means() const { return sqrt_means.array().square().matrix(); }
};

struct InferResult {
  std::vector<Vector> means;
  std::vector<double> objective_trace;  // lower-bound objective per iteration (before the step)
  std::vector<double> class_losses;     // -log softmax_k(W mu_k) at the end
  std::vector<bool> consistent;         // argmax_j (W mu_k)_j == k
  bool converged = false;               // stopping rule met and every class consistent
  int iterations = 0;

  bool all_consistent() const;
};

/// Lower-bound objective sum_k -log softmax_k(W [mu_k; 1]) for the given
/// unconstrained parameters, and its gradient (without weight decay).
double inference_objective(const Matrix& classifier, const Matrix& sqrt_means,
                           Matrix* gradient = nullptr);

/// Recovers class means from the classifier alone by RMSprop on the lower
/// bound, with weight decay on the unconstrained parameters.
/// `classifier` is K x (d + 1) with the bias in the last column.
InferResult infer_source_means(const Matrix& classifier, const InferConfig& config = {});

/// Largest singular value of the covariance of the class-mean set, over 30.
/// Throws ContractError when the means coincide.
double choose_gamma(std::span<const Vector> means);

/// Same, but falls back to `floor` instead of throwing on coincident means.
double choose_gamma_or(std::span<const Vector> means, double floor);

/// Source bank with Sigma_k = gamma I and a moment-matched global Gaussian.
SourceBank build_inferred_bank(std::span<const Vector> means, double gamma);

}  // namespace ttac
