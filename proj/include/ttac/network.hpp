#pragma once

#include "ttac/core_math.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace ttac {

/// Fully connected layer, y = x W^T + b, for row-per-sample batches.
struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out

  int in_dim() const noexcept { return static_cast<int>(weight.cols()); }
  int out_dim() const noexcept { return static_cast<int>(weight.rows()); }
};

struct Architecture {
  int input_dim = 16;
  std::vector<int> hidden = {64, 64};
  int feature_dim = 16;
  int num_classes = 8;
};

/// Rectified MLP backbone followed by a linear classifier. The classifier is
/// stored as K x (d + 1): the last column is the bias acting on a constant
/// homogeneous coordinate appended to the features.
struct ModelParams {
  std::vector<DenseLayer> backbone;
  Matrix classifier;

  static ModelParams init(const Architecture& arch, std::uint64_t seed);

  int input_dim() const;
  int feature_dim() const;
  int num_classes() const noexcept { return static_cast<int>(classifier.rows()); }

  /// Classifier weights acting on the features, excluding the bias column.
  Matrix classifier_weights() const { return classifier.leftCols(classifier.cols() - 1); }
  Vector classifier_bias() const { return classifier.col(classifier.cols() - 1); }

  void validate() const;
};

/// Everything forward() computes, kept for backward().
struct ForwardTrace {
  Matrix input;
  std::vector<Matrix> pre;   // per backbone layer, before the rectifier
  std::vector<Matrix> post;  // per backbone layer, after the rectifier
  Matrix logits;
  Matrix posteriors;

  const Matrix& features() const { return post.back(); }
  Eigen::Index batch_size() const noexcept { return input.rows(); }
};

/// Same layout as ModelParams; used for gradients and momentum buffers.
struct ModelGradients {
  std::vector<DenseLayer> backbone;
  Matrix classifier;

  static ModelGradients zeros_like(const ModelParams& params);

  ModelGradients& operator+=(const ModelGradients& other);
  ModelGradients& operator*=(double scale);
  bool all_finite() const;
  double max_abs() const;
};

ForwardTrace forward(const ModelParams& params, const Matrix& inputs);

Vector softmax(const Vector& logits);
std::vector<int> argmax_rows(const Matrix& m);

/// Reverse-mode pass. `d_features` and `d_logits` are upstream gradients;
/// either may be an empty (0x0) matrix meaning zero.
ModelGradients backward(const ModelParams& params, const ForwardTrace& trace,
                        const Matrix& d_features, const Matrix& d_logits);

/// Gradient w.r.t. logits given a gradient w.r.t. the posteriors.
Matrix softmax_backward(const Matrix& posteriors, const Matrix& d_posteriors);

struct LogitLoss {
  double value = 0.0;
  Matrix d_logits;
};

/// Batch mean of the prediction entropy; log clamped at 1e-12.
LogitLoss entropy_loss(const ForwardTrace& trace);

/// Batch mean cross-entropy against integer labels.
LogitLoss cross_entropy_loss(const ForwardTrace& trace, std::span<const int> labels);

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct OptimizerState {
  ModelGradients velocity;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;

  static OptimizerState for_params(const ModelParams& params, double lr, double momentum,
                                   double weight_decay = 0.0);
};

/// v <- m v + g (+ wd p);  p <- p - lr v. Throws NonFiniteGradient and leaves
/// params/state untouched if any gradient entry is not finite.
void sgd_step(ModelParams& params, const ModelGradients& grads, OptimizerState& state);

/// Versioned JSON checkpoint (see docs/formats.md).
void save_model(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_model(const std::filesystem::path& path);

}  // namespace ttac
