#pragma once

#include "ttac/banks.hpp"
#include "ttac/filters.hpp"
#include "ttac/network.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace ttac {

enum class AlignmentMetric {
  kKl,          // closed-form Gaussian KL, source as the first argument
  kL2Moments,   // |mu_t - mu_s|^2 + |Sigma_t - Sigma_s|_F^2 (ablation only)
};

struct AlignmentOptions {
  Regularizer regularizer;
  /// Treat the updated covariance as a constant when backpropagating.
  bool mean_only = false;
  AlignmentMetric metric = AlignmentMetric::kKl;
};

/// KL(source || target) for one pair, with gradients w.r.t. the raw
/// (unregularized) target mean and covariance.
KlWithGradient alignment_term(const GaussianStats& source, const GaussianStats& target,
                              const AlignmentOptions& options);

struct ClusteringLoss {
  double value = 0.0;
  Matrix d_features;        // n x d
  TargetBank updated;       // bank after absorbing the accepted samples
  std::vector<int> accepted;
};

/// Sum over classes of KL(source_k || target_k), where target_k has absorbed the
/// filter-passing samples pseudo-labelled k. Gradients reach `features` only
/// through the current-batch terms of the streaming update.
ClusteringLoss anchored_clustering_loss(const SourceBank& source, const TargetBank& target,
                                        const Matrix& features,
                                        std::span<const FilterDecision> decisions,
                                        const AlignmentOptions& options);

struct GlobalLoss {
  double value = 0.0;
  Matrix d_features;
  RunningStats updated;
};

/// KL(source global || target global) after the target absorbs every sample
/// of the batch, filtered or not.
GlobalLoss global_alignment_loss(const GaussianStats& source_global, const RunningStats& target,
                                 const Matrix& features, const AlignmentOptions& options);

/// Vector-input stand-ins for image augmentation. Weak: Gaussian jitter.
/// Strong: coordinate dropout followed by a larger jitter.
struct AugmentationConfig {
  double weak_sigma = 0.05;
  double strong_sigma = 0.15;
  double drop_prob = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
};

struct AugmentedViews {
  Matrix weak;
  Matrix strong;
};

AugmentedViews make_views(const Matrix& inputs, const AugmentationConfig& config,
                          std::mt19937_64& rng);

struct SelfTrainingTerm {
  double value = 0.0;
  Matrix d_logits;  // gradient w.r.t. the strong-view logits
  int accepted = 0;
};

/// Gated cross-entropy of the strong view against the weak-view pseudo label.
/// The pseudo label and the gate are constants.
SelfTrainingTerm self_training_term(const Matrix& weak_posteriors, const ForwardTrace& strong,
                                    double tau_st);

struct SelfTrainingLoss {
  double value = 0.0;
  ModelGradients grads;
  int accepted = 0;
};

/// Builds both views from `config.seed` and evaluates the self-training loss.
SelfTrainingLoss self_training_loss(const ModelParams& params, const Matrix& inputs,
                                    const AugmentationConfig& config, double tau_st);

struct ObjectiveWeights {
  double lambda1 = 1.0;
  double lambda2 = 10.0;
  bool clustering = true;
  bool global = true;
  bool self_training = true;
};

struct LossBreakdown {
  double l_ac = 0.0;
  double l_ga = 0.0;
  double l_st = 0.0;
  double lambda1 = 1.0;
  double lambda2 = 10.0;
  double total = 0.0;
  int accepted_ac = 0;
  int accepted_ga = 0;
  int accepted_st = 0;

  double recompute_total() const { return l_ac + lambda1 * l_ga + lambda2 * l_st; }
};

struct ObjectiveResult {
  LossBreakdown losses;
  ModelGradients grads;
  TargetBank target;
};

/// L_ac + lambda1 L_ga + lambda2 L_st. `weak` supplies the features for the
/// statistics and the pseudo labels; `strong` carries the self-training
/// gradient. Disabled terms contribute zero value and zero gradient.
ObjectiveResult total_objective(const ModelParams& params, const SourceBank& source,
                                const TargetBank& target, const ForwardTrace& weak,
                                const ForwardTrace& strong,
                                std::span<const FilterDecision> decisions, double tau_st,
                                const ObjectiveWeights& weights, const AlignmentOptions& options);

}  // namespace ttac
