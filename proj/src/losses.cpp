#include "ttac/losses.hpp"

#include <cmath>

namespace ttac {

namespace {

constexpr double kLogClamp = 1e-12;

}  // namespace

KlWithGradient alignment_term(const GaussianStats& source, const GaussianStats& target,
                              const AlignmentOptions& options) {
  KlWithGradient out;
  if (options.metric == AlignmentMetric::kL2Moments) {
    const Vector dm = target.mean - source.mean;
    const Matrix dc = target.cov - source.cov;
    out.value = dm.squaredNorm() + dc.squaredNorm();
    out.d_mean_q = 2.0 * dm;
    out.d_cov_q = 2.0 * dc;
  } else {
    const GaussianStats p{source.mean, options.regularizer.apply(source.cov)};
    const GaussianStats q{target.mean, options.regularizer.apply(target.cov)};
    out = gaussian_kl_with_grad(p, q);
    out.d_cov_q = options.regularizer.backward(target.cov, out.d_cov_q);
  }
  if (options.mean_only) out.d_cov_q.setZero();
  return out;
}

ClusteringLoss anchored_clustering_loss(const SourceBank& source, const TargetBank& target,
                                        const Matrix& features,
                                        std::span<const FilterDecision> decisions,
                                        const AlignmentOptions& options) {
  if (source.num_classes() != target.num_classes() || source.dim() != target.dim()) {
    throw ContractError("anchored_clustering_loss: source and target banks differ in shape");
  }
  if (features.cols() != target.dim()) {
    throw ContractError("anchored_clustering_loss: feature dimension mismatch");
  }
  ClusterUpdate update = filtered_cluster_update(target, features, decisions);
  const auto rows = accepted_rows_by_class(decisions, target.num_classes());

  ClusteringLoss out;
  out.d_features = Matrix::Zero(features.rows(), features.cols());
  for (int k = 0; k < target.num_classes(); ++k) {
    const auto ks = static_cast<std::size_t>(k);
    const RunningStats& after = update.bank.classes[ks];
    const KlWithGradient term = alignment_term(source.classes[ks], after.stats(), options);
    out.value += term.value;
    const auto& idx = rows[ks];
    if (idx.empty()) continue;
    const Matrix d_batch = running_update_backward(target.classes[ks], gather_rows(features, idx),
                                                   term.d_mean_q, term.d_cov_q);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      out.d_features.row(idx[i]) += d_batch.row(static_cast<Eigen::Index>(i));
    }
  }
  out.updated = std::move(update.bank);
  out.accepted = std::move(update.accepted);
  return out;
}

GlobalLoss global_alignment_loss(const GaussianStats& source_global, const RunningStats& target,
                                 const Matrix& features, const AlignmentOptions& options) {
  if (features.cols() != target.dim() || source_global.dim() != target.dim()) {
    throw ContractError("global_alignment_loss: dimension mismatch");
  }
  GlobalLoss out;
  out.updated = running_update(target, features);
  const KlWithGradient term = alignment_term(source_global, out.updated.stats(), options);
  out.value = term.value;
  out.d_features = running_update_backward(target, features, term.d_mean_q, term.d_cov_q);
  return out;
}

void AugmentationConfig::validate() const {
  if (weak_sigma < 0.0 || strong_sigma < weak_sigma) {
    throw ContractError("AugmentationConfig: need 0 <= weak_sigma <= strong_sigma");
  }
  if (drop_prob < 0.0 || drop_prob >= 1.0) {
    throw ContractError("AugmentationConfig: drop_prob must lie in [0, 1)");
  }
}

AugmentedViews make_views(const Matrix& inputs, const AugmentationConfig& config,
                          std::mt19937_64& rng) {
  config.validate();
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution drop(config.drop_prob);
  AugmentedViews views{inputs, inputs};
  for (Eigen::Index i = 0; i < inputs.rows(); ++i) {
    for (Eigen::Index j = 0; j < inputs.cols(); ++j) {
      views.weak(i, j) += config.weak_sigma * normal(rng);
    }
  }
  for (Eigen::Index i = 0; i < inputs.rows(); ++i) {
    for (Eigen::Index j = 0; j < inputs.cols(); ++j) {
      if (config.drop_prob > 0.0 && drop(rng)) views.strong(i, j) = 0.0;
      views.strong(i, j) += config.strong_sigma * normal(rng);
    }
  }
  return views;
}

SelfTrainingTerm self_training_term(const Matrix& weak_posteriors, const ForwardTrace& strong,
                                    double tau_st) {
  const Matrix& q = strong.posteriors;
  if (weak_posteriors.rows() != q.rows() || weak_posteriors.cols() != q.cols()) {
    throw ContractError("self_training_term: weak and strong views differ in shape");
  }
  const double n = static_cast<double>(q.rows());
  SelfTrainingTerm out;
  Matrix d_q = Matrix::Zero(q.rows(), q.cols());
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    Eigen::Index label = 0;
    const double confidence = weak_posteriors.row(i).maxCoeff(&label);
    if (confidence < tau_st) continue;
    ++out.accepted;
    const double p = q(i, label);
    out.value -= std::log(std::max(p, kLogClamp)) / n;
    if (p >= kLogClamp) d_q(i, label) = -1.0 / (p * n);
  }
  out.d_logits = softmax_backward(q, d_q);
  return out;
}

SelfTrainingLoss self_training_loss(const ModelParams& params, const Matrix& inputs,
                                    const AugmentationConfig& config, double tau_st) {
  std::mt19937_64 rng(config.seed);
  const AugmentedViews views = make_views(inputs, config, rng);
  const ForwardTrace weak = forward(params, views.weak);
  const ForwardTrace strong = forward(params, views.strong);
  const SelfTrainingTerm term = self_training_term(weak.posteriors, strong, tau_st);
  return {term.value, backward(params, strong, Matrix(), term.d_logits), term.accepted};
}

ObjectiveResult total_objective(const ModelParams& params, const SourceBank& source,
                                const TargetBank& target, const ForwardTrace& weak,
                                const ForwardTrace& strong,
                                std::span<const FilterDecision> decisions, double tau_st,
                                const ObjectiveWeights& weights, const AlignmentOptions& options) {
  ObjectiveResult out{{}, ModelGradients::zeros_like(params), target};
  out.losses.lambda1 = weights.lambda1;
  out.losses.lambda2 = weights.lambda2;

  const Matrix& z = weak.features();
  Matrix d_features = Matrix::Zero(z.rows(), z.cols());
  bool feature_grad = false;
  if (weights.clustering) {
    ClusteringLoss ac = anchored_clustering_loss(source, target, z, decisions, options);
    out.losses.l_ac = ac.value;
    for (int a : ac.accepted) out.losses.accepted_ac += a;
    d_features += ac.d_features;
    out.target.classes = std::move(ac.updated.classes);
    feature_grad = true;
  }
  if (weights.global) {
    GlobalLoss ga = global_alignment_loss(source.global, target.global, z, options);
    out.losses.l_ga = ga.value;
    out.losses.accepted_ga = static_cast<int>(z.rows());
    if (weights.lambda1 != 0.0) {
      d_features += weights.lambda1 * ga.d_features;
      feature_grad = true;
    }
    out.target.global = std::move(ga.updated);
  }
  if (feature_grad) out.grads += backward(params, weak, d_features, Matrix());

  if (weights.self_training) {
    const SelfTrainingTerm st = self_training_term(weak.posteriors, strong, tau_st);
    out.losses.l_st = st.value;
    out.losses.accepted_st = st.accepted;
    if (weights.lambda2 != 0.0 && st.accepted > 0) {
      out.grads += backward(params, strong, Matrix(), weights.lambda2 * st.d_logits);
    }
  }
  out.losses.total = out.losses.recompute_total();
  return out;
}

}  // namespace ttac
