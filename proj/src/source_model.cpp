#include "ttac/source_model.hpp"

#include "ttac/network.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <random>

namespace ttac {

SourceBank estimate_source_stats(std::span<const Matrix> features_by_class) {
  if (features_by_class.empty()) throw ContractError("estimate_source_stats: no classes");
  const Eigen::Index d = features_by_class.front().cols();
  Eigen::Index total = 0;
  SourceBank bank;
  for (std::size_t k = 0; k < features_by_class.size(); ++k) {
    const Matrix& f = features_by_class[k];
    if (f.rows() < 2) {
      throw ContractError("estimate_source_stats: class " + std::to_string(k) +
                          " has fewer than 2 samples");
    }
    if (f.cols() != d) throw ContractError("estimate_source_stats: dimension mismatch");
    bank.classes.push_back(batch_moments(f));
    total += f.rows();
  }
  Matrix pooled(total, d);
  Eigen::Index row = 0;
  for (const Matrix& f : features_by_class) {
    pooled.middleRows(row, f.rows()) = f;
    row += f.rows();
  }
  bank.global = batch_moments(pooled);
  bank.weights = MixtureWeights::uniform(static_cast<int>(features_by_class.size()));
  bank.provenance = Provenance::kEstimated;
  return bank;
}

SourceBank estimate_source_stats(const Matrix& features, std::span<const int> labels,
                                 int num_classes) {
  if (static_cast<Eigen::Index>(labels.size()) != features.rows()) {
    throw ContractError("estimate_source_stats: label count mismatch");
  }
  std::vector<std::vector<Eigen::Index>> rows(static_cast<std::size_t>(num_classes));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw ContractError("estimate_source_stats: label out of range");
    }
    rows[static_cast<std::size_t>(labels[i])].push_back(static_cast<Eigen::Index>(i));
  }
  std::vector<Matrix> by_class;
  for (const auto& idx : rows) {
    Matrix m(static_cast<Eigen::Index>(idx.size()), features.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = features.row(idx[i]);
    by_class.push_back(std::move(m));
  }
  return estimate_source_stats(by_class);
}

bool InferResult::all_consistent() const {
  return std::all_of(consistent.begin(), consistent.end(), [](bool b) { return b; });
}

double inference_objective(const Matrix& classifier, const Matrix& sqrt_means, Matrix* gradient) {
  const Eigen::Index k = classifier.rows();
  const Eigen::Index d = classifier.cols() - 1;
  if (sqrt_means.rows() != k || sqrt_means.cols() != d) {
    throw ContractError("inference_objective: parameter shape mismatch");
  }
  const Matrix w = classifier.leftCols(d);
  const Vector b = classifier.col(d);
  const Matrix means = sqrt_means.array().square().matrix();
  if (gradient) gradient->setZero(k, d);
  double total = 0.0;
  for (Eigen::Index c = 0; c < k; ++c) {
    const Vector logits = w * means.row(c).transpose() + b;
    const Vector q = softmax(logits);
    total -= std::log(std::max(q(c), 1e-300));
    if (gradient) {
      Vector d_logits = q;
      d_logits(c) -= 1.0;
      const Vector d_mean = w.transpose() * d_logits;
      gradient->row(c) = (2.0 * sqrt_means.row(c).transpose().array() * d_mean.array()).transpose();
    }
  }
  return total;
}

InferResult infer_source_means(const Matrix& classifier, const InferConfig& config) {
  if (!classifier.allFinite()) throw ContractError("infer_source_means: non-finite classifier");
  if (classifier.cols() < 2 || classifier.rows() < 2) {
    throw ContractError("infer_source_means: classifier must be K x (d + 1) with K >= 2");
  }
  const Eigen::Index k = classifier.rows();
  const Eigen::Index d = classifier.cols() - 1;

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, config.init_std);
  InferState state;
  state.sqrt_means.resize(k, d);
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = 0; j < d; ++j) state.sqrt_means(i, j) = std::abs(normal(rng));
  state.square_avg = Matrix::Zero(k, d);
  state.lr = config.lr;
  state.weight_decay = config.weight_decay;

  InferResult result;
  bool stopped = false;
  Matrix grad;
  for (; state.iteration < config.max_iterations; ++state.iteration) {
    const double value = inference_objective(classifier, state.sqrt_means, &grad);
    result.objective_trace.push_back(value);
    const auto n = result.objective_trace.size();
    if (n > static_cast<std::size_t>(config.window)) {
      const double before = result.objective_trace[n - 1 - static_cast<std::size_t>(config.window)];
      if (before - value < config.tolerance) {
        stopped = true;
        break;
      }
    }
    grad += state.weight_decay * state.sqrt_means;
    state.square_avg = config.rms_alpha * state.square_avg +
                       (1.0 - config.rms_alpha) * grad.array().square().matrix();
    state.sqrt_means.array() -=
        state.lr * grad.array() / (state.square_avg.array().sqrt() + config.rms_eps);
  }
  result.iterations = state.iteration;

  const Matrix means = state.means();
  const Matrix w = classifier.leftCols(d);
  const Vector b = classifier.col(d);
  for (Eigen::Index c = 0; c < k; ++c) {
    result.means.push_back(means.row(c).transpose());
    const Vector logits = w * means.row(c).transpose() + b;
    Eigen::Index top = 0;
    logits.maxCoeff(&top);
    result.consistent.push_back(top == c);
    result.class_losses.push_back(-std::log(std::max(softmax(logits)(c), 1e-300)));
  }
  result.converged = stopped && result.all_consistent();
  if (config.max_iterations > 0 && !result.all_consistent()) {
    std::cerr << "warning: source inference left classes inconsistent:";
    for (Eigen::Index c = 0; c < k; ++c) {
      if (!result.consistent[static_cast<std::size_t>(c)]) {
        std::cerr << " " << c << " (loss " << result.class_losses[static_cast<std::size_t>(c)] << ")";
      }
    }
    std::cerr << '\n';
  }
  return result;
}

namespace {

double gamma_of(std::span<const Vector> means) {
  if (means.size() < 2) throw ContractError("choose_gamma: need at least two class means");
  const GaussianStats spread = batch_moments(stack_rows(means));
  Eigen::JacobiSVD<Matrix> svd(spread.cov);
  return svd.singularValues()(0) / 30.0;
}

}  // namespace

double choose_gamma(std::span<const Vector> means) {
  const double gamma = gamma_of(means);
  if (!(gamma > 0.0)) throw ContractError("choose_gamma: class means coincide, gamma is zero");
  return gamma;
}

double choose_gamma_or(std::span<const Vector> means, double floor) {
  const double gamma = gamma_of(means);
  return gamma > floor ? gamma : floor;
}

SourceBank build_inferred_bank(std::span<const Vector> means, double gamma) {
  if (means.empty()) throw ContractError("build_inferred_bank: no means");
  if (!(gamma > 0.0)) throw ContractError("build_inferred_bank: gamma must be positive");
  const Eigen::Index d = means.front().size();
  SourceBank bank;
  for (const Vector& m : means) {
    if ((m.array() < 0.0).any()) throw ContractError("build_inferred_bank: negative mean entry");
    bank.classes.push_back({m, gamma * Matrix::Identity(d, d)});
  }
  bank.weights = MixtureWeights::uniform(static_cast<int>(means.size()));
  bank.global = merge_mixture(bank.classes, bank.weights);
  bank.provenance = Provenance::kInferred;
  return bank;
}

}  // namespace ttac
