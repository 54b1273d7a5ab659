#include "ttac/network.hpp"

#include "ttac/serialization.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

namespace ttac {

namespace {

constexpr double kLogClamp = 1e-12;

Matrix relu(const Matrix& m) { return m.cwiseMax(0.0); }

void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw ContractError(std::string(what) + ": non-finite input");
}

Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double stddev,
                       std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal(rng);
  return m;
}

}  // namespace

ModelParams ModelParams::init(const Architecture& arch, std::uint64_t seed) {
  if (arch.input_dim < 1 || arch.feature_dim < 1 || arch.num_classes < 2) {
    throw ContractError("ModelParams::init: degenerate architecture");
  }
  std::mt19937_64 rng(seed);
  ModelParams params;
  int in = arch.input_dim;
  std::vector<int> widths = arch.hidden;
  widths.push_back(arch.feature_dim);
  for (int out : widths) {
    DenseLayer layer;
    layer.weight = gaussian_matrix(out, in, std::sqrt(2.0 / in), rng);
    layer.bias = Vector::Constant(out, 0.01);
    params.backbone.push_back(std::move(layer));
    in = out;
  }
  params.classifier = Matrix::Zero(arch.num_classes, arch.feature_dim + 1);
  params.classifier.leftCols(arch.feature_dim) =
      gaussian_matrix(arch.num_classes, arch.feature_dim, std::sqrt(1.0 / arch.feature_dim), rng);
  return params;
}

int ModelParams::input_dim() const {
  if (backbone.empty()) throw ContractError("ModelParams: empty backbone");
  return backbone.front().in_dim();
}

int ModelParams::feature_dim() const {
  if (backbone.empty()) throw ContractError("ModelParams: empty backbone");
  return backbone.back().out_dim();
}

void ModelParams::validate() const {
  if (backbone.empty()) throw ContractError("ModelParams: empty backbone");
  for (std::size_t l = 0; l < backbone.size(); ++l) {
    if (backbone[l].bias.size() != backbone[l].weight.rows()) {
      throw ContractError("ModelParams: bias size mismatch in layer " + std::to_string(l));
    }
    if (l > 0 && backbone[l].in_dim() != backbone[l - 1].out_dim()) {
      throw ContractError("ModelParams: layer " + std::to_string(l) + " input mismatch");
    }
  }
  if (classifier.cols() != feature_dim() + 1) {
    throw ContractError("ModelParams: classifier must be K x (feature_dim + 1)");
  }
}

ModelGradients ModelGradients::zeros_like(const ModelParams& params) {
  ModelGradients g;
  for (const auto& layer : params.backbone) {
    g.backbone.push_back({Matrix::Zero(layer.weight.rows(), layer.weight.cols()),
                          Vector::Zero(layer.bias.size())});
  }
  g.classifier = Matrix::Zero(params.classifier.rows(), params.classifier.cols());
  return g;
}

ModelGradients& ModelGradients::operator+=(const ModelGradients& other) {
  if (other.backbone.size() != backbone.size()) {
    throw ContractError("ModelGradients: layer count mismatch");
  }
  for (std::size_t l = 0; l < backbone.size(); ++l) {
    backbone[l].weight += other.backbone[l].weight;
    backbone[l].bias += other.backbone[l].bias;
  }
  classifier += other.classifier;
  return *this;
}

ModelGradients& ModelGradients::operator*=(double scale) {
  for (auto& layer : backbone) {
    layer.weight *= scale;
    layer.bias *= scale;
  }
  classifier *= scale;
  return *this;
}

bool ModelGradients::all_finite() const {
  for (const auto& layer : backbone) {
    if (!layer.weight.allFinite() || !layer.bias.allFinite()) return false;
  }
  return classifier.allFinite();
}

double ModelGradients::max_abs() const {
  double m = classifier.size() ? classifier.cwiseAbs().maxCoeff() : 0.0;
  for (const auto& layer : backbone) {
    m = std::max({m, layer.weight.cwiseAbs().maxCoeff(), layer.bias.cwiseAbs().maxCoeff()});
  }
  return m;
}

Vector softmax(const Vector& logits) {
  const Vector shifted = logits.array() - logits.maxCoeff();
  const Vector e = shifted.array().exp();
  return e / e.sum();
}

std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Eigen::Index idx = 0;
    m.row(i).maxCoeff(&idx);
    out[static_cast<std::size_t>(i)] = static_cast<int>(idx);
  }
  return out;
}

ForwardTrace forward(const ModelParams& params, const Matrix& inputs) {
  if (inputs.cols() != params.input_dim()) throw ContractError("forward: input dimension mismatch");
  require_finite(inputs, "forward");

  ForwardTrace trace;
  trace.input = inputs;
  const Matrix* current = &trace.input;
  for (const auto& layer : params.backbone) {
    Matrix pre = (*current) * layer.weight.transpose();
    pre.rowwise() += layer.bias.transpose();
    trace.post.push_back(relu(pre));
    trace.pre.push_back(std::move(pre));
    current = &trace.post.back();
  }
  trace.logits = trace.features() * params.classifier_weights().transpose();
  trace.logits.rowwise() += params.classifier_bias().transpose();

  trace.posteriors.resize(trace.logits.rows(), trace.logits.cols());
  for (Eigen::Index i = 0; i < trace.logits.rows(); ++i) {
    trace.posteriors.row(i) = softmax(trace.logits.row(i).transpose()).transpose();
  }
  return trace;
}

ModelGradients backward(const ModelParams& params, const ForwardTrace& trace,
                        const Matrix& d_features, const Matrix& d_logits) {
  const Eigen::Index n = trace.batch_size();
  const Eigen::Index d = params.feature_dim();
  const Eigen::Index k = params.num_classes();
  if (trace.post.size() != params.backbone.size()) {
    throw ContractError("backward: trace does not match params");
  }
  const bool has_feat = d_features.size() != 0;
  const bool has_logit = d_logits.size() != 0;
  if (has_feat && (d_features.rows() != n || d_features.cols() != d)) {
    throw ContractError("backward: feature gradient shape mismatch");
  }
  if (has_logit && (d_logits.rows() != n || d_logits.cols() != k)) {
    throw ContractError("backward: logit gradient shape mismatch");
  }

  ModelGradients grads = ModelGradients::zeros_like(params);
  Matrix upstream = has_feat ? d_features : Matrix::Zero(n, d);
  if (has_logit) {
    grads.classifier.leftCols(d) = d_logits.transpose() * trace.features();
    grads.classifier.col(d) = d_logits.colwise().sum().transpose();
    upstream += d_logits * params.classifier_weights();
  }

  for (std::size_t l = params.backbone.size(); l-- > 0;) {
    Matrix d_pre = upstream.cwiseProduct((trace.pre[l].array() > 0.0).cast<double>().matrix());
    const Matrix& below = l == 0 ? trace.input : trace.post[l - 1];
    grads.backbone[l].weight = d_pre.transpose() * below;
    grads.backbone[l].bias = d_pre.colwise().sum().transpose();
    if (l > 0) upstream = d_pre * params.backbone[l].weight;
  }
  return grads;
}

Matrix softmax_backward(const Matrix& posteriors, const Matrix& d_posteriors) {
  Matrix out(posteriors.rows(), posteriors.cols());
  for (Eigen::Index i = 0; i < posteriors.rows(); ++i) {
    const double inner = posteriors.row(i).dot(d_posteriors.row(i));
    out.row(i) = posteriors.row(i).cwiseProduct(
        (d_posteriors.row(i).array() - inner).matrix());
  }
  return out;
}

LogitLoss entropy_loss(const ForwardTrace& trace) {
  const Matrix& q = trace.posteriors;
  const double n = static_cast<double>(q.rows());
  Matrix d_q(q.rows(), q.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    for (Eigen::Index j = 0; j < q.cols(); ++j) {
      const double p = q(i, j);
      const double lp = std::log(std::max(p, kLogClamp));
      total -= p * lp;
      d_q(i, j) = -(lp + (p >= kLogClamp ? 1.0 : 0.0)) / n;
    }
  }
  return {total / n, softmax_backward(q, d_q)};
}

LogitLoss cross_entropy_loss(const ForwardTrace& trace, std::span<const int> labels) {
  const Matrix& q = trace.posteriors;
  if (static_cast<Eigen::Index>(labels.size()) != q.rows()) {
    throw ContractError("cross_entropy_loss: label count mismatch");
  }
  const double n = static_cast<double>(q.rows());
  Matrix d_q = Matrix::Zero(q.rows(), q.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= q.cols()) throw ContractError("cross_entropy_loss: label out of range");
    const double p = q(i, y);
    total -= std::log(std::max(p, kLogClamp));
    if (p >= kLogClamp) d_q(i, y) = -1.0 / (p * n);
  }
  return {total / n, softmax_backward(q, d_q)};
}

OptimizerState OptimizerState::for_params(const ModelParams& params, double lr, double momentum,
                                          double weight_decay) {
  OptimizerState s;
  s.velocity = ModelGradients::zeros_like(params);
  s.lr = lr;
  s.momentum = momentum;
  s.weight_decay = weight_decay;
  return s;
}

void sgd_step(ModelParams& params, const ModelGradients& grads, OptimizerState& state) {
  if (grads.backbone.size() != params.backbone.size() ||
      state.velocity.backbone.size() != params.backbone.size()) {
    throw ContractError("sgd_step: layer count mismatch");
  }
  auto same_shape = [](const auto& a, const auto& b) {
    return a.rows() == b.rows() && a.cols() == b.cols();
  };
  bool shapes_ok = same_shape(params.classifier, grads.classifier) &&
                   same_shape(params.classifier, state.velocity.classifier);
  for (std::size_t l = 0; l < params.backbone.size(); ++l) {
    shapes_ok = shapes_ok && same_shape(params.backbone[l].weight, grads.backbone[l].weight) &&
                same_shape(params.backbone[l].bias, grads.backbone[l].bias) &&
                same_shape(params.backbone[l].weight, state.velocity.backbone[l].weight) &&
                same_shape(params.backbone[l].bias, state.velocity.backbone[l].bias);
  }
  if (!shapes_ok) throw ContractError("sgd_step: shape mismatch");
  if (!grads.all_finite()) throw NonFiniteGradient("sgd_step: non-finite gradient, step rejected");

  auto update = [&](auto& param, const auto& grad, auto& vel) {
    vel = state.momentum * vel + grad;
    if (state.weight_decay != 0.0) vel += state.weight_decay * param;
    param -= state.lr * vel;
  };
  for (std::size_t l = 0; l < params.backbone.size(); ++l) {
    update(params.backbone[l].weight, grads.backbone[l].weight, state.velocity.backbone[l].weight);
    update(params.backbone[l].bias, grads.backbone[l].bias, state.velocity.backbone[l].bias);
  }
  update(params.classifier, grads.classifier, state.velocity.classifier);
}

void save_model(const ModelParams& params, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_model: cannot open " + path.string());
  out << model_to_json(params).dump() << '\n';
}

ModelParams load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_model: cannot open " + path.string());
  return model_from_json(nlohmann::json::parse(in));
}

}  // namespace ttac
