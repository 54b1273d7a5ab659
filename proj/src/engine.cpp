#include "ttac/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>

namespace ttac {

namespace {

double input_scale(const Matrix& inputs) {
  if (inputs.rows() < 2) return 1.0;
  const Vector mean = inputs.colwise().mean().transpose();
  const double var =
      (inputs.rowwise() - mean.transpose()).array().square().sum() /
      static_cast<double>(inputs.rows() * inputs.cols());
  return var > 0.0 ? std::sqrt(var) : 1.0;
}

std::vector<int> slice(std::span<const int> v, std::size_t start, std::size_t count) {
  if (v.empty()) return {};
  return {v.begin() + static_cast<std::ptrdiff_t>(start),
          v.begin() + static_cast<std::ptrdiff_t>(start + count)};
}

Matrix gather(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

template <typename Enum>
struct NamedValue {
  Enum value;
  const char* name;
};

constexpr NamedValue<Protocol> kProtocolNames[] = {
    {Protocol::kNOSF, "N-O-SF"},
    {Protocol::kNOSL, "N-O-SL"},
    {Protocol::kNMSF, "N-M-SF"},
    {Protocol::kNMSL, "N-M-SL"},
};

constexpr NamedValue<Method> kMethodNames[] = {
    {Method::kTtacPlusPlus, "TTAC++"},
    {Method::kTest, "TEST"},
    {Method::kEntropyMin, "ENTROPY_MIN"},
    {Method::kStOnly, "ST_ONLY"},
};

}  // namespace

std::string to_string(Protocol p) {
  for (const auto& [value, name] : kProtocolNames)
    if (value == p) return name;
  return "?";
}

Protocol protocol_from_string(const std::string& s) {
  for (const auto& [value, name] : kProtocolNames)
    if (s == name) return value;
  throw std::invalid_argument("unknown protocol '" + s + "'");
}

bool is_one_pass(Protocol p) noexcept { return p == Protocol::kNOSF || p == Protocol::kNOSL; }
bool is_source_free(Protocol p) noexcept { return p == Protocol::kNOSF || p == Protocol::kNMSF; }

std::string to_string(Method m) {
  for (const auto& [value, name] : kMethodNames)
    if (value == m) return name;
  return "?";
}

Method method_from_string(const std::string& s) {
  for (const auto& [value, name] : kMethodNames)
    if (s == name) return value;
  if (s == "TTAC" || s == "ttac++" || s == "ttac") return Method::kTtacPlusPlus;
  if (s == "test") return Method::kTest;
  if (s == "entropy" || s == "entropy_min") return Method::kEntropyMin;
  if (s == "st_only" || s == "st") return Method::kStOnly;
  throw std::invalid_argument("unknown method '" + s + "'");
}

// ---------------------------------------------------------------------------
// ProtocolConfig

void ProtocolConfig::validate() const {
  auto fail = [](const std::string& what) { throw ContractError("ProtocolConfig: " + what); };
  if (n_b < 1) fail("n_b must be positive");
  if (n_c < n_b) fail("n_c must be at least n_b");
  if (n_itr < 0) fail("n_itr must be nonnegative");
  if (n_passes < 1) fail("n_passes must be positive");
  if (xi < 0.0 || xi > 1.0) fail("xi must lie in [0, 1]");
  if (n_clip < 1 || n_clip_k < 1) fail("clip bounds must be positive");
  if (warm_start_count < 0 || warm_start_count_k < 0) fail("warm start counts must be >= 0");
  if (!(lr >= 0.0) || momentum < 0.0 || momentum >= 1.0) fail("bad optimizer settings");
  if (!(cov_eps_floor > 0.0) || cov_eps_rel < 0.0) fail("bad covariance regularization");
  if (weak_jitter < 0.0 || strong_jitter < weak_jitter) fail("need 0 <= weak_jitter <= strong_jitter");
  if (drop_prob < 0.0 || drop_prob >= 1.0) fail("drop_prob must lie in [0, 1)");
}

FilterThresholds ProtocolConfig::thresholds() const {
  if (!use_filters) return {-2.0, -1.0, tau_st};
  return {tau_tc_diff, tau_pp_conf, tau_st};
}

AlignmentOptions ProtocolConfig::alignment_options(Provenance anchors) const {
  AlignmentOptions o;
  o.regularizer = {cov_eps_rel, cov_eps_floor};
  o.mean_only = mean_only || (inferred_mean_only && anchors == Provenance::kInferred);
  o.metric = alignment;
  return o;
}

ObjectiveWeights ProtocolConfig::objective_weights() const {
  return {lambda1, lambda2, use_clustering, use_global, use_self_training};
}

nlohmann::json config_to_json(const ProtocolConfig& c) {
  return {
      {"protocol", to_string(c.protocol)},
      {"n_b", c.n_b},
      {"n_c", c.n_c},
      {"n_itr", c.n_itr},
      {"n_passes", c.n_passes},
      {"interleave_inference", c.interleave_inference},
      {"xi", c.xi},
      {"tau_tc_diff", c.tau_tc_diff},
      {"tau_pp_conf", c.tau_pp_conf},
      {"tau_st", c.tau_st},
      {"n_clip", c.n_clip},
      {"n_clip_k", c.n_clip_k},
      {"lambda1", c.lambda1},
      {"lambda2", c.lambda2},
      {"lr", c.lr},
      {"momentum", c.momentum},
      {"weight_decay", c.weight_decay},
      {"use_clustering", c.use_clustering},
      {"use_global", c.use_global},
      {"use_self_training", c.use_self_training},
      {"use_filters", c.use_filters},
      {"warm_start", c.warm_start},
      {"warm_start_count_k", c.warm_start_count_k},
      {"warm_start_count", c.warm_start_count},
      {"cov_eps_rel", c.cov_eps_rel},
      {"cov_eps_floor", c.cov_eps_floor},
      {"mean_only", c.mean_only},
      {"inferred_mean_only", c.inferred_mean_only},
      {"alignment", c.alignment == AlignmentMetric::kKl ? "kl" : "l2"},
      {"weak_jitter", c.weak_jitter},
      {"strong_jitter", c.strong_jitter},
      {"drop_prob", c.drop_prob},
      {"entropy_scope", c.entropy_scope == EntropyScope::kHead ? "head" : "all"},
      {"seed", c.seed},
  };
}

ProtocolConfig config_from_json(const nlohmann::json& j, ProtocolConfig c) {
  if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
  const nlohmann::json known = config_to_json(c);
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw std::invalid_argument("config: unknown key '" + key + "'");
  }
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  if (j.contains("protocol")) c.protocol = protocol_from_string(j.at("protocol").get<std::string>());
  get("n_b", c.n_b);
  get("n_c", c.n_c);
  get("n_itr", c.n_itr);
  get("n_passes", c.n_passes);
  get("interleave_inference", c.interleave_inference);
  get("xi", c.xi);
  get("tau_tc_diff", c.tau_tc_diff);
  get("tau_pp_conf", c.tau_pp_conf);
  get("tau_st", c.tau_st);
  get("n_clip", c.n_clip);
  get("n_clip_k", c.n_clip_k);
  get("lambda1", c.lambda1);
  get("lambda2", c.lambda2);
  get("lr", c.lr);
  get("momentum", c.momentum);
  get("weight_decay", c.weight_decay);
  get("use_clustering", c.use_clustering);
  get("use_global", c.use_global);
  get("use_self_training", c.use_self_training);
  get("use_filters", c.use_filters);
  get("warm_start", c.warm_start);
  get("warm_start_count_k", c.warm_start_count_k);
  get("warm_start_count", c.warm_start_count);
  get("cov_eps_rel", c.cov_eps_rel);
  get("cov_eps_floor", c.cov_eps_floor);
  get("mean_only", c.mean_only);
  get("inferred_mean_only", c.inferred_mean_only);
  if (j.contains("alignment")) {
    const auto s = j.at("alignment").get<std::string>();
    if (s != "kl" && s != "l2") throw std::invalid_argument("config: alignment must be kl or l2");
    c.alignment = s == "kl" ? AlignmentMetric::kKl : AlignmentMetric::kL2Moments;
  }
  get("weak_jitter", c.weak_jitter);
  get("strong_jitter", c.strong_jitter);
  get("drop_prob", c.drop_prob);
  if (j.contains("entropy_scope")) {
    const auto s = j.at("entropy_scope").get<std::string>();
    if (s != "head" && s != "all") throw std::invalid_argument("config: entropy_scope must be head or all");
    c.entropy_scope = s == "head" ? EntropyScope::kHead : EntropyScope::kAll;
  }
  get("seed", c.seed);
  c.validate();
  return c;
}

ProtocolConfig load_config(const std::filesystem::path& path, ProtocolConfig base) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  return config_from_json(nlohmann::json::parse(in), base);
}

// ---------------------------------------------------------------------------
// QueueState

QueueState::QueueState(int capacity) : capacity_(capacity) {
  if (capacity < 1) throw ContractError("QueueState: capacity must be positive");
}

std::vector<SampleId> QueueState::push_batch(const Matrix& inputs, std::span<const SampleId> ids) {
  const int n = static_cast<int>(inputs.rows());
  if (n > capacity_) throw ContractError("QueueState: batch larger than queue capacity");
  if (!ids.empty() && static_cast<int>(ids.size()) != n) {
    throw ContractError("QueueState: id count differs from batch size");
  }
  std::vector<SampleId> evicted;
  while (size_ + n > capacity_) {
    const Entry& oldest = batches_.front();
    evicted.insert(evicted.end(), oldest.ids.begin(), oldest.ids.end());
    size_ -= static_cast<int>(oldest.ids.size());
    batches_.pop_front();
  }
  Entry e{inputs, {}};
  if (ids.empty()) {
    e.ids.resize(static_cast<std::size_t>(n));
    std::iota(e.ids.begin(), e.ids.end(), arrivals_);
  } else {
    e.ids.assign(ids.begin(), ids.end());
  }
  arrivals_ += n;
  size_ += n;
  batches_.push_back(std::move(e));
  return evicted;
}

Matrix QueueState::inputs() const {
  if (batches_.empty()) return Matrix(0, 0);
  Matrix out(size_, batches_.front().inputs.cols());
  Eigen::Index row = 0;
  for (const Entry& e : batches_) {
    out.middleRows(row, e.inputs.rows()) = e.inputs;
    row += e.inputs.rows();
  }
  return out;
}

std::vector<SampleId> QueueState::ids() const {
  std::vector<SampleId> out;
  out.reserve(static_cast<std::size_t>(size_));
  for (const Entry& e : batches_) out.insert(out.end(), e.ids.begin(), e.ids.end());
  return out;
}

// ---------------------------------------------------------------------------
// StreamReport

double StreamReport::final_error() const {
  return cumulative_error.empty() ? std::nan("") : cumulative_error.back();
}

double StreamReport::mean_accept_rate() const {
  double sum = 0.0;
  int n = 0;
  for (const auto& b : batches) {
    if (b.steps == 0) continue;
    sum += b.accept_rate;
    ++n;
  }
  return n ? sum / n : 0.0;
}

bool StreamReport::same_outcome(const StreamReport& o) const {
  if (method != o.method || protocol != o.protocol) return false;
  if (predictions.size() != o.predictions.size() || steps.size() != o.steps.size() ||
      batches.size() != o.batches.size() || cumulative_error != o.cumulative_error) {
    return false;
  }
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto& a = predictions[i];
    const auto& b = o.predictions[i];
    if (a.arrival != b.arrival || a.id != b.id || a.label != b.label || a.truth != b.truth) {
      return false;
    }
  }
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const auto& a = steps[i];
    const auto& b = o.steps[i];
    if (a.batch != b.batch || a.epoch != b.epoch || a.skipped != b.skipped ||
        a.losses.total != b.losses.total || a.losses.l_ac != b.losses.l_ac ||
        a.losses.l_ga != b.losses.l_ga || a.losses.l_st != b.losses.l_st) {
      return false;
    }
  }
  for (std::size_t i = 0; i < batches.size(); ++i) {
    const auto& a = batches[i];
    const auto& b = o.batches[i];
    if (a.batch != b.batch || a.samples != b.samples || a.steps != b.steps ||
        a.accept_rate != b.accept_rate || a.tc_rate != b.tc_rate || a.pp_rate != b.pp_rate) {
      return false;
    }
  }
  return true;
}

nlohmann::json StreamReport::to_json() const {
  nlohmann::json preds = nlohmann::json::array();
  for (const auto& p : predictions) {
    preds.push_back({{"arrival", p.arrival}, {"id", p.id}, {"label", p.label}, {"truth", p.truth}});
  }
  nlohmann::json step_rows = nlohmann::json::array();
  for (const auto& s : steps) {
    step_rows.push_back({{"batch", s.batch},
                         {"epoch", s.epoch},
                         {"skipped", s.skipped},
                         {"l_ac", s.losses.l_ac},
                         {"l_ga", s.losses.l_ga},
                         {"l_st", s.losses.l_st},
                         {"lambda1", s.losses.lambda1},
                         {"lambda2", s.losses.lambda2},
                         {"total", s.losses.total},
                         {"accepted_ac", s.losses.accepted_ac},
                         {"accepted_ga", s.losses.accepted_ga},
                         {"accepted_st", s.losses.accepted_st}});
  }
  nlohmann::json batch_rows = nlohmann::json::array();
  for (const auto& b : batches) {
    batch_rows.push_back({{"batch", b.batch},
                          {"samples", b.samples},
                          {"steps", b.steps},
                          {"skipped_steps", b.skipped_steps},
                          {"tc_rate", b.tc_rate},
                          {"pp_rate", b.pp_rate},
                          {"accept_rate", b.accept_rate},
                          {"st_rate", b.st_rate},
                          {"wall_seconds", b.wall_seconds}});
  }
  nlohmann::json out = {{"method", method},
                        {"protocol", protocol},
                        {"predictions", std::move(preds)},
                        {"cumulative_error", cumulative_error},
                        {"steps", std::move(step_rows)},
                        {"batches", std::move(batch_rows)}};
  const double e = final_error();
  out["final_error"] = std::isnan(e) ? nlohmann::json(nullptr) : nlohmann::json(e);
  return out;
}

void StreamReport::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "report.json");
    out << to_json().dump(1) << '\n';
  }
  {
    std::ofstream out(dir / "cumulative_error.csv");
    out << "arrival,cumulative_error\n";
    out.precision(17);
    std::size_t k = 0;
    for (const auto& p : predictions) {
      if (p.truth < 0) continue;
      out << p.arrival << ',' << cumulative_error[k++] << '\n';
    }
  }
  {
    std::ofstream out(dir / "predictions.csv");
    out << "arrival,id,label,truth\n";
    for (const auto& p : predictions) {
      out << p.arrival << ',' << p.id << ',' << p.label << ',' << p.truth << '\n';
    }
  }
}

// ---------------------------------------------------------------------------
// AdaptationSession

AdaptationSession::AdaptationSession(ModelParams model, ProtocolConfig config, Method method,
                                     std::optional<SourceBank> source)
    : model_(std::move(model)),
      config_(std::move(config)),
      method_(method),
      source_(std::move(source)),
      ema_(config_.xi),
      queue_(config_.n_c),
      rng_(config_.seed),
      epochs_(config_.n_itr) {
  config_.validate();
  model_.validate();
  optimizer_ = OptimizerState::for_params(model_, config_.lr, config_.momentum, config_.weight_decay);
  report_.method = to_string(method_);
  report_.protocol = to_string(config_.protocol);
  if (method_ == Method::kTtacPlusPlus) {
    if (!source_) throw ContractError("TTAC++ requires a source bank");
    source_->validate();
    if (source_->num_classes() != model_.num_classes() || source_->dim() != model_.feature_dim()) {
      throw ContractError("source bank does not match the model's classes/features");
    }
    align_ = config_.alignment_options(source_->provenance);
    target_ = config_.warm_start
                  ? TargetBank::warm_start(*source_, config_.n_clip_k, config_.n_clip,
                                           config_.warm_start_count_k, config_.warm_start_count)
                  : TargetBank::empty(source_->num_classes(), source_->dim(), config_.n_clip_k,
                                      config_.n_clip);
  }
}

std::vector<int> AdaptationSession::predict_and_commit(const Matrix& batch,
                                                       std::span<const int> truth,
                                                       std::span<const SampleId> ids) {
  if (!truth.empty() && static_cast<Eigen::Index>(truth.size()) != batch.rows()) {
    throw ContractError("predict_and_commit: label count differs from batch size");
  }
  if (!ids.empty() && static_cast<Eigen::Index>(ids.size()) != batch.rows()) {
    throw ContractError("predict_and_commit: id count differs from batch size");
  }
  const std::vector<int> labels = argmax_rows(forward(model_, batch).logits);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    CommittedPrediction p;
    p.arrival = committed_;
    p.id = ids.empty() ? committed_ : ids[i];
    p.label = labels[i];
    p.truth = truth.empty() ? -1 : truth[i];
    ++committed_;
    if (p.truth >= 0) {
      ++labelled_;
      if (p.truth != p.label) ++errors_;
      report_.cumulative_error.push_back(static_cast<double>(errors_) /
                                         static_cast<double>(labelled_));
    }
    report_.predictions.push_back(p);
  }
  return labels;
}

void AdaptationSession::sttt_step(const Matrix& batch, std::span<const SampleId> ids) {
  const auto start = std::chrono::steady_clock::now();
  BatchDiagnostics diag;
  diag.batch = batch_index_++;
  diag.samples = static_cast<int>(batch.rows());

  for (SampleId evicted : queue_.push_batch(batch, ids)) {
    if (drop_evicted_ema_) ema_.erase(evicted);
  }
  if (method_ != Method::kTest && epochs_ > 0) {
    const Matrix pool = queue_.inputs();
    const std::vector<SampleId> pool_ids = queue_.ids();
    const double scale = input_scale(pool);
    std::vector<std::size_t> order(pool_ids.size());
    for (int epoch = 0; epoch < epochs_; ++epoch) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng_);
      for (std::size_t start_row = 0; start_row < order.size();
           start_row += static_cast<std::size_t>(config_.n_b)) {
        const std::size_t count =
            std::min(order.size() - start_row, static_cast<std::size_t>(config_.n_b));
        const std::span<const std::size_t> rows(order.data() + start_row, count);
        std::vector<SampleId> mb_ids;
        mb_ids.reserve(count);
        for (std::size_t r : rows) mb_ids.push_back(pool_ids[r]);
        adapt_minibatch(gather(pool, rows), mb_ids, scale, epoch, diag);
      }
    }
  }
  if (diag.steps > 0) {
    diag.tc_rate /= diag.steps;
    diag.pp_rate /= diag.steps;
    diag.accept_rate /= diag.steps;
    diag.st_rate /= diag.steps;
  }
  diag.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  report_.batches.push_back(diag);
}

void AdaptationSession::adapt_minibatch(const Matrix& inputs, std::span<const SampleId> ids,
                                        double scale, int epoch, BatchDiagnostics& diag) {
  switch (method_) {
    case Method::kTest:
      return;
    case Method::kTtacPlusPlus:
      step_ttac(inputs, ids, scale, epoch, diag);
      return;
    case Method::kEntropyMin:
      step_entropy(inputs, epoch, diag);
      return;
    case Method::kStOnly:
      step_self_training(inputs, scale, epoch, diag);
      return;
  }
}

bool AdaptationSession::apply(const ModelGradients& grads, const LossBreakdown& losses, int epoch,
                              BatchDiagnostics& diag) {
  StepRecord record{diag.batch, epoch, losses, false};
  ++diag.steps;
  if (!std::isfinite(losses.total) || !grads.all_finite()) {
    record.skipped = true;
    ++diag.skipped_steps;
    std::cerr << "warning: non-finite loss at batch " << diag.batch << ", step skipped\n";
    report_.steps.push_back(record);
    return false;
  }
  sgd_step(model_, grads, optimizer_);
  report_.steps.push_back(record);
  return true;
}

void AdaptationSession::step_ttac(const Matrix& inputs, std::span<const SampleId> ids,
                                  double scale, int epoch, BatchDiagnostics& diag) {
  AugmentationConfig aug;
  aug.weak_sigma = config_.weak_jitter * scale;
  aug.strong_sigma = config_.strong_jitter * scale;
  aug.drop_prob = config_.drop_prob;
  const AugmentedViews views = make_views(inputs, aug, rng_);
  const ForwardTrace weak = forward(model_, views.weak);
  const std::vector<FilterDecision> decisions =
      filter_batch(ema_, ids, weak.posteriors, config_.thresholds());

  const double n = static_cast<double>(decisions.size());
  for (const auto& d : decisions) {
    diag.tc_rate += d.tc_pass / n;
    diag.pp_rate += d.pp_pass / n;
    diag.accept_rate += d.accepted_for_clustering() / n;
    diag.st_rate += d.st_pass / n;
  }

  const ObjectiveWeights weights = config_.objective_weights();
  const ForwardTrace strong = weights.self_training ? forward(model_, views.strong) : weak;
  try {
    ObjectiveResult result = total_objective(model_, *source_, *target_, weak, strong, decisions,
                                             config_.tau_st, weights, align_);
    if (apply(result.grads, result.losses, epoch, diag)) target_ = std::move(result.target);
  } catch (const DecompositionError& e) {
    LossBreakdown failed;
    failed.total = std::nan("");
    apply(ModelGradients::zeros_like(model_), failed, epoch, diag);
  }
}

void AdaptationSession::step_entropy(const Matrix& inputs, int epoch, BatchDiagnostics& diag) {
  const ForwardTrace trace = forward(model_, inputs);
  const LogitLoss loss = entropy_loss(trace);
  ModelGradients grads = backward(model_, trace, Matrix(), loss.d_logits);
  if (config_.entropy_scope == EntropyScope::kHead) {
    for (std::size_t l = 0; l + 1 < grads.backbone.size(); ++l) {
      grads.backbone[l].weight.setZero();
      grads.backbone[l].bias.setZero();
    }
  }
  LossBreakdown losses;
  losses.lambda1 = 0.0;
  losses.lambda2 = 0.0;
  losses.total = loss.value;
  apply(grads, losses, epoch, diag);
}

void AdaptationSession::step_self_training(const Matrix& inputs, double scale, int epoch,
                                           BatchDiagnostics& diag) {
  AugmentationConfig aug;
  aug.weak_sigma = config_.weak_jitter * scale;
  aug.strong_sigma = config_.strong_jitter * scale;
  aug.drop_prob = config_.drop_prob;
  const AugmentedViews views = make_views(inputs, aug, rng_);
  const ForwardTrace weak = forward(model_, views.weak);
  const ForwardTrace strong = forward(model_, views.strong);
  const SelfTrainingTerm term = self_training_term(weak.posteriors, strong, config_.tau_st);
  diag.st_rate += static_cast<double>(term.accepted) / static_cast<double>(inputs.rows());

  LossBreakdown losses;
  losses.lambda1 = 0.0;
  losses.lambda2 = config_.lambda2;
  losses.l_st = term.value;
  losses.accepted_st = term.accepted;
  losses.total = losses.recompute_total();
  ModelGradients grads = ModelGradients::zeros_like(model_);
  if (term.accepted > 0) grads = backward(model_, strong, Matrix(), config_.lambda2 * term.d_logits);
  apply(grads, losses, epoch, diag);
}

// ---------------------------------------------------------------------------
// Drivers

StreamReport run_method(Method method, const ProtocolConfig& config,
                        const std::optional<SourceBank>& source, const ModelParams& model,
                        const Stream& stream) {
  config.validate();
  if (stream.inputs.cols() != model.input_dim()) {
    throw ContractError("stream dimension does not match the model input");
  }
  if (!stream.labels.empty() && static_cast<Eigen::Index>(stream.labels.size()) != stream.size()) {
    throw ContractError("stream label count differs from sample count");
  }
  if (method == Method::kTtacPlusPlus) {
    if (!source) throw ContractError("TTAC++ requires a source bank");
    const bool inferred = source->provenance == Provenance::kInferred;
    if (is_source_free(config.protocol) && !inferred) {
      throw ContractError(to_string(config.protocol) +
                          " is source-free and requires an inferred source bank");
    }
    if (!is_source_free(config.protocol) && inferred) {
      throw ContractError(to_string(config.protocol) +
                          " is source-light and expects estimated source statistics");
    }
  }
  const std::size_t n = static_cast<std::size_t>(stream.size());
  const std::size_t nb = static_cast<std::size_t>(config.n_b);
  const std::span<const int> labels(stream.labels);

  if (is_one_pass(config.protocol)) {
    AdaptationSession session(model, config, method, source);
    for (std::size_t start = 0; start < n; start += nb) {
      const std::size_t count = std::min(nb, n - start);
      const Matrix batch = stream.inputs.middleRows(static_cast<Eigen::Index>(start),
                                                    static_cast<Eigen::Index>(count));
      session.predict_and_commit(batch, slice(labels, start, count));
      session.sttt_step(batch);
    }
    return session.take_report();
  }

  AdaptationSession session(model, config, method, source);
  session.set_drop_evicted_ema(false);
  std::mt19937_64 pass_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(n);
  for (int pass = 0; pass < config.n_passes; ++pass) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (pass > 0) std::shuffle(order.begin(), order.end(), pass_rng);
    const bool commit_now = config.interleave_inference && pass + 1 == config.n_passes;
    for (std::size_t start = 0; start < n; start += nb) {
      const std::size_t count = std::min(nb, n - start);
      const std::span<const std::size_t> rows(order.data() + start, count);
      const Matrix batch = gather(stream.inputs, rows);
      std::vector<SampleId> ids(rows.begin(), rows.end());
      if (commit_now) {
        std::vector<int> truth;
        if (!labels.empty()) {
          for (std::size_t r : rows) truth.push_back(labels[r]);
        }
        session.predict_and_commit(batch, truth, ids);
      }
      session.sttt_step(batch, ids);
    }
  }
  if (!config.interleave_inference) {
    for (std::size_t start = 0; start < n; start += nb) {
      const std::size_t count = std::min(nb, n - start);
      session.predict_and_commit(stream.inputs.middleRows(static_cast<Eigen::Index>(start),
                                                          static_cast<Eigen::Index>(count)),
                                 slice(labels, start, count));
    }
  }
  return session.take_report();
}

StreamReport run_stream(const ProtocolConfig& config, const SourceBank& source,
                        const ModelParams& model, const Stream& stream) {
  return run_method(Method::kTtacPlusPlus, config, source, model, stream);
}

StreamReport run_baseline(Method kind, const ProtocolConfig& config, const ModelParams& model,
                          const Stream& stream) {
  if (kind == Method::kTtacPlusPlus) throw ContractError("run_baseline: TTAC++ is not a baseline");
  return run_method(kind, config, std::nullopt, model, stream);
}

// ---------------------------------------------------------------------------

ModelSnapshotChannel::ModelSnapshotChannel(ModelParams initial)
    : current_(std::make_shared<const ModelParams>(std::move(initial))) {}

void ModelSnapshotChannel::publish(ModelParams params) {
  auto next = std::make_shared<const ModelParams>(std::move(params));
  std::lock_guard lock(mutex_);
  current_ = std::move(next);
  ++version_;
}

std::shared_ptr<const ModelParams> ModelSnapshotChannel::latest() const {
  std::lock_guard lock(mutex_);
  return current_;
}

std::uint64_t ModelSnapshotChannel::version() const {
  std::lock_guard lock(mutex_);
  return version_;
}

}  // namespace ttac
