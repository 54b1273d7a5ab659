#pragma once

#include "ttac/banks.hpp"
#include "ttac/filters.hpp"
#include "ttac/losses.hpp"
#include "ttac/network.hpp"

#include <json.hpp>

#include <cstdint>
#include <deque>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace ttac {

/// N-O: one pass, predict-then-adapt. N-M: several adaptation passes over the
/// whole target set, then inference. SF uses an inferred source bank, SL an
/// estimated one.
enum class Protocol { kNOSF, kNOSL, kNMSF, kNMSL };

std::string to_string(Protocol p);
Protocol protocol_from_string(const std::string& s);
bool is_one_pass(Protocol p) noexcept;
bool is_source_free(Protocol p) noexcept;

enum class Method {
  kTtacPlusPlus,  // anchored clustering + global alignment + self-training
  kTest,          // frozen source model
  kEntropyMin,    // prediction-entropy minimization
  kStOnly,        // self-training without clustering regularization
};

std::string to_string(Method m);
Method method_from_string(const std::string& s);

/// Parameters updated by entropy minimization.
enum class EntropyScope { kHead, kAll };

struct ProtocolConfig {
  Protocol protocol = Protocol::kNOSL;
  int n_b = 64;
  int n_c = 512;
  int n_itr = 4;
  int n_passes = 3;
  bool interleave_inference = false;

  double xi = 0.9;
  double tau_tc_diff = -0.001;
  double tau_pp_conf = 0.9;
  double tau_st = 0.9;
  std::int64_t n_clip = 320;
  std::int64_t n_clip_k = 64;
  double lambda1 = 1.0;
  double lambda2 = 10.0;

  double lr = 3e-4;
  double momentum = 0.9;
  double weight_decay = 0.0;

  bool use_clustering = true;
  bool use_global = true;
  bool use_self_training = true;
  bool use_filters = true;

  bool warm_start = true;
  std::int64_t warm_start_count_k = 64;
  std::int64_t warm_start_count = 320;
  double cov_eps_rel = 0.1;
  double cov_eps_floor = 1e-4;
  bool mean_only = false;
  /// Drop covariance gradients when the anchors are inferred (gamma I).
  bool inferred_mean_only = true;
  AlignmentMetric alignment = AlignmentMetric::kKl;

  double weak_jitter = 0.05;
  double strong_jitter = 0.15;
  double drop_prob = 0.2;

  EntropyScope entropy_scope = EntropyScope::kHead;
  std::uint64_t seed = 0;

  void validate() const;
  FilterThresholds thresholds() const;
  AlignmentOptions alignment_options(Provenance anchors = Provenance::kEstimated) const;
  ObjectiveWeights objective_weights() const;
};

nlohmann::json config_to_json(const ProtocolConfig& config);
/// Missing keys keep their defaults; unknown keys are rejected.
ProtocolConfig config_from_json(const nlohmann::json& j, ProtocolConfig base = {});
ProtocolConfig load_config(const std::filesystem::path& path, ProtocolConfig base = {});

/// Fixed-capacity FIFO of arrival batches.
class QueueState {
 public:
  explicit QueueState(int capacity);

  /// Appends a batch, evicting whole oldest batches until it fits.
  /// Returns the ids of evicted samples.
  std::vector<SampleId> push_batch(const Matrix& inputs, std::span<const SampleId> ids);

  int capacity() const noexcept { return capacity_; }
  int size() const noexcept { return size_; }
  std::int64_t arrivals() const noexcept { return arrivals_; }
  Matrix inputs() const;
  std::vector<SampleId> ids() const;

 private:
  struct Entry {
    Matrix inputs;
    std::vector<SampleId> ids;
  };
  int capacity_;
  int size_ = 0;
  std::int64_t arrivals_ = 0;
  std::deque<Entry> batches_;
};

struct CommittedPrediction {
  std::int64_t arrival = 0;
  SampleId id = 0;
  int label = 0;
  int truth = -1;
};

struct StepRecord {
  int batch = 0;
  int epoch = 0;
  LossBreakdown losses;
  bool skipped = false;
};

struct BatchDiagnostics {
  int batch = 0;
  int samples = 0;
  int steps = 0;
  int skipped_steps = 0;
  double tc_rate = 0.0;
  double pp_rate = 0.0;
  double accept_rate = 0.0;
  double st_rate = 0.0;
  double wall_seconds = 0.0;
};

struct StreamReport {
  std::string method;
  std::string protocol;
  std::vector<CommittedPrediction> predictions;
  std::vector<double> cumulative_error;  // one entry per labelled prediction
  std::vector<StepRecord> steps;
  std::vector<BatchDiagnostics> batches;

  /// Final cumulative error in [0, 1]; NaN when no prediction had a label.
  double final_error() const;
  double mean_accept_rate() const;
  /// Equality of everything except wall-clock timing.
  bool same_outcome(const StreamReport& other) const;

  nlohmann::json to_json() const;
  /// report.json, cumulative_error.csv and predictions.csv.
  void write(const std::filesystem::path& dir) const;
};

/// A labelled (or unlabelled: labels empty) target stream in arrival order.
struct Stream {
  Matrix inputs;
  std::vector<int> labels;

  Eigen::Index size() const noexcept { return inputs.rows(); }
};

/// Single-writer adaptation state: model, optimizer, banks, EMA and queue.
class AdaptationSession {
 public:
  AdaptationSession(ModelParams model, ProtocolConfig config, Method method,
                    std::optional<SourceBank> source);

  /// Predicts on raw inputs with the current model and records the labels.
  /// Must run before the same batch is used for adaptation.
  std::vector<int> predict_and_commit(const Matrix& batch, std::span<const int> truth = {},
                                      std::span<const SampleId> ids = {});

  /// Enqueues the batch and runs the configured adaptation epochs over the
  /// queue. `ids` defaults to consecutive arrival numbers.
  void sttt_step(const Matrix& batch, std::span<const SampleId> ids = {});

  /// One optimization step on one minibatch.
  void adapt_minibatch(const Matrix& inputs, std::span<const SampleId> ids, double input_scale,
                       int epoch, BatchDiagnostics& diag);

  const ModelParams& model() const noexcept { return model_; }
  const StreamReport& report() const noexcept { return report_; }
  StreamReport take_report() { return std::move(report_); }
  const QueueState& queue() const noexcept { return queue_; }
  const TargetBank* target() const noexcept { return target_ ? &*target_ : nullptr; }
  const PosteriorEMA& ema() const noexcept { return ema_; }
  const ProtocolConfig& config() const noexcept { return config_; }

  /// Forget EMA entries of samples leaving the queue (one-pass protocols).
  void set_drop_evicted_ema(bool drop) noexcept { drop_evicted_ema_ = drop; }
  void set_epochs(int epochs) noexcept { epochs_ = epochs; }

 private:
  void step_ttac(const Matrix& inputs, std::span<const SampleId> ids, double input_scale,
                 int epoch, BatchDiagnostics& diag);
  void step_entropy(const Matrix& inputs, int epoch, BatchDiagnostics& diag);
  void step_self_training(const Matrix& inputs, double input_scale, int epoch,
                          BatchDiagnostics& diag);
  bool apply(const ModelGradients& grads, const LossBreakdown& losses, int epoch,
             BatchDiagnostics& diag);

  ModelParams model_;
  ProtocolConfig config_;
  Method method_;
  std::optional<SourceBank> source_;
  std::optional<TargetBank> target_;
  AlignmentOptions align_;
  OptimizerState optimizer_;
  PosteriorEMA ema_;
  QueueState queue_;
  std::mt19937_64 rng_;
  StreamReport report_;
  std::int64_t committed_ = 0;
  std::int64_t errors_ = 0;
  std::int64_t labelled_ = 0;
  int batch_index_ = 0;
  int epochs_;
  bool drop_evicted_ema_ = true;
};

/// Runs TTAC++ under the configured protocol.
StreamReport run_stream(const ProtocolConfig& config, const SourceBank& source,
                        const ModelParams& model, const Stream& stream);

/// Same causal driver with a baseline objective (or none for kTest).
StreamReport run_baseline(Method kind, const ProtocolConfig& config, const ModelParams& model,
                          const Stream& stream);

/// Any method; `source` may be empty for baselines.
StreamReport run_method(Method method, const ProtocolConfig& config,
                        const std::optional<SourceBank>& source, const ModelParams& model,
                        const Stream& stream);

/// Snapshot handoff between an adaptation lane (publisher) and an inference
/// lane (reader). Readers hold immutable snapshots.
class ModelSnapshotChannel {
 public:
  explicit ModelSnapshotChannel(ModelParams initial);

  void publish(ModelParams params);
  std::shared_ptr<const ModelParams> latest() const;
  std::uint64_t version() const;

 private:
  mutable std::mutex mutex_;
  std::shared_ptr<const ModelParams> current_;
  std::uint64_t version_ = 0;
};

}  // namespace ttac
