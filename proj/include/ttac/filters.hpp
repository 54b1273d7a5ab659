#pragma once

#include "ttac/banks.hpp"

#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

namespace ttac {

using SampleId = std::int64_t;

/// Exponentially smoothed posteriors keyed by stable sample id.
class PosteriorEMA {
 public:
  explicit PosteriorEMA(double xi = 0.9);

  double xi() const noexcept { return xi_; }
  bool contains(SampleId id) const { return smoothed_.count(id) != 0; }
  /// Smoothed posterior for `id`; throws std::out_of_range when absent.
  const Vector& get(SampleId id) const { return smoothed_.at(id).posterior; }
  int steps(SampleId id) const { return smoothed_.at(id).steps; }
  std::size_t size() const noexcept { return smoothed_.size(); }

  /// q~ <- (1 - xi) q~ + xi q, or q~ <- q on first sight. Returns the new value.
  const Vector& update(SampleId id, const Vector& posterior);
  void erase(SampleId id) { smoothed_.erase(id); }

 private:
  struct Entry {
    Vector posterior;
    int steps = 0;
  };
  double xi_;
  std::unordered_map<SampleId, Entry> smoothed_;
};

PosteriorEMA ema_update(PosteriorEMA state, SampleId id, const Vector& posterior);

struct FilterDecision {
  SampleId id = 0;
  int label = 0;
  bool tc_pass = false;
  bool pp_pass = false;
  bool st_pass = false;

  bool accepted_for_clustering() const noexcept { return tc_pass && pp_pass; }
};

/// Passes when the top-class posterior did not fall below its running average
/// by more than the (typically slightly negative) threshold.
bool tc_filter(const Vector& posterior, const Vector& ema_prev, double tau_diff);

/// Passes when the smoothed top-class confidence exceeds the threshold.
bool pp_filter(const Vector& ema, double tau_conf);

struct FilterThresholds {
  double tau_tc_diff = -0.001;
  double tau_pp_conf = 0.9;
  double tau_st = 0.9;
};

/// Runs EMA + TC + PP (+ self-training gate) over one minibatch of posteriors.
/// The EMA state is updated in place.
std::vector<FilterDecision> filter_batch(PosteriorEMA& ema, std::span<const SampleId> ids,
                                         const Matrix& posteriors,
                                         const FilterThresholds& thresholds);

struct ClusterUpdate {
  TargetBank bank;
  std::vector<int> accepted;  // per class
};

/// Updates each class cluster with exactly the features whose decision
/// passed both filters and whose pseudo label is that class.
ClusterUpdate filtered_cluster_update(const TargetBank& bank, const Matrix& features,
                                      std::span<const FilterDecision> decisions);

/// Row indices of `decisions` accepted for class k.
std::vector<std::vector<Eigen::Index>> accepted_rows_by_class(
    std::span<const FilterDecision> decisions, int num_classes);

Matrix gather_rows(const Matrix& m, std::span<const Eigen::Index> rows);

}  // namespace ttac
