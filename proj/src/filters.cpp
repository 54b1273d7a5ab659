#include "ttac/filters.hpp"

#include <cmath>

namespace ttac {

namespace {

void require_posterior(const Vector& q) {
  if (q.size() == 0 || !q.allFinite() || (q.array() < -1e-12).any() ||
      std::abs(q.sum() - 1.0) > 1e-6) {
    throw ContractError("posterior: expected a probability vector");
  }
}

int argmax(const Vector& v) {
  Eigen::Index idx = 0;
  v.maxCoeff(&idx);
  return static_cast<int>(idx);
}

}  // namespace

PosteriorEMA::PosteriorEMA(double xi) : xi_(xi) {
  if (xi < 0.0 || xi > 1.0) throw ContractError("PosteriorEMA: xi must lie in [0, 1]");
}

const Vector& PosteriorEMA::update(SampleId id, const Vector& posterior) {
  require_posterior(posterior);
  auto [it, inserted] = smoothed_.try_emplace(id, Entry{posterior, 1});
  if (!inserted) {
    Entry& e = it->second;
    if (e.posterior.size() != posterior.size()) {
      throw ContractError("PosteriorEMA: class count changed for a tracked sample");
    }
    e.posterior = (1.0 - xi_) * e.posterior + xi_ * posterior;
    ++e.steps;
  }
  return it->second.posterior;
}

PosteriorEMA ema_update(PosteriorEMA state, SampleId id, const Vector& posterior) {
  state.update(id, posterior);
  return state;
}

bool tc_filter(const Vector& posterior, const Vector& ema_prev, double tau_diff) {
  const int top = argmax(posterior);
  return posterior(top) - ema_prev(top) > tau_diff;
}

bool pp_filter(const Vector& ema, double tau_conf) { return ema.maxCoeff() > tau_conf; }

std::vector<FilterDecision> filter_batch(PosteriorEMA& ema, std::span<const SampleId> ids,
                                         const Matrix& posteriors,
                                         const FilterThresholds& thresholds) {
  if (static_cast<Eigen::Index>(ids.size()) != posteriors.rows()) {
    throw ContractError("filter_batch: id count differs from batch size");
  }
  std::vector<FilterDecision> out;
  out.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Vector q = posteriors.row(static_cast<Eigen::Index>(i)).transpose();
    FilterDecision d;
    d.id = ids[i];
    d.label = argmax(q);
    // First sight: the previous average is the posterior itself.
    const Vector prev = ema.contains(d.id) ? ema.get(d.id) : q;
    d.tc_pass = tc_filter(q, prev, thresholds.tau_tc_diff);
    const Vector& smoothed = ema.update(d.id, q);
    d.pp_pass = pp_filter(smoothed, thresholds.tau_pp_conf);
    d.st_pass = q.maxCoeff() >= thresholds.tau_st;
    out.push_back(d);
  }
  return out;
}

std::vector<std::vector<Eigen::Index>> accepted_rows_by_class(
    std::span<const FilterDecision> decisions, int num_classes) {
  std::vector<std::vector<Eigen::Index>> rows(static_cast<std::size_t>(num_classes));
  for (std::size_t i = 0; i < decisions.size(); ++i) {
    const auto& d = decisions[i];
    if (!d.accepted_for_clustering()) continue;
    if (d.label < 0 || d.label >= num_classes) throw ContractError("decision label out of range");
    rows[static_cast<std::size_t>(d.label)].push_back(static_cast<Eigen::Index>(i));
  }
  return rows;
}

Matrix gather_rows(const Matrix& m, std::span<const Eigen::Index> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

ClusterUpdate filtered_cluster_update(const TargetBank& bank, const Matrix& features,
                                      std::span<const FilterDecision> decisions) {
  if (static_cast<Eigen::Index>(decisions.size()) != features.rows()) {
    throw ContractError("filtered_cluster_update: decisions and features are not aligned");
  }
  ClusterUpdate out{bank, std::vector<int>(static_cast<std::size_t>(bank.num_classes()), 0)};
  const auto rows = accepted_rows_by_class(decisions, bank.num_classes());
  for (int k = 0; k < bank.num_classes(); ++k) {
    const auto& idx = rows[static_cast<std::size_t>(k)];
    if (idx.empty()) continue;
    out.bank.classes[static_cast<std::size_t>(k)] =
        running_update(bank.classes[static_cast<std::size_t>(k)], gather_rows(features, idx));
    out.accepted[static_cast<std::size_t>(k)] = static_cast<int>(idx.size());
  }
  return out;
}

}  // namespace ttac
