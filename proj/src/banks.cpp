#include "ttac/banks.hpp"

#include <stdexcept>

namespace ttac {

std::string to_string(Provenance p) { return p == Provenance::kEstimated ? "estimated" : "inferred"; }

Provenance provenance_from_string(const std::string& s) {
  if (s == "estimated") return Provenance::kEstimated;
  if (s == "inferred") return Provenance::kInferred;
  throw std::runtime_error("unknown provenance '" + s + "'");
}

void SourceBank::validate() const {
  if (classes.empty()) throw ContractError("SourceBank: no classes");
  if (weights.size() != num_classes()) throw ContractError("SourceBank: weight count mismatch");
  for (const auto& c : classes) {
    if (c.dim() != dim()) throw ContractError("SourceBank: class dimension mismatch");
  }
}

TargetBank TargetBank::empty(int num_classes, int dim, std::int64_t clip_k, std::int64_t clip) {
  TargetBank bank;
  for (int k = 0; k < num_classes; ++k) bank.classes.push_back(RunningStats::zeros(dim, clip_k));
  bank.global = RunningStats::zeros(dim, clip);
  bank.weights = MixtureWeights::uniform(num_classes);
  return bank;
}

TargetBank TargetBank::warm_start(const SourceBank& source, std::int64_t clip_k,
                                  std::int64_t clip, std::int64_t pseudo_count_k,
                                  std::int64_t pseudo_count) {
  TargetBank bank;
  for (const auto& c : source.classes) {
    bank.classes.push_back(RunningStats::warm_start(c, pseudo_count_k, clip_k));
  }
  bank.global = RunningStats::warm_start(source.global, pseudo_count, clip);
  bank.weights = MixtureWeights::uniform(source.num_classes());
  return bank;
}

}  // namespace ttac
