#pragma once

#include "ttac/core_math.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ttac {

enum class Provenance { kEstimated, kInferred };

std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

/// Per-class source anchors plus the global source Gaussian.
struct SourceBank {
  std::vector<GaussianStats> classes;
  GaussianStats global;
  MixtureWeights weights;
  Provenance provenance = Provenance::kEstimated;

  int num_classes() const noexcept { return static_cast<int>(classes.size()); }
  int dim() const noexcept { return global.dim(); }
  void validate() const;
};

/// Streaming per-class target clusters plus the global target Gaussian.
struct TargetBank {
  std::vector<RunningStats> classes;
  RunningStats global;
  MixtureWeights weights;

  /// Zero-initialized bank (count 0, mean 0, cov 0).
  static TargetBank empty(int num_classes, int dim, std::int64_t clip_k, std::int64_t clip);
  /// Bank initialized at the source anchors. Clusters carry `pseudo_count_k`
  /// virtual samples and the global Gaussian `pseudo_count`, so early batches
  /// do not overwrite the prior outright.
  static TargetBank warm_start(const SourceBank& source, std::int64_t clip_k, std::int64_t clip,
                               std::int64_t pseudo_count_k, std::int64_t pseudo_count);

  int num_classes() const noexcept { return static_cast<int>(classes.size()); }
  int dim() const noexcept { return global.dim(); }
};

void save_source_bank(const SourceBank& bank, const std::filesystem::path& path);
SourceBank load_source_bank(const std::filesystem::path& path);

}  // namespace ttac
