#pragma once

#include "ttac/banks.hpp"
#include "ttac/engine.hpp"
#include "ttac/network.hpp"
#include "ttac/source_model.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace ttac {

/// Labelled samples, one row per sample.
struct Dataset {
  Matrix inputs;
  std::vector<int> labels;

  Eigen::Index size() const noexcept { return inputs.rows(); }
};

/// CSV with header `label,x0,...`; label -1 marks an unlabelled sample.
void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

/// Synthetic source/target domain. Classes are isotropic Gaussian blobs with
/// means on random directions; the target applies a seeded corruption whose
/// magnitudes scale linearly with severity (0 = identity, 5 = full).
struct DomainSpec {
  int input_dim = 16;
  int num_classes = 8;
  int train_per_class = 500;
  int val_per_class = 100;
  int target_samples = 2000;
  double class_radius = 4.0;
  double class_std = 1.0;

  int severity = 3;
  // Magnitudes at severity 5.
  double shift = 5.0;          // norm of a translation along a random direction
  double scale_range = 0.6;    // per-coordinate gains drawn from [1 - r, 1 + r]
  double noise_sigma = 0.8;    // additive isotropic noise
  double rotation_deg = 45.0;  // rotation angle in random coordinate planes

  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json spec_to_json(const DomainSpec& spec);
DomainSpec spec_from_json(const nlohmann::json& j, DomainSpec base = {});

struct DomainData {
  Dataset source_train;
  Dataset source_val;
  Dataset target;  // already in (seeded, shuffled) arrival order
};

DomainData generate_domain(const DomainSpec& spec);

/// Applies the spec's corruption to clean inputs (no shuffling).
Matrix corrupt(const Matrix& clean, const DomainSpec& spec);

struct TrainConfig {
  Architecture arch;  // input_dim / num_classes are taken from the data
  int epochs = 30;
  double lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int batch_size = 64;
  double min_val_accuracy = 0.8;
  std::uint64_t seed = 0;
};

struct TrainedSource {
  ModelParams model;
  SourceBank bank;
  double val_accuracy = 0.0;
};

/// Features of `inputs` under `model` (rectified backbone output).
Matrix extract_features(const ModelParams& model, const Matrix& inputs);
double accuracy(const ModelParams& model, const Dataset& data);

/// Cross-entropy SGD on the source set, then source statistics of the
/// final features. Throws std::runtime_error below `min_val_accuracy`.
TrainedSource train_source(const TrainConfig& config, const Dataset& train, const Dataset& val);

/// Classifier-only source bank: inferred means, gamma I covariances.
SourceBank infer_source_bank(const ModelParams& model, const InferConfig& config = {});

/// Everything a method needs for one (spec, seed) benchmark instance.
struct PreparedDomain {
  DomainData data;
  TrainedSource source;
  SourceBank inferred;
};

PreparedDomain prepare_domain(const DomainSpec& spec, const TrainConfig& train);

/// Runs a method on a prepared domain; the source bank is chosen by the
/// protocol (inferred for SF, estimated for SL).
StreamReport run_on_domain(Method method, const ProtocolConfig& config,
                           const PreparedDomain& domain);

/// Benchmark defaults for the desk-scale synthetic domain.
ProtocolConfig default_protocol_config();

struct GridCell {
  std::string name;
  Method method = Method::kTtacPlusPlus;
  ProtocolConfig config;
  DomainSpec spec;
  std::vector<std::uint64_t> seeds;

  std::string hash() const;
};

struct ExperimentGrid {
  std::vector<GridCell> cells;
  TrainConfig train;
};

ExperimentGrid grid_from_json(const nlohmann::json& j);
ExperimentGrid load_grid(const std::filesystem::path& path);

struct GridRow {
  std::string name;
  std::string hash;
  std::string method;
  std::string protocol;
  int severity = 0;
  std::vector<double> errors;  // per seed, percent
  double mean_error = 0.0;
  double std_error = 0.0;
  double mean_accept = 0.0;
  std::vector<std::string> curves;
  std::string failure;  // empty on success
};

/// Runs every cell; failures are recorded per row and the grid continues.
/// Writes results.csv, results.json and curves/ under `out_dir`.
std::vector<GridRow> run_grid(const ExperimentGrid& grid, const std::filesystem::path& out_dir);

/// Reads results.json from `dir`, writes summary.csv and cumulative_error.dat
/// (gnuplot columns: arrival, then the seed-mean curve of each cell).
void write_report(const std::filesystem::path& dir);

double median(std::vector<double> values);
double stddev(const std::vector<double>& values);

}  // namespace ttac
