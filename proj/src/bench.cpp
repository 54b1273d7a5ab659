#include "ttac/bench.hpp"

#include "ttac/serialization.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace ttac {

namespace {

enum class Stream_ : std::uint64_t { kMeans = 1, kTrain, kVal, kTarget, kCorruption, kNoise, kOrder };

std::mt19937_64 substream(std::uint64_t seed, Stream_ tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag)};
  return std::mt19937_64(seq);
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

Dataset sample_blobs(const Matrix& means, const std::vector<int>& labels, double stddev,
                     std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  Dataset out;
  out.labels = labels;
  out.inputs.resize(static_cast<Eigen::Index>(labels.size()), means.cols());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (Eigen::Index j = 0; j < means.cols(); ++j) {
      out.inputs(static_cast<Eigen::Index>(i), j) = means(labels[i], j) + normal(rng);
    }
  }
  return out;
}

std::vector<int> balanced_labels(int num_classes, int total) {
  std::vector<int> labels(static_cast<std::size_t>(total));
  for (int i = 0; i < total; ++i) labels[static_cast<std::size_t>(i)] = i % num_classes;
  return labels;
}

}  // namespace

// ---------------------------------------------------------------------------
// Datasets

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_dataset: cannot open " + path.string());
  out << "label";
  for (Eigen::Index j = 0; j < data.inputs.cols(); ++j) out << ",x" << j;
  out << '\n';
  out << std::setprecision(17);
  for (Eigen::Index i = 0; i < data.inputs.rows(); ++i) {
    out << (data.labels.empty() ? -1 : data.labels[static_cast<std::size_t>(i)]);
    for (Eigen::Index j = 0; j < data.inputs.cols(); ++j) out << ',' << data.inputs(i, j);
    out << '\n';
  }
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_dataset: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("load_dataset: empty file");
  const auto cols = std::count(line.begin(), line.end(), ',');
  if (cols < 1 || line.rfind("label", 0) != 0) {
    throw std::runtime_error("load_dataset: expected header 'label,x0,...'");
  }
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  bool any_label = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    const int label = std::stoi(cell);
    any_label = any_label || label >= 0;
    labels.push_back(label);
    std::vector<double> row;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    if (static_cast<long>(row.size()) != cols) {
      throw std::runtime_error("load_dataset: ragged row " + std::to_string(rows.size() + 1));
    }
    rows.push_back(std::move(row));
  }
  Dataset data;
  data.inputs.resize(static_cast<Eigen::Index>(rows.size()), cols);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (Eigen::Index j = 0; j < cols; ++j) data.inputs(static_cast<Eigen::Index>(i), j) = rows[i][static_cast<std::size_t>(j)];
  if (any_label) data.labels = std::move(labels);
  return data;
}

// ---------------------------------------------------------------------------
// Domain generation

void DomainSpec::validate() const {
  if (num_classes < 2) throw ContractError("DomainSpec: need at least two classes");
  if (input_dim < 1) throw ContractError("DomainSpec: input_dim must be positive");
  if (severity < 0 || severity > 5) throw ContractError("DomainSpec: severity must lie in 0..5");
  if (train_per_class < 2 || val_per_class < 1 || target_samples < 1) {
    throw ContractError("DomainSpec: sample counts too small");
  }
  if (class_std <= 0.0 || scale_range < 0.0 || scale_range >= 1.0 || noise_sigma < 0.0) {
    throw ContractError("DomainSpec: invalid generator or corruption magnitudes");
  }
}

nlohmann::json spec_to_json(const DomainSpec& s) {
  return {{"input_dim", s.input_dim},       {"num_classes", s.num_classes},
          {"train_per_class", s.train_per_class}, {"val_per_class", s.val_per_class},
          {"target_samples", s.target_samples}, {"class_radius", s.class_radius},
          {"class_std", s.class_std},       {"severity", s.severity},
          {"shift", s.shift},               {"scale_range", s.scale_range},
          {"noise_sigma", s.noise_sigma},   {"rotation_deg", s.rotation_deg},
          {"seed", s.seed}};
}

DomainSpec spec_from_json(const nlohmann::json& j, DomainSpec s) {
  const nlohmann::json known = spec_to_json(s);
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw std::invalid_argument("spec: unknown key '" + key + "'");
  }
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("input_dim", s.input_dim);
  get("num_classes", s.num_classes);
  get("train_per_class", s.train_per_class);
  get("val_per_class", s.val_per_class);
  get("target_samples", s.target_samples);
  get("class_radius", s.class_radius);
  get("class_std", s.class_std);
  get("severity", s.severity);
  get("shift", s.shift);
  get("scale_range", s.scale_range);
  get("noise_sigma", s.noise_sigma);
  get("rotation_deg", s.rotation_deg);
  get("seed", s.seed);
  s.validate();
  return s;
}

Matrix corrupt(const Matrix& clean, const DomainSpec& spec) {
  const double f = spec.severity / 5.0;
  const Eigen::Index d = clean.cols();
  std::mt19937_64 rng = substream(spec.seed, Stream_::kCorruption);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  // Corruption parameters are drawn before scaling by severity so that the
  // same seed gives the same directions at every level.
  Vector gains(d);
  for (Eigen::Index j = 0; j < d; ++j) gains(j) = 1.0 + f * spec.scale_range * unit(rng);
  Vector direction(d);
  for (Eigen::Index j = 0; j < d; ++j) direction(j) = normal(rng);
  direction.normalize();
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(d));
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<double> signs;
  for (Eigen::Index p = 0; p + 1 < d; p += 2) signs.push_back(unit(rng) < 0.0 ? -1.0 : 1.0);

  Matrix rotation = Matrix::Identity(d, d);
  const double angle = f * spec.rotation_deg * M_PI / 180.0;
  for (std::size_t p = 0; p < signs.size(); ++p) {
    const Eigen::Index a = perm[2 * p];
    const Eigen::Index b = perm[2 * p + 1];
    const double c = std::cos(angle);
    const double s = signs[p] * std::sin(angle);
    rotation(a, a) = c;
    rotation(a, b) = -s;
    rotation(b, a) = s;
    rotation(b, b) = c;
  }

  Matrix out = (clean * gains.asDiagonal()) * rotation.transpose();
  out.rowwise() += (f * spec.shift * direction).transpose();
  if (spec.noise_sigma > 0.0 && f > 0.0) {
    std::mt19937_64 noise_rng = substream(spec.seed, Stream_::kNoise);
    std::normal_distribution<double> noise(0.0, f * spec.noise_sigma);
    for (Eigen::Index i = 0; i < out.rows(); ++i)
      for (Eigen::Index j = 0; j < d; ++j) out(i, j) += noise(noise_rng);
  }
  return out;
}

DomainData generate_domain(const DomainSpec& spec) {
  spec.validate();
  std::mt19937_64 mean_rng = substream(spec.seed, Stream_::kMeans);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix means(spec.num_classes, spec.input_dim);
  for (int k = 0; k < spec.num_classes; ++k) {
    Vector v(spec.input_dim);
    for (int j = 0; j < spec.input_dim; ++j) v(j) = normal(mean_rng);
    means.row(k) = spec.class_radius * v.normalized().transpose();
  }

  DomainData out;
  std::mt19937_64 train_rng = substream(spec.seed, Stream_::kTrain);
  out.source_train = sample_blobs(means, balanced_labels(spec.num_classes, spec.num_classes * spec.train_per_class),
                                  spec.class_std, train_rng);
  std::mt19937_64 val_rng = substream(spec.seed, Stream_::kVal);
  out.source_val = sample_blobs(means, balanced_labels(spec.num_classes, spec.num_classes * spec.val_per_class),
                                spec.class_std, val_rng);

  std::mt19937_64 target_rng = substream(spec.seed, Stream_::kTarget);
  std::vector<int> labels = balanced_labels(spec.num_classes, spec.target_samples);
  std::mt19937_64 order_rng = substream(spec.seed, Stream_::kOrder);
  std::shuffle(labels.begin(), labels.end(), order_rng);
  Dataset clean = sample_blobs(means, labels, spec.class_std, target_rng);
  out.target.inputs = corrupt(clean.inputs, spec);
  out.target.labels = std::move(clean.labels);
  return out;
}

// ---------------------------------------------------------------------------
// Source training

Matrix extract_features(const ModelParams& model, const Matrix& inputs) {
  return forward(model, inputs).features();
}

double accuracy(const ModelParams& model, const Dataset& data) {
  const std::vector<int> pred = argmax_rows(forward(model, data.inputs).logits);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[i];
  return pred.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(pred.size());
}

TrainedSource train_source(const TrainConfig& config, const Dataset& train, const Dataset& val) {
  if (train.labels.size() != static_cast<std::size_t>(train.size()) || train.size() == 0) {
    throw ContractError("train_source: training set must be labelled");
  }
  Architecture arch = config.arch;
  arch.input_dim = static_cast<int>(train.inputs.cols());
  arch.num_classes = *std::max_element(train.labels.begin(), train.labels.end()) + 1;

  TrainedSource out{ModelParams::init(arch, config.seed), {}, 0.0};
  OptimizerState opt =
      OptimizerState::for_params(out.model, config.lr, config.momentum, config.weight_decay);
  std::mt19937_64 rng(config.seed ^ 0x5eedULL);
  std::vector<std::size_t> order(static_cast<std::size_t>(train.size()));
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t count =
          std::min(order.size() - start, static_cast<std::size_t>(config.batch_size));
      Matrix x(static_cast<Eigen::Index>(count), train.inputs.cols());
      std::vector<int> y(count);
      for (std::size_t i = 0; i < count; ++i) {
        x.row(static_cast<Eigen::Index>(i)) = train.inputs.row(static_cast<Eigen::Index>(order[start + i]));
        y[i] = train.labels[order[start + i]];
      }
      const ForwardTrace trace = forward(out.model, x);
      const LogitLoss loss = cross_entropy_loss(trace, y);
      sgd_step(out.model, backward(out.model, trace, Matrix(), loss.d_logits), opt);
    }
  }
  out.val_accuracy = accuracy(out.model, val);
  if (out.val_accuracy < config.min_val_accuracy) {
    throw std::runtime_error("train_source: validation accuracy " +
                             format_double(out.val_accuracy) + " below " +
                             format_double(config.min_val_accuracy));
  }
  out.bank = estimate_source_stats(extract_features(out.model, train.inputs), train.labels,
                                   arch.num_classes);
  return out;
}

SourceBank infer_source_bank(const ModelParams& model, const InferConfig& config) {
  const InferResult result = infer_source_means(model.classifier, config);
  const double gamma = choose_gamma_or(result.means, 1e-6);
  return build_inferred_bank(result.means, gamma);
}

PreparedDomain prepare_domain(const DomainSpec& spec, const TrainConfig& train) {
  PreparedDomain out;
  out.data = generate_domain(spec);
  TrainConfig tc = train;
  tc.seed = spec.seed;
  out.source = train_source(tc, out.data.source_train, out.data.source_val);
  InferConfig ic;
  ic.seed = spec.seed;
  out.inferred = infer_source_bank(out.source.model, ic);
  return out;
}

StreamReport run_on_domain(Method method, const ProtocolConfig& config,
                           const PreparedDomain& domain) {
  const Stream stream{domain.data.target.inputs, domain.data.target.labels};
  std::optional<SourceBank> bank;
  if (method == Method::kTtacPlusPlus) {
    bank = is_source_free(config.protocol) ? domain.inferred : domain.source.bank;
  }
  return run_method(method, config, bank, domain.source.model, stream);
}

ProtocolConfig default_protocol_config() { return ProtocolConfig{}; }

// ---------------------------------------------------------------------------
// Grids

std::string GridCell::hash() const {
  nlohmann::json j = {{"method", to_string(method)},
                      {"config", config_to_json(config)},
                      {"spec", spec_to_json(spec)},
                      {"seeds", seeds}};
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
  return buf;
}

ExperimentGrid grid_from_json(const nlohmann::json& j) {
  ExperimentGrid grid;
  if (j.contains("train")) {
    const auto& t = j.at("train");
    grid.train.epochs = t.value("epochs", grid.train.epochs);
    grid.train.lr = t.value("lr", grid.train.lr);
    grid.train.momentum = t.value("momentum", grid.train.momentum);
    grid.train.weight_decay = t.value("weight_decay", grid.train.weight_decay);
    grid.train.batch_size = t.value("batch_size", grid.train.batch_size);
    if (t.contains("hidden")) grid.train.arch.hidden = t.at("hidden").get<std::vector<int>>();
    grid.train.arch.feature_dim = t.value("feature_dim", grid.train.arch.feature_dim);
  }
  for (const auto& c : j.at("cells")) {
    GridCell cell;
    cell.method = method_from_string(c.at("method").get<std::string>());
    cell.config = config_from_json(c.value("config", nlohmann::json::object()),
                                   default_protocol_config());
    cell.spec = spec_from_json(c.value("spec", nlohmann::json::object()));
    cell.seeds = c.value("seeds", std::vector<std::uint64_t>{0});
    if (cell.seeds.empty()) throw std::invalid_argument("grid: cell without seeds");
    cell.name = c.value("name", to_string(cell.method) + "/" + to_string(cell.config.protocol) +
                                    "/s" + std::to_string(cell.spec.severity));
    grid.cells.push_back(std::move(cell));
  }
  return grid;
}

ExperimentGrid load_grid(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open grid " + path.string());
  return grid_from_json(nlohmann::json::parse(in));
}

double median(std::vector<double> values) {
  if (values.empty()) return std::nan("");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double stddev(const std::vector<double>& values) {
  if (values.size() < 2) return 0.0;
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / values.size();
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(values.size() - 1));
}

std::vector<GridRow> run_grid(const ExperimentGrid& grid, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir / "curves");
  std::map<std::string, PreparedDomain> cache;
  std::vector<GridRow> rows;

  for (const GridCell& cell : grid.cells) {
    GridRow row;
    row.name = cell.name;
    row.hash = cell.hash();
    row.method = to_string(cell.method);
    row.protocol = to_string(cell.config.protocol);
    row.severity = cell.spec.severity;
    try {
      double accept = 0.0;
      for (std::uint64_t seed : cell.seeds) {
        DomainSpec spec = cell.spec;
        spec.seed = seed;
        const std::string key = spec_to_json(spec).dump();
        auto it = cache.find(key);
        if (it == cache.end()) it = cache.emplace(key, prepare_domain(spec, grid.train)).first;
        ProtocolConfig config = cell.config;
        config.seed = seed;
        const StreamReport report = run_on_domain(cell.method, config, it->second);
        row.errors.push_back(100.0 * report.final_error());
        accept += report.mean_accept_rate();

        const std::string curve = "curves/" + row.hash + "_seed" + std::to_string(seed) + ".csv";
        std::ofstream out(out_dir / curve);
        out << "arrival,cumulative_error\n" << std::setprecision(17);
        for (std::size_t i = 0; i < report.cumulative_error.size(); ++i) {
          out << i << ',' << report.cumulative_error[i] << '\n';
        }
        row.curves.push_back(curve);
      }
      row.mean_error = std::accumulate(row.errors.begin(), row.errors.end(), 0.0) /
                       static_cast<double>(row.errors.size());
      row.std_error = stddev(row.errors);
      row.mean_accept = accept / static_cast<double>(cell.seeds.size());
    } catch (const std::exception& e) {
      row.failure = e.what();
      std::cerr << "cell " << cell.name << " failed: " << e.what() << '\n';
    }
    rows.push_back(std::move(row));
  }

  {
    std::ofstream csv(out_dir / "results.csv");
    csv << "name,hash,method,protocol,severity,seeds,mean_error,std_error,mean_accept,errors,failure\n";
    for (const auto& r : rows) {
      std::string errs;
      for (std::size_t i = 0; i < r.errors.size(); ++i) {
        errs += (i ? ";" : "") + format_double(r.errors[i]);
      }
      std::string failure = r.failure;
      std::replace(failure.begin(), failure.end(), ',', ';');
      csv << r.name << ',' << r.hash << ',' << r.method << ',' << r.protocol << ',' << r.severity
          << ',' << r.errors.size() << ',' << format_double(r.mean_error) << ','
          << format_double(r.std_error) << ',' << format_double(r.mean_accept) << ',' << errs
          << ',' << failure << '\n';
    }
  }
  nlohmann::json results = nlohmann::json::array();
  for (const auto& r : rows) {
    results.push_back({{"name", r.name},
                       {"hash", r.hash},
                       {"method", r.method},
                       {"protocol", r.protocol},
                       {"severity", r.severity},
                       {"errors", r.errors},
                       {"mean_error", r.mean_error},
                       {"std_error", r.std_error},
                       {"mean_accept", r.mean_accept},
                       {"curves", r.curves},
                       {"failure", r.failure}});
  }
  std::ofstream(out_dir / "results.json") << nlohmann::json{{"rows", results}}.dump(1) << '\n';
  return rows;
}

void write_report(const std::filesystem::path& dir) {
  std::ifstream in(dir / "results.json");
  if (!in) throw std::runtime_error("write_report: no results.json in " + dir.string());
  const nlohmann::json results = nlohmann::json::parse(in);

  std::ofstream summary(dir / "summary.csv");
  summary << "name,method,protocol,severity,mean_error,std_error,median_error\n";
  std::vector<std::string> names;
  std::vector<std::vector<double>> curves;
  for (const auto& r : results.at("rows")) {
    if (!r.at("failure").get<std::string>().empty()) continue;
    const auto errors = r.at("errors").get<std::vector<double>>();
    summary << r.at("name").get<std::string>() << ',' << r.at("method").get<std::string>() << ','
            << r.at("protocol").get<std::string>() << ',' << r.at("severity").get<int>() << ','
            << format_double(r.at("mean_error").get<double>()) << ','
            << format_double(r.at("std_error").get<double>()) << ','
            << format_double(median(errors)) << '\n';

    std::vector<double> mean_curve;
    std::size_t n_seeds = 0;
    for (const auto& path : r.at("curves")) {
      const Dataset curve = [&] {
        std::ifstream cin(dir / path.get<std::string>());
        std::string line;
        std::getline(cin, line);
        Dataset d;
        std::vector<double> values;
        while (std::getline(cin, line)) {
          const auto comma = line.find(',');
          values.push_back(std::stod(line.substr(comma + 1)));
        }
        d.inputs = Eigen::Map<Matrix>(values.data(), static_cast<Eigen::Index>(values.size()), 1);
        return d;
      }();
      const std::size_t len = static_cast<std::size_t>(curve.inputs.rows());
      if (n_seeds == 0) {
        mean_curve.assign(len, 0.0);
      } else {
        mean_curve.resize(std::min(mean_curve.size(), len));
      }
      for (std::size_t i = 0; i < mean_curve.size(); ++i) mean_curve[i] += curve.inputs(static_cast<Eigen::Index>(i), 0);
      ++n_seeds;
    }
    for (double& v : mean_curve) v /= static_cast<double>(std::max<std::size_t>(n_seeds, 1));
    names.push_back(r.at("name").get<std::string>());
    curves.push_back(std::move(mean_curve));
  }

  std::ofstream dat(dir / "cumulative_error.dat");
  dat << "# arrival";
  for (const auto& n : names) dat << ' ' << '"' << n << '"';
  dat << '\n';
  std::size_t len = curves.empty() ? 0 : curves.front().size();
  for (const auto& c : curves) len = std::min(len, c.size());
  for (std::size_t i = 0; i < len; ++i) {
    dat << i;
    for (const auto& c : curves) dat << ' ' << format_double(100.0 * c[i]);
    dat << '\n';
  }
}

}  // namespace ttac
