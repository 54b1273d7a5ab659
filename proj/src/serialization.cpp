#include "ttac/serialization.hpp"

#include <fstream>

namespace ttac {

namespace {

constexpr int kModelFormatVersion = 1;
constexpr int kSourceBankFormatVersion = 1;

void require_format(const nlohmann::json& j, const char* format, int version) {
  if (j.value("format", std::string()) != format) {
    throw std::runtime_error(std::string("expected a '") + format + "' document");
  }
  if (j.value("version", -1) != version) {
    throw std::runtime_error(std::string("unsupported ") + format + " version " +
                             std::to_string(j.value("version", -1)));
  }
}

}  // namespace

nlohmann::json matrix_to_json(const Matrix& m) {
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

Matrix matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(data.size()) != rows * cols) {
    throw std::runtime_error("matrix: data length does not match shape");
  }
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = data[static_cast<std::size_t>(i * cols + c)];
  return m;
}

nlohmann::json vector_to_json(const Vector& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

Vector vector_from_json(const nlohmann::json& j) {
  const auto data = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(data.data(), static_cast<Eigen::Index>(data.size()));
}

nlohmann::json gaussian_to_json(const GaussianStats& g) {
  return {{"mean", vector_to_json(g.mean)}, {"cov", matrix_to_json(g.cov)}};
}

GaussianStats gaussian_from_json(const nlohmann::json& j) {
  return {vector_from_json(j.at("mean")), matrix_from_json(j.at("cov"))};
}

nlohmann::json model_to_json(const ModelParams& params) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& layer : params.backbone) {
    layers.push_back({{"weight", matrix_to_json(layer.weight)},
                      {"bias", vector_to_json(layer.bias)}});
  }
  return {{"format", "ttac-model"},
          {"version", kModelFormatVersion},
          {"backbone", std::move(layers)},
          {"classifier", matrix_to_json(params.classifier)}};
}

ModelParams model_from_json(const nlohmann::json& j) {
  require_format(j, "ttac-model", kModelFormatVersion);
  ModelParams params;
  for (const auto& layer : j.at("backbone")) {
    params.backbone.push_back(
        {matrix_from_json(layer.at("weight")), vector_from_json(layer.at("bias"))});
  }
  params.classifier = matrix_from_json(j.at("classifier"));
  params.validate();
  return params;
}

nlohmann::json source_bank_to_json(const SourceBank& bank) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : bank.classes) classes.push_back(gaussian_to_json(c));
  return {{"format", "ttac-source-bank"},
          {"version", kSourceBankFormatVersion},
          {"dim", bank.dim()},
          {"K", bank.num_classes()},
          {"weights", vector_to_json(bank.weights.values())},
          {"classes", std::move(classes)},
          {"global", gaussian_to_json(bank.global)},
          {"provenance", to_string(bank.provenance)}};
}

SourceBank source_bank_from_json(const nlohmann::json& j) {
  require_format(j, "ttac-source-bank", kSourceBankFormatVersion);
  SourceBank bank;
  for (const auto& c : j.at("classes")) bank.classes.push_back(gaussian_from_json(c));
  bank.global = gaussian_from_json(j.at("global"));
  bank.weights = MixtureWeights(vector_from_json(j.at("weights")));
  bank.provenance = provenance_from_string(j.at("provenance").get<std::string>());
  if (j.at("K").get<int>() != bank.num_classes() || j.at("dim").get<int>() != bank.dim()) {
    throw std::runtime_error("source bank: header does not match contents");
  }
  bank.validate();
  return bank;
}

void save_source_bank(const SourceBank& bank, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_source_bank: cannot open " + path.string());
  out << source_bank_to_json(bank).dump(1) << '\n';
}

SourceBank load_source_bank(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_source_bank: cannot open " + path.string());
  return source_bank_from_json(nlohmann::json::parse(in));
}

}  // namespace ttac
