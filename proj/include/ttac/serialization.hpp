#pragma once

#include "ttac/banks.hpp"
#include "ttac/network.hpp"

#include <json.hpp>

namespace ttac {

nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j);
nlohmann::json vector_to_json(const Vector& v);
Vector vector_from_json(const nlohmann::json& j);

nlohmann::json gaussian_to_json(const GaussianStats& g);
GaussianStats gaussian_from_json(const nlohmann::json& j);

nlohmann::json model_to_json(const ModelParams& params);
ModelParams model_from_json(const nlohmann::json& j);

nlohmann::json source_bank_to_json(const SourceBank& bank);
SourceBank source_bank_from_json(const nlohmann::json& j);

}  // namespace ttac
