#pragma once

#include <string>

#include "rpf/model.hpp"

namespace rpf {

// JSON weight document: a "config" object with the five ModelConfig fields,
// "ffn_dim", and a "params" object of flat row-major arrays. Parameter names
// and shapes are documented in the README.
void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);

}  // namespace rpf
