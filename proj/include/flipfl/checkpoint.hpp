#pragma once

// Array-plus-header file format shared by model checkpoints, dataset dumps
// and persisted triggers.
//
//   line 1: "FLIPFL-ARRAY 1"
//   line 2: compact JSON header (must contain "length": number of reals)
//   rest:   `length` IEEE-754 binary64 values, little-endian
//
// Values are copied bit-for-bit, so a write/read cycle is exact.

#include "flipfl/nn.hpp"
#include "flipfl/tensor.hpp"

#include <json.hpp>

#include <filesystem>
#include <iosfwd>

namespace flipfl {

struct ArrayFile {
    nlohmann::json header;
    Vector values;
};

void write_array_file(std::ostream& os, const ArrayFile& file);
ArrayFile read_array_file(std::istream& is);
void save_array_file(const std::filesystem::path& path, const ArrayFile& file);
ArrayFile load_array_file(const std::filesystem::path& path);

nlohmann::json to_json(const nn::LayerSpec& spec);
nn::LayerSpec layer_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const nn::Architecture& arch);
nn::Architecture architecture_from_json(const nlohmann::json& j);

/// Model checkpoint: header records the layer specs, per-layer shapes and the
/// flattening order; the payload is `nn::flatten(model)`.
ArrayFile make_checkpoint(const nn::ModelParams& model, const nn::Architecture& arch,
                          nlohmann::json extra = nlohmann::json::object());
struct Checkpoint {
    nn::Architecture arch;
    nn::ModelParams model;
    nlohmann::json header;
};
Checkpoint parse_checkpoint(const ArrayFile& file);

void save_checkpoint(const std::filesystem::path& path, const nn::ModelParams& model,
                     const nn::Architecture& arch, nlohmann::json extra = nlohmann::json::object());
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Single tensor with its shape in the header.
ArrayFile make_tensor_file(const Tensor& t, nlohmann::json extra = nlohmann::json::object());
Tensor parse_tensor_file(const ArrayFile& file);

}  // namespace flipfl
