// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <string>
#include <variant>

#include "ilin/model.hpp"

namespace ilin {

using Model = std::variant<Network, Ensemble>;

inline constexpr int kModelFormatVersion = 1;

/// Supplies values for weight arrays a template leaves out.
/// Arguments: element count, fan-in, fan-out.
using WeightInitializer = std::function<Vector(std::size_t count, std::size_t fan_in, std::size_t fan_out)>;

struct ParseOptions {
    /// When set, "weight" arrays may be omitted and are filled by this callback;
    /// batch-norm statistics default to gamma=1, beta=0, mean=0, var=1.
    WeightInitializer init;
};

std::string model_to_json(const Model& model);
Model model_from_json(const std::string& text, const ParseOptions& options = {});

/// Writes atomically (temporary file, then rename).
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path, const ParseOptions& options = {});
/// Loads and requires kind "network".
Network load_network(const std::filesystem::path& path, const ParseOptions& options = {});

/// Writes `bytes` to `path` via a temporary sibling and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace ilin
