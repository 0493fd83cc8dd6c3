// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ilin/linearize.hpp"
#include "ilin/model.hpp"

namespace ilin {

/// Per-input contributions w_cj * x_j to one output, plus the bias share b_c.
struct AttributionMap {
    std::size_t output_index = 0;
    Vector contributions;
    double bias_share = 0.0;
    double logit = 0.0;
};

struct NeuronAttribution {
    std::size_t layer_index = 0;
    std::size_t neuron_index = 0;
    /// Attribution of the neuron's activation to the network input.
    AttributionMap map;
    double activation_value = 0.0;
    /// This neuron's share of the chosen final output.
    double downstream_contribution = 0.0;
};

struct TopNeurons {
    /// Largest positive downstream contributions, descending.
    std::vector<NeuronAttribution> positive;
    /// Most negative downstream contributions, ascending.
    std::vector<NeuronAttribution> negative;
};

AttributionMap attribution(const InstanceLinearization& lin, std::span<const double> x, std::size_t output_index);

NeuronAttribution neuron_attribution(const Network& net, std::span<const double> x, std::size_t layer_index,
                                     std::size_t neuron_index, std::size_t final_class);

/// Downstream contribution of every neuron in a layer plus the suffix bias for
/// `final_class`; contributions sum with the bias to the final logit.
struct LayerContributions {
    Vector activations;
    Vector contributions;
    double suffix_bias = 0.0;
};
LayerContributions layer_contributions(const Network& net, std::span<const double> x, std::size_t layer_index,
                                       std::size_t final_class);

/// Top-k neurons of a layer by downstream contribution, split by sign.
/// Neurons with exactly zero contribution are in neither list.
/// Ties go to the smaller flat index.
TopNeurons top_k_neurons(const Network& net, std::span<const double> x, std::size_t layer_index, std::size_t k,
                         std::size_t final_class);

/// Gradient of output c with respect to the input.
Vector vanilla_gradient(const Network& net, std::span<const double> x, std::size_t output_index);

/// Midpoint-rule integrated gradients from `baseline` to `x`.
Vector integrated_gradients(const Network& net, std::span<const double> x, std::span<const double> baseline,
                            std::size_t steps, std::size_t output_index);

inline constexpr std::size_t kDefaultIgSteps = 64;
inline constexpr double kGradientFdStep = 1e-5;

/// Binary PPM (P6) bytes for an H x W diverging red/blue map.
std::string heatmap_ppm(std::span<const double> values, std::size_t height, std::size_t width);

/// Sums channels of a [C,H,W] (or [H,W] / [D]) map down to one plane and writes a PPM.
void render_heatmap(std::span<const double> contributions, const Shape& input_shape,
                    const std::filesystem::path& path);
void render_heatmap(const AttributionMap& map, const Shape& input_shape, const std::filesystem::path& path);

/// "index,contribution" CSV with 17 significant digits.
std::string contributions_csv(std::span<const double> values);

}  // namespace ilin
