// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "ilin/tensor.hpp"

namespace ilin {

enum class ActivationKind { relu, leaky_relu, elu, selu, gelu };

inline constexpr double kSeluAlpha = 1.6732632423543772;
inline constexpr double kSeluScale = 1.0507009873554805;

struct Activation {
    ActivationKind kind = ActivationKind::relu;
    /// Negative slope for leaky_relu, saturation for elu. Unused otherwise.
    double alpha = 0.0;

    friend bool operator==(const Activation&, const Activation&) = default;
};

/// y = weight * x + bias, weight is out x in.
struct Dense {
    DenseMatrix weight;
    std::optional<Vector> bias;

    [[nodiscard]] std::size_t in() const { return weight.cols(); }
    [[nodiscard]] std::size_t out() const { return weight.rows(); }

    friend bool operator==(const Dense&, const Dense&) = default;
};

/// 2-D cross-correlation with symmetric zero padding.
/// Kernels are stored [out_ch][in_ch][kh][kw], flattened in that order.
struct Conv2D {
    std::size_t out_channels = 0;
    std::size_t in_channels = 0;
    std::size_t kernel_h = 0;
    std::size_t kernel_w = 0;
    Vector kernels;
    std::optional<Vector> bias;
    std::size_t stride = 1;
    std::size_t padding = 0;

    [[nodiscard]] std::size_t kernel_index(std::size_t oc, std::size_t ic, std::size_t a, std::size_t b) const {
        return ((oc * in_channels + ic) * kernel_h + a) * kernel_w + b;
    }
    [[nodiscard]] double kernel(std::size_t oc, std::size_t ic, std::size_t a, std::size_t b) const {
        return kernels[kernel_index(oc, ic, a, b)];
    }

    friend bool operator==(const Conv2D&, const Conv2D&) = default;
};

struct MaxPool2D {
    std::size_t k = 2;
    std::size_t stride = 2;
    friend bool operator==(const MaxPool2D&, const MaxPool2D&) = default;
};

struct AvgPool2D {
    std::size_t k = 2;
    std::size_t stride = 2;
    friend bool operator==(const AvgPool2D&, const AvgPool2D&) = default;
};

/// Inference-mode batch normalization with per-channel statistics.
struct BatchNorm {
    Vector gamma, beta, mean, var;
    double eps = 1e-5;

    [[nodiscard]] std::size_t channels() const { return gamma.size(); }
    friend bool operator==(const BatchNorm&, const BatchNorm&) = default;
};

struct Flatten {
    friend bool operator==(const Flatten&, const Flatten&) = default;
};

struct Residual;

using LayerSpec = std::variant<Dense, Conv2D, MaxPool2D, AvgPool2D, BatchNorm, Activation, Flatten, Residual>;

/// inner(x) + x. The inner stack must preserve the shape of x.
struct Residual {
    std::vector<LayerSpec> inner;
    friend bool operator==(const Residual&, const Residual&) = default;
};

struct Network {
    Shape input_shape;
    std::vector<LayerSpec> layers;

    [[nodiscard]] std::size_t input_size() const { return input_shape.size(); }
    [[nodiscard]] std::size_t output_size() const;

    friend bool operator==(const Network&, const Network&) = default;
};

/// Weighted sum of member networks. Shares are used as given.
struct Ensemble {
    std::vector<Network> members;
    Vector shares;

    friend bool operator==(const Ensemble&, const Ensemble&) = default;
};

/// What forward records for one layer.
struct LayerTrace {
    /// Activation layers: the pre-activation input z.
    Vector pre_activation;
    /// MaxPool2D layers: flat input index selected for each output element.
    std::vector<std::size_t> selected;
    /// Residual layers: traces of the inner stack.
    std::vector<LayerTrace> inner;

    friend bool operator==(const LayerTrace&, const LayerTrace&) = default;
};

struct ActivationTrace {
    std::vector<LayerTrace> layers;
    friend bool operator==(const ActivationTrace&, const ActivationTrace&) = default;
};

struct ForwardResult {
    Vector output;
    ActivationTrace trace;
};

std::string layer_type_name(const LayerSpec& layer);

double activate(const Activation& act, double z);
/// dσ/dz, with the relu subgradient at 0 taken as 0.
double activate_derivative(const Activation& act, double z);
/// Standard normal CDF.
double normal_cdf(double z);

/// Output shape of a single layer, or ValidationError.
Shape infer_layer_shape(const LayerSpec& layer, const Shape& in);
/// Output shape after each layer. Errors name the offending layer index.
std::vector<Shape> infer_shapes(const Network& net);
std::vector<Shape> infer_shapes(std::span<const LayerSpec> layers, const Shape& in, const std::string& prefix = "");

/// Checks per-layer invariants (kernel sizes, non-negative variances, ...) and shape flow.
void validate(const Network& net);
void validate(const Ensemble& ens);

/// Applies one layer directly. `trace` may be null.
Vector forward_layer(const LayerSpec& layer, const Shape& in_shape, std::span<const double> x, LayerTrace* trace);

ForwardResult forward(const Network& net, std::span<const double> x);

/// Output of every layer: entry i holds the output of layer i.
std::vector<Vector> forward_layers(const Network& net, std::span<const double> x, ActivationTrace* trace = nullptr);

Vector forward_ensemble(const Ensemble& ens, std::span<const double> x);

}  // namespace ilin
