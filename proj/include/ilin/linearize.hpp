// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "ilin/model.hpp"
#include "ilin/tensor.hpp"

namespace ilin {

/// One layer rewritten as w * x + b for a particular instance.
struct LayerLinear {
    std::variant<DenseMatrix, SparseRowMatrix> w;
    Vector b;

    [[nodiscard]] std::size_t rows() const;
    [[nodiscard]] std::size_t cols() const;
    [[nodiscard]] Vector apply(std::span<const double> x) const;
    [[nodiscard]] DenseMatrix dense() const;
};

/// Per-layer record of the branch each unit took.
struct PatternEntry {
    /// Activation layers: the rescale factors sigma(z)/z.
    Vector lambda;
    /// MaxPool2D layers: selected flat input indices.
    std::vector<std::size_t> selected;
    std::vector<PatternEntry> inner;

    friend bool operator==(const PatternEntry&, const PatternEntry&) = default;
};

struct ActivationPattern {
    std::vector<PatternEntry> layers;

    friend bool operator==(const ActivationPattern&, const ActivationPattern&) = default;
    /// Index of the first top-level layer whose entry differs, if any.
    [[nodiscard]] std::optional<std::size_t> first_difference(const ActivationPattern& other) const;
};

/// F(x) = w * x + b for the instance that produced `pattern`.
struct InstanceLinearization {
    DenseMatrix w;
    Vector b;
    ActivationPattern pattern;

    [[nodiscard]] Vector apply(std::span<const double> x) const;
};

struct RegionProbe {
    Vector x;
    Vector direction;
    double delta = 0.0;
    /// First layer whose pattern differs just past delta; empty when unbounded.
    std::optional<std::size_t> boundary_layer;
    bool unbounded = false;
};

LayerLinear linearize_dense(const Dense& layer);
LayerLinear linearize_conv(const Conv2D& layer, const Shape& in_shape);
LayerLinear linearize_maxpool(const MaxPool2D& layer, const Shape& in_shape, std::span<const std::size_t> selected);
LayerLinear linearize_avgpool(const AvgPool2D& layer, const Shape& in_shape);
LayerLinear linearize_batchnorm(const BatchNorm& layer, const Shape& in_shape);

/// lambda[i] = sigma(z[i]) / z[i], with analytic limits for |z| < 1e-12.
Vector activation_lambda(const Activation& act, std::span<const double> z);
LayerLinear linearize_activation(const Activation& act, std::span<const double> z);

/// (W_skip + I, b_skip) for a residual block, given the inner trace of this instance.
LayerLinear linearize_residual(const Residual& block, const Shape& in_shape, const LayerTrace& trace);

/// Factor for any layer given its input shape and this instance's trace.
LayerLinear linearize_layer(const LayerSpec& layer, const Shape& in_shape, const LayerTrace& trace);

/// Left fold of layers [begin, end) of `net` using the branches recorded in `trace`.
/// Returns (W, b) mapping the input of layer `begin` to the output of layer `end - 1`.
InstanceLinearization linearize_range(const Network& net, const ActivationTrace& trace, std::size_t begin,
                                      std::size_t end);

InstanceLinearization linearize_instance(const Network& net, std::span<const double> x);
InstanceLinearization linearize_ensemble(const Ensemble& ens, std::span<const double> x);

ActivationPattern activation_pattern(const Network& net, const ActivationTrace& trace);
ActivationPattern activation_pattern(const Network& net, std::span<const double> x);

/// True when every activation is relu or leaky_relu (network is piecewise linear).
bool is_piecewise_linear(const Network& net);

/// Central-difference Jacobian, J[i][j] = (F(x+h e_j)_i - F(x-h e_j)_i) / 2h.
DenseMatrix jacobian_fd(const Network& net, std::span<const double> x, double h);

/// Smallest |pre-activation| and max-pool margin (best minus the largest strictly smaller value) over the instance.
/// Finite differences are only trustworthy when both are comfortably positive.
double kink_distance(const Network& net, std::span<const double> x);

struct RegionProbeOptions {
    double t_max = 1e3;
    double resolution = 1e-9;
    int max_iterations = 60;
};

/// Largest step t along the normalized direction that keeps the activation pattern of x.
RegionProbe region_probe(const Network& net, std::span<const double> x, std::span<const double> direction,
                         const RegionProbeOptions& options = {});

}  // namespace ilin
