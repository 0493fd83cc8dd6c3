// SPDX-License-Identifier: Apache-2.0
#include "ilin/attribute.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "ilin/model_io.hpp"

namespace ilin {

namespace {

void check_output_index(std::size_t c, std::size_t n) {
    if (c >= n) throw IndexError("output index " + std::to_string(c) + " out of range for " + std::to_string(n) + " outputs");
}

AttributionMap map_from_row(const InstanceLinearization& lin, std::span<const double> x, std::size_t row) {
    AttributionMap m;
    m.output_index = row;
    m.contributions.resize(x.size());
    double sum = 0.0;
    const auto w = lin.w.row(row);
    for (std::size_t j = 0; j < x.size(); ++j) {
        m.contributions[j] = w[j] * x[j];
        sum += m.contributions[j];
    }
    m.bias_share = lin.b[row];
    m.logit = sum + m.bias_share;
    return m;
}

}  // namespace

AttributionMap attribution(const InstanceLinearization& lin, std::span<const double> x, std::size_t output_index) {
    if (x.size() != lin.w.cols()) throw ShapeError("input length does not match the linearization");
    check_output_index(output_index, lin.w.rows());
    return map_from_row(lin, x, output_index);
}

LayerContributions layer_contributions(const Network& net, std::span<const double> x, std::size_t layer_index,
                                       std::size_t final_class) {
    if (layer_index >= net.layers.size())
        throw IndexError("layer index " + std::to_string(layer_index) + " out of range for " +
                         std::to_string(net.layers.size()) + " layers");
    ActivationTrace trace;
    auto outputs = forward_layers(net, x, &trace);
    check_output_index(final_class, outputs.back().size());
    const InstanceLinearization suffix = linearize_range(net, trace, layer_index + 1, net.layers.size());
    LayerContributions out;
    out.activations = std::move(outputs[layer_index]);
    out.contributions.resize(out.activations.size());
    const auto w = suffix.w.row(final_class);
    for (std::size_t k = 0; k < out.activations.size(); ++k) out.contributions[k] = w[k] * out.activations[k];
    out.suffix_bias = suffix.b[final_class];
    return out;
}

NeuronAttribution neuron_attribution(const Network& net, std::span<const double> x, std::size_t layer_index,
                                     std::size_t neuron_index, std::size_t final_class) {
    const LayerContributions lc = layer_contributions(net, x, layer_index, final_class);
    if (neuron_index >= lc.activations.size())
        throw IndexError("neuron index " + std::to_string(neuron_index) + " out of range for layer width " +
                         std::to_string(lc.activations.size()));
    ActivationTrace trace;
    forward_layers(net, x, &trace);
    const InstanceLinearization prefix = linearize_range(net, trace, 0, layer_index + 1);
    NeuronAttribution n;
    n.layer_index = layer_index;
    n.neuron_index = neuron_index;
    n.map = map_from_row(prefix, x, neuron_index);
    n.activation_value = lc.activations[neuron_index];
    n.downstream_contribution = lc.contributions[neuron_index];
    return n;
}

TopNeurons top_k_neurons(const Network& net, std::span<const double> x, std::size_t layer_index, std::size_t k,
                         std::size_t final_class) {
    if (k == 0) throw ValidationError("k must be at least 1");
    const LayerContributions lc = layer_contributions(net, x, layer_index, final_class);

    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < lc.contributions.size(); ++i) {
        if (lc.contributions[i] > 0.0) pos.push_back(i);
        if (lc.contributions[i] < 0.0) neg.push_back(i);
    }
    const auto& c = lc.contributions;
    std::stable_sort(pos.begin(), pos.end(), [&](std::size_t a, std::size_t b) { return c[a] > c[b]; });
    std::stable_sort(neg.begin(), neg.end(), [&](std::size_t a, std::size_t b) { return c[a] < c[b]; });
    pos.resize(std::min(pos.size(), k));
    neg.resize(std::min(neg.size(), k));

    TopNeurons out;
    if (pos.empty() && neg.empty()) return out;
    ActivationTrace trace;
    forward_layers(net, x, &trace);
    const InstanceLinearization prefix = linearize_range(net, trace, 0, layer_index + 1);
    auto make = [&](std::size_t idx) {
        NeuronAttribution n;
        n.layer_index = layer_index;
        n.neuron_index = idx;
        n.map = map_from_row(prefix, x, idx);
        n.activation_value = lc.activations[idx];
        n.downstream_contribution = lc.contributions[idx];
        return n;
    };
    for (std::size_t i : pos) out.positive.push_back(make(i));
    for (std::size_t i : neg) out.negative.push_back(make(i));
    return out;
}

Vector vanilla_gradient(const Network& net, std::span<const double> x, std::size_t output_index) {
    check_output_index(output_index, net.output_size());
    if (is_piecewise_linear(net)) {
        const InstanceLinearization lin = linearize_instance(net, x);
        const auto row = lin.w.row(output_index);
        return {row.begin(), row.end()};
    }
    // The rescale form is not the derivative for smooth activations.
    const DenseMatrix J = jacobian_fd(net, x, kGradientFdStep);
    const auto row = J.row(output_index);
    return {row.begin(), row.end()};
}

Vector integrated_gradients(const Network& net, std::span<const double> x, std::span<const double> baseline,
                            std::size_t steps, std::size_t output_index) {
    if (steps == 0) throw ValidationError("integrated gradients needs at least one step");
    if (baseline.size() != x.size()) throw ShapeError("baseline length != input length");
    const std::size_t n = x.size();
    Vector sum(n, 0.0), point(n);
    for (std::size_t m = 1; m <= steps; ++m) {
        const double alpha = (static_cast<double>(m) - 0.5) / static_cast<double>(steps);
        for (std::size_t j = 0; j < n; ++j) point[j] = baseline[j] + alpha * (x[j] - baseline[j]);
        const Vector g = vanilla_gradient(net, point, output_index);
        for (std::size_t j = 0; j < n; ++j) sum[j] += g[j];
    }
    Vector ig(n);
    for (std::size_t j = 0; j < n; ++j) ig[j] = (x[j] - baseline[j]) * (sum[j] / static_cast<double>(steps));
    return ig;
}

std::string heatmap_ppm(std::span<const double> values, std::size_t height, std::size_t width) {
    if (values.size() != height * width)
        throw ShapeError("heatmap needs " + std::to_string(height * width) + " values, got " +
                         std::to_string(values.size()));
    const double peak = max_abs(values);
    std::string out = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    const std::size_t header = out.size();
    out.resize(header + 3 * values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        unsigned char r = 255, g = 255, b = 255;
        if (peak > 0.0 && values[i] != 0.0) {
            const auto s = static_cast<unsigned char>(std::lround(255.0 * std::abs(values[i]) / peak));
            g = static_cast<unsigned char>(255 - s);
            if (values[i] > 0.0)
                b = g;
            else
                r = g;
        }
        out[header + 3 * i] = static_cast<char>(r);
        out[header + 3 * i + 1] = static_cast<char>(g);
        out[header + 3 * i + 2] = static_cast<char>(b);
    }
    return out;
}

void render_heatmap(std::span<const double> contributions, const Shape& input_shape,
                    const std::filesystem::path& path) {
    if (contributions.size() != input_shape.size())
        throw ShapeError("map length " + std::to_string(contributions.size()) + " != input " + input_shape.str());
    std::size_t height = 1, width = input_shape.size(), channels = 1;
    if (input_shape.rank() == 2) {
        height = input_shape[0];
        width = input_shape[1];
    } else if (input_shape.rank() >= 3) {
        channels = input_shape[0];
        height = input_shape[1];
        width = input_shape.size() / (channels * height);
    }
    const std::size_t plane = height * width;
    Vector summed(plane, 0.0);
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t i = 0; i < plane; ++i) summed[i] += contributions[c * plane + i];
    write_file_atomic(path, heatmap_ppm(summed, height, width));
}

void render_heatmap(const AttributionMap& map, const Shape& input_shape, const std::filesystem::path& path) {
    render_heatmap(map.contributions, input_shape, path);
}

std::string contributions_csv(std::span<const double> values) {
    std::string out = "index,contribution\n";
    char buf[64];
    for (std::size_t i = 0; i < values.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i, values[i]);
        out += buf;
    }
    return out;
}

}  // namespace ilin
