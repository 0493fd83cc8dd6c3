// SPDX-License-Identifier: Apache-2.0
#include "ilin/model.hpp"

#include <cmath>

namespace ilin {

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};

std::string label(const std::string& prefix, std::size_t i, const LayerSpec& layer) {
    return "layer " + prefix + std::to_string(i) + " (" + layer_type_name(layer) + ")";
}

std::size_t window_count(std::size_t in, std::size_t pad, std::size_t k, std::size_t stride, const char* what) {
    if (stride == 0) throw ValidationError(std::string(what) + ": stride must be positive");
    if (k == 0) throw ValidationError(std::string(what) + ": window must be positive");
    if (in + 2 * pad < k)
        throw ValidationError(std::string(what) + ": window " + std::to_string(k) + " larger than padded input " +
                              std::to_string(in + 2 * pad));
    return (in + 2 * pad - k) / stride + 1;
}

void check_spatial(const Shape& in, const char* what) {
    if (in.rank() != 3) throw ValidationError(std::string(what) + " needs a [C,H,W] input, got " + in.str());
}

/// channels and per-channel plane size for batch norm, on any rank.
std::pair<std::size_t, std::size_t> channel_split(const Shape& s) {
    return {s[0], s.size() / s[0]};
}

void validate_layer(const LayerSpec& layer) {
    std::visit(overloaded{
                   [](const Dense& d) {
                       if (d.weight.rows() == 0 || d.weight.cols() == 0) throw ValidationError("dense: empty weight");
                       if (d.bias && d.bias->size() != d.weight.rows())
                           throw ValidationError("dense: bias length " + std::to_string(d.bias->size()) +
                                                 " != rows " + std::to_string(d.weight.rows()));
                   },
                   [](const Conv2D& c) {
                       if (!c.out_channels || !c.in_channels || !c.kernel_h || !c.kernel_w)
                           throw ValidationError("conv2d: zero kernel dimension");
                       if (c.stride == 0) throw ValidationError("conv2d: stride must be positive");
                       if (c.kernels.size() != c.out_channels * c.in_channels * c.kernel_h * c.kernel_w)
                           throw ValidationError("conv2d: kernel array length does not match dimensions");
                       if (c.bias && c.bias->size() != c.out_channels)
                           throw ValidationError("conv2d: bias length != out_channels");
                   },
                   [](const BatchNorm& b) {
                       const std::size_t n = b.gamma.size();
                       if (n == 0 || b.beta.size() != n || b.mean.size() != n || b.var.size() != n)
                           throw ValidationError("batchnorm: parameter vectors must share a non-zero length");
                       if (!(b.eps >= 0.0)) throw ValidationError("batchnorm: eps must be non-negative");
                       for (double v : b.var)
                           if (!(v >= 0.0)) throw ValidationError("batchnorm: negative variance");
                   },
                   [](const Activation& a) {
                       if (!std::isfinite(a.alpha)) throw ValidationError("activation: non-finite alpha");
                   },
                   [](const auto&) {},
               },
               layer);
}

}  // namespace

std::string layer_type_name(const LayerSpec& layer) {
    return std::visit(overloaded{
                          [](const Dense&) { return "dense"; },
                          [](const Conv2D&) { return "conv2d"; },
                          [](const MaxPool2D&) { return "maxpool2d"; },
                          [](const AvgPool2D&) { return "avgpool2d"; },
                          [](const BatchNorm&) { return "batchnorm"; },
                          [](const Activation&) { return "activation"; },
                          [](const Flatten&) { return "flatten"; },
                          [](const Residual&) { return "residual"; },
                      },
                      layer);
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

double activate(const Activation& act, double z) {
    switch (act.kind) {
        case ActivationKind::relu: return z > 0.0 ? z : 0.0;
        case ActivationKind::leaky_relu: return z > 0.0 ? z : act.alpha * z;
        case ActivationKind::elu: return z > 0.0 ? z : act.alpha * std::expm1(z);
        case ActivationKind::selu: return kSeluScale * (z > 0.0 ? z : kSeluAlpha * std::expm1(z));
        case ActivationKind::gelu: return z * normal_cdf(z);
    }
    return z;
}

double activate_derivative(const Activation& act, double z) {
    switch (act.kind) {
        case ActivationKind::relu: return z > 0.0 ? 1.0 : 0.0;
        case ActivationKind::leaky_relu: return z > 0.0 ? 1.0 : act.alpha;
        case ActivationKind::elu: return z > 0.0 ? 1.0 : act.alpha * std::exp(z);
        case ActivationKind::selu: return kSeluScale * (z > 0.0 ? 1.0 : kSeluAlpha * std::exp(z));
        case ActivationKind::gelu: {
            const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI);
            return normal_cdf(z) + z * pdf;
        }
    }
    return 1.0;
}

std::size_t Network::output_size() const {
    const auto shapes = infer_shapes(*this);
    return shapes.empty() ? input_shape.size() : shapes.back().size();
}

Shape infer_layer_shape(const LayerSpec& layer, const Shape& in) {
    validate_layer(layer);
    return std::visit(
        overloaded{
            [&](const Dense& d) -> Shape {
                if (in.rank() != 1) throw ValidationError("dense needs a flat input, got " + in.str());
                if (in[0] != d.in())
                    throw ValidationError("dense expects " + std::to_string(d.in()) + " inputs, got " + in.str());
                return Shape{d.out()};
            },
            [&](const Conv2D& c) -> Shape {
                check_spatial(in, "conv2d");
                if (in[0] != c.in_channels)
                    throw ValidationError("conv2d expects " + std::to_string(c.in_channels) + " channels, got " +
                                          in.str());
                return Shape{c.out_channels, window_count(in[1], c.padding, c.kernel_h, c.stride, "conv2d"),
                             window_count(in[2], c.padding, c.kernel_w, c.stride, "conv2d")};
            },
            [&](const MaxPool2D& p) -> Shape {
                check_spatial(in, "maxpool2d");
                return Shape{in[0], window_count(in[1], 0, p.k, p.stride, "maxpool2d"),
                             window_count(in[2], 0, p.k, p.stride, "maxpool2d")};
            },
            [&](const AvgPool2D& p) -> Shape {
                check_spatial(in, "avgpool2d");
                return Shape{in[0], window_count(in[1], 0, p.k, p.stride, "avgpool2d"),
                             window_count(in[2], 0, p.k, p.stride, "avgpool2d")};
            },
            [&](const BatchNorm& b) -> Shape {
                if (in[0] != b.channels())
                    throw ValidationError("batchnorm has " + std::to_string(b.channels()) + " channels, input is " +
                                          in.str());
                return in;
            },
            [&](const Activation&) -> Shape { return in; },
            [&](const Flatten&) -> Shape { return Shape{in.size()}; },
            [&](const Residual& r) -> Shape {
                const auto inner = infer_shapes(r.inner, in, "");
                if (!inner.empty() && inner.back() != in)
                    throw ValidationError("residual inner output " + inner.back().str() + " != input " + in.str());
                return in;
            },
        },
        layer);
}

std::vector<Shape> infer_shapes(std::span<const LayerSpec> layers, const Shape& in, const std::string& prefix) {
    std::vector<Shape> out;
    out.reserve(layers.size());
    Shape cur = in;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        try {
            cur = infer_layer_shape(layers[i], cur);
        } catch (const Error& e) {
            throw ValidationError(label(prefix, i, layers[i]) + ": " + e.what());
        }
        out.push_back(cur);
    }
    return out;
}

std::vector<Shape> infer_shapes(const Network& net) { return infer_shapes(net.layers, net.input_shape); }

void validate(const Network& net) {
    const auto shapes = infer_shapes(net);
    const Shape& last = shapes.empty() ? net.input_shape : shapes.back();
    if (last.rank() != 1) throw ValidationError("network output must be a flat vector, got " + last.str());
}

void validate(const Ensemble& ens) {
    if (ens.members.empty()) throw ValidationError("ensemble has no members");
    if (ens.shares.size() != ens.members.size()) throw ValidationError("ensemble shares length != member count");
    for (double a : ens.shares)
        if (!std::isfinite(a)) throw ValidationError("ensemble share is not finite");
    for (const auto& m : ens.members) validate(m);
    const auto& first = ens.members.front();
    for (const auto& m : ens.members) {
        if (m.input_shape != first.input_shape || m.output_size() != first.output_size())
            throw ValidationError("ensemble members disagree on input/output shape");
    }
}

Vector forward_layer(const LayerSpec& layer, const Shape& in_shape, std::span<const double> x, LayerTrace* trace) {
    if (x.size() != in_shape.size())
        throw ShapeError("input length " + std::to_string(x.size()) + " != " + in_shape.str());
    return std::visit(
        overloaded{
            [&](const Dense& d) {
                Vector y = matvec(d.weight, x);
                if (d.bias)
                    for (std::size_t i = 0; i < y.size(); ++i) y[i] += (*d.bias)[i];
                return y;
            },
            [&](const Conv2D& c) {
                const Shape out_shape = infer_layer_shape(layer, in_shape);
                const std::size_t H = in_shape[1], W = in_shape[2];
                const std::size_t OH = out_shape[1], OW = out_shape[2];
                Vector y(out_shape.size());
                for (std::size_t oc = 0; oc < c.out_channels; ++oc) {
                    for (std::size_t i = 0; i < OH; ++i) {
                        for (std::size_t j = 0; j < OW; ++j) {
                            double acc = 0.0;
                            for (std::size_t ic = 0; ic < c.in_channels; ++ic) {
                                for (std::size_t a = 0; a < c.kernel_h; ++a) {
                                    const auto h = static_cast<std::ptrdiff_t>(i * c.stride + a) -
                                                   static_cast<std::ptrdiff_t>(c.padding);
                                    if (h < 0 || h >= static_cast<std::ptrdiff_t>(H)) continue;
                                    for (std::size_t b = 0; b < c.kernel_w; ++b) {
                                        const auto w = static_cast<std::ptrdiff_t>(j * c.stride + b) -
                                                       static_cast<std::ptrdiff_t>(c.padding);
                                        if (w < 0 || w >= static_cast<std::ptrdiff_t>(W)) continue;
                                        acc += c.kernel(oc, ic, a, b) * x[(ic * H + h) * W + w];
                                    }
                                }
                            }
                            if (c.bias) acc += (*c.bias)[oc];
                            y[(oc * OH + i) * OW + j] = acc;
                        }
                    }
                }
                return y;
            },
            [&](const MaxPool2D& p) {
                const Shape out_shape = infer_layer_shape(layer, in_shape);
                const std::size_t C = in_shape[0], OH = out_shape[1], OW = out_shape[2];
                Vector y(out_shape.size());
                if (trace) trace->selected.assign(out_shape.size(), 0);
                for (std::size_t c = 0; c < C; ++c) {
                    for (std::size_t i = 0; i < OH; ++i) {
                        for (std::size_t j = 0; j < OW; ++j) {
                            std::size_t best = flat_index(c, i * p.stride, j * p.stride, in_shape);
                            for (std::size_t a = 0; a < p.k; ++a) {
                                for (std::size_t b = 0; b < p.k; ++b) {
                                    const std::size_t idx = flat_index(c, i * p.stride + a, j * p.stride + b, in_shape);
                                    // Strict comparison: ties keep the smallest flat index.
                                    if (x[idx] > x[best]) best = idx;
                                }
                            }
                            const std::size_t o = (c * OH + i) * OW + j;
                            y[o] = x[best];
                            if (trace) trace->selected[o] = best;
                        }
                    }
                }
                return y;
            },
            [&](const AvgPool2D& p) {
                const Shape out_shape = infer_layer_shape(layer, in_shape);
                const std::size_t C = in_shape[0], OH = out_shape[1], OW = out_shape[2];
                const double inv = 1.0 / static_cast<double>(p.k * p.k);
                Vector y(out_shape.size());
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t i = 0; i < OH; ++i)
                        for (std::size_t j = 0; j < OW; ++j) {
                            double acc = 0.0;
                            for (std::size_t a = 0; a < p.k; ++a)
                                for (std::size_t b = 0; b < p.k; ++b)
                                    acc += inv * x[flat_index(c, i * p.stride + a, j * p.stride + b, in_shape)];
                            y[(c * OH + i) * OW + j] = acc;
                        }
                return y;
            },
            [&](const BatchNorm& bn) {
                infer_layer_shape(layer, in_shape);
                const auto [channels, plane] = channel_split(in_shape);
                Vector y(x.size());
                for (std::size_t c = 0; c < channels; ++c) {
                    const double sd = std::sqrt(bn.var[c] + bn.eps);
                    if (!(sd > 0.0)) throw NumericError("batchnorm: var + eps must be positive");
                    for (std::size_t k = 0; k < plane; ++k) {
                        const std::size_t i = c * plane + k;
                        y[i] = (x[i] - bn.mean[c]) / sd * bn.gamma[c] + bn.beta[c];
                    }
                }
                return y;
            },
            [&](const Activation& act) {
                Vector y(x.size());
                for (std::size_t i = 0; i < x.size(); ++i) y[i] = activate(act, x[i]);
                if (trace) trace->pre_activation.assign(x.begin(), x.end());
                return y;
            },
            [&](const Flatten&) { return Vector(x.begin(), x.end()); },
            [&](const Residual& r) {
                Vector cur(x.begin(), x.end());
                Shape shape = in_shape;
                if (trace) trace->inner.assign(r.inner.size(), {});
                for (std::size_t i = 0; i < r.inner.size(); ++i) {
                    Shape next = infer_layer_shape(r.inner[i], shape);
                    cur = forward_layer(r.inner[i], shape, cur, trace ? &trace->inner[i] : nullptr);
                    shape = std::move(next);
                }
                if (cur.size() != x.size()) throw ShapeError("residual inner stack changed the shape");
                for (std::size_t i = 0; i < cur.size(); ++i) cur[i] += x[i];
                return cur;
            },
        },
        layer);
}

std::vector<Vector> forward_layers(const Network& net, std::span<const double> x, ActivationTrace* trace) {
    if (x.size() != net.input_size())
        throw ShapeError("input length " + std::to_string(x.size()) + " != " + net.input_shape.str());
    for (double v : x)
        if (!std::isfinite(v)) throw NumericError("input contains a non-finite value");
    std::vector<Vector> outputs;
    outputs.reserve(net.layers.size());
    if (trace) trace->layers.assign(net.layers.size(), {});
    Shape shape = net.input_shape;
    std::span<const double> cur = x;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        Shape next;
        try {
            next = infer_layer_shape(net.layers[i], shape);
        } catch (const Error& e) {
            throw ValidationError(label("", i, net.layers[i]) + ": " + e.what());
        }
        outputs.push_back(forward_layer(net.layers[i], shape, cur, trace ? &trace->layers[i] : nullptr));
        for (double v : outputs.back())
            if (!std::isfinite(v)) throw NumericError(label("", i, net.layers[i]) + ": non-finite output");
        cur = outputs.back();
        shape = std::move(next);
    }
    return outputs;
}

ForwardResult forward(const Network& net, std::span<const double> x) {
    ForwardResult r;
    auto outputs = forward_layers(net, x, &r.trace);
    r.output = outputs.empty() ? Vector(x.begin(), x.end()) : std::move(outputs.back());
    return r;
}

Vector forward_ensemble(const Ensemble& ens, std::span<const double> x) {
    if (ens.members.empty()) throw ValidationError("ensemble has no members");
    if (ens.shares.size() != ens.members.size()) throw ValidationError("ensemble shares length != member count");
    Vector out;
    for (std::size_t m = 0; m < ens.members.size(); ++m) {
        const Vector y = forward(ens.members[m], x).output;
        if (m == 0) out.assign(y.size(), 0.0);
        if (y.size() != out.size()) throw ShapeError("ensemble members disagree on output size");
        for (std::size_t i = 0; i < y.size(); ++i) out[i] += ens.shares[m] * y[i];
    }
    return out;
}

}  // namespace ilin
