// SPDX-License-Identifier: Apache-2.0
#include "ilin/linearize.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ilin {

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};

constexpr double kLambdaLimitThreshold = 1e-12;

/// Streaming (W_acc, b_acc). An empty `w` stands for the identity.
class Fold {
public:
    explicit Fold(std::size_t in_dim) : in_dim_(in_dim), b_(in_dim, 0.0) {}

    void push(const LayerLinear& f) {
        if (f.cols() != b_.size())
            throw ShapeError("layer factor expects " + std::to_string(f.cols()) + " inputs, running map has " +
                             std::to_string(b_.size()));
        b_ = f.apply(b_);
        if (w_) {
            w_ = std::visit([&](const auto& m) { return compose(m, *w_); }, f.w);
        } else if (leading_) {
            // Dense * sparse costs rows * nnz; densifying first would cost rows * cols^2.
            if (const auto* d = std::get_if<DenseMatrix>(&f.w))
                w_ = compose(*d, *leading_);
            else
                w_ = compose(std::get<SparseRowMatrix>(f.w), leading_->to_dense());
            leading_.reset();
        } else if (const auto* s = std::get_if<SparseRowMatrix>(&f.w)) {
            leading_ = *s;
        } else {
            w_ = std::get<DenseMatrix>(f.w);
        }
    }

    [[nodiscard]] DenseMatrix take_w() && {
        if (w_) return std::move(*w_);
        return leading_ ? leading_->to_dense() : DenseMatrix::identity(in_dim_);
    }
    [[nodiscard]] Vector take_b() && { return std::move(b_); }

private:
    std::size_t in_dim_;
    std::optional<DenseMatrix> w_;
    /// First factor while it is still the only one and sparse.
    std::optional<SparseRowMatrix> leading_;
    Vector b_;
};

Shape input_shape_of(const Network& net, const std::vector<Shape>& shapes, std::size_t i) {
    return i == 0 ? net.input_shape : shapes[i - 1];
}

PatternEntry pattern_entry(const LayerSpec& layer, const LayerTrace& trace) {
    PatternEntry e;
    std::visit(overloaded{
                   [&](const Activation& a) { e.lambda = activation_lambda(a, trace.pre_activation); },
                   [&](const MaxPool2D&) { e.selected = trace.selected; },
                   [&](const Residual& r) {
                       if (trace.inner.size() != r.inner.size()) throw TraceError("residual trace length mismatch");
                       for (std::size_t i = 0; i < r.inner.size(); ++i)
                           e.inner.push_back(pattern_entry(r.inner[i], trace.inner[i]));
                   },
                   [](const auto&) {},
               },
               layer);
    return e;
}

bool layers_piecewise_linear(const std::vector<LayerSpec>& layers) {
    for (const auto& l : layers) {
        if (const auto* a = std::get_if<Activation>(&l)) {
            if (a->kind != ActivationKind::relu && a->kind != ActivationKind::leaky_relu) return false;
        } else if (const auto* r = std::get_if<Residual>(&l)) {
            if (!layers_piecewise_linear(r->inner)) return false;
        }
    }
    return true;
}

/// Smallest kink distance over a stack of layers evaluated at x.
double stack_kink_distance(const std::vector<LayerSpec>& layers, Shape shape, Vector x) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& layer : layers) {
        const Shape next = infer_layer_shape(layer, shape);
        if (std::holds_alternative<Activation>(layer)) {
            for (double z : x) best = std::min(best, std::abs(z));
        } else if (const auto* p = std::get_if<MaxPool2D>(&layer)) {
            for (std::size_t c = 0; c < shape[0]; ++c)
                for (std::size_t i = 0; i < next[1]; ++i)
                    for (std::size_t j = 0; j < next[2]; ++j) {
                        double top = -std::numeric_limits<double>::infinity(), second = top;
                        for (std::size_t a = 0; a < p->k; ++a)
                            for (std::size_t b = 0; b < p->k; ++b) {
                                const double v = x[flat_index(c, i * p->stride + a, j * p->stride + b, shape)];
                                if (v > top) {
                                    second = top;
                                    top = v;
                                } else if (v > second && v < top) {
                                    second = v;
                                }
                            }
                        // Exact ties come from upstream saturation, which the activation term already covers.
                        if (second > -std::numeric_limits<double>::infinity()) best = std::min(best, top - second);
                    }
        } else if (const auto* r = std::get_if<Residual>(&layer)) {
            best = std::min(best, stack_kink_distance(r->inner, shape, x));
        }
        x = forward_layer(layer, shape, x, nullptr);
        shape = next;
    }
    return best;
}

}  // namespace

// ---------------------------------------------------------------------------
// LayerLinear / InstanceLinearization

std::size_t LayerLinear::rows() const {
    return std::visit([](const auto& m) { return m.rows(); }, w);
}

std::size_t LayerLinear::cols() const {
    return std::visit([](const auto& m) { return m.cols(); }, w);
}

Vector LayerLinear::apply(std::span<const double> x) const {
    Vector y = std::visit([&](const auto& m) { return matvec(m, x); }, w);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i];
    return y;
}

DenseMatrix LayerLinear::dense() const {
    return std::visit(overloaded{
                          [](const DenseMatrix& m) { return m; },
                          [](const SparseRowMatrix& m) { return m.to_dense(); },
                      },
                      w);
}

Vector InstanceLinearization::apply(std::span<const double> x) const {
    Vector y = matvec(w, x);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i];
    return y;
}

std::optional<std::size_t> ActivationPattern::first_difference(const ActivationPattern& other) const {
    const std::size_t n = std::min(layers.size(), other.layers.size());
    for (std::size_t i = 0; i < n; ++i)
        if (!(layers[i] == other.layers[i])) return i;
    if (layers.size() != other.layers.size()) return n;
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Per-layer rewrites

LayerLinear linearize_dense(const Dense& layer) {
    return {layer.weight, layer.bias.value_or(Vector(layer.out(), 0.0))};
}

LayerLinear linearize_conv(const Conv2D& layer, const Shape& in_shape) {
    const Shape out_shape = infer_layer_shape(layer, in_shape);
    const std::size_t H = in_shape[1], W = in_shape[2];
    const std::size_t OH = out_shape[1], OW = out_shape[2];
    const auto pad = static_cast<std::ptrdiff_t>(layer.padding);
    SparseRowBuilder builder(out_shape.size(), in_shape.size());
    Vector bias(out_shape.size(), 0.0);
    for (std::size_t oc = 0; oc < layer.out_channels; ++oc) {
        for (std::size_t i = 0; i < OH; ++i) {
            for (std::size_t j = 0; j < OW; ++j) {
                // Columns come out in increasing flat order: channel, then row, then column.
                for (std::size_t ic = 0; ic < layer.in_channels; ++ic) {
                    for (std::size_t a = 0; a < layer.kernel_h; ++a) {
                        const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(i * layer.stride + a) - pad;
                        if (h < 0 || h >= static_cast<std::ptrdiff_t>(H)) continue;
                        for (std::size_t b = 0; b < layer.kernel_w; ++b) {
                            const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(j * layer.stride + b) - pad;
                            if (w < 0 || w >= static_cast<std::ptrdiff_t>(W)) continue;
                            builder.push(flat_index(ic, static_cast<std::size_t>(h), static_cast<std::size_t>(w), in_shape),
                                         layer.kernel(oc, ic, a, b));
                        }
                    }
                }
                builder.end_row();
                if (layer.bias) bias[flat_index(oc, i, j, out_shape)] = (*layer.bias)[oc];
            }
        }
    }
    return {std::move(builder).build(), std::move(bias)};
}

LayerLinear linearize_maxpool(const MaxPool2D& layer, const Shape& in_shape, std::span<const std::size_t> selected) {
    const Shape out_shape = infer_layer_shape(layer, in_shape);
    if (selected.size() != out_shape.size())
        throw TraceError("maxpool trace has " + std::to_string(selected.size()) + " indices, layer has " +
                         std::to_string(out_shape.size()) + " outputs");
    SparseRowBuilder builder(out_shape.size(), in_shape.size());
    for (std::size_t o = 0; o < selected.size(); ++o) {
        if (selected[o] >= in_shape.size())
            throw TraceError("maxpool trace index " + std::to_string(selected[o]) + " out of range");
        const std::size_t plane = out_shape[1] * out_shape[2], in_plane = in_shape[1] * in_shape[2];
        const std::size_t c = o / plane, i = (o % plane) / out_shape[2], j = o % out_shape[2];
        const std::size_t sc = selected[o] / in_plane, si = (selected[o] % in_plane) / in_shape[2],
                          sj = selected[o] % in_shape[2];
        if (sc != c || si < i * layer.stride || si >= i * layer.stride + layer.k || sj < j * layer.stride ||
            sj >= j * layer.stride + layer.k)
            throw TraceError("maxpool trace index " + std::to_string(selected[o]) + " lies outside window " +
                             std::to_string(o));
        builder.push(selected[o], 1.0);
        builder.end_row();
    }
    return {std::move(builder).build(), Vector(out_shape.size(), 0.0)};
}

LayerLinear linearize_avgpool(const AvgPool2D& layer, const Shape& in_shape) {
    const Shape out_shape = infer_layer_shape(layer, in_shape);
    const double inv = 1.0 / static_cast<double>(layer.k * layer.k);
    SparseRowBuilder builder(out_shape.size(), in_shape.size());
    for (std::size_t c = 0; c < out_shape[0]; ++c)
        for (std::size_t i = 0; i < out_shape[1]; ++i)
            for (std::size_t j = 0; j < out_shape[2]; ++j) {
                for (std::size_t a = 0; a < layer.k; ++a)
                    for (std::size_t b = 0; b < layer.k; ++b)
                        builder.push(flat_index(c, i * layer.stride + a, j * layer.stride + b, in_shape), inv);
                builder.end_row();
            }
    return {std::move(builder).build(), Vector(out_shape.size(), 0.0)};
}

LayerLinear linearize_batchnorm(const BatchNorm& layer, const Shape& in_shape) {
    infer_layer_shape(layer, in_shape);
    const std::size_t channels = in_shape[0];
    const std::size_t plane = in_shape.size() / channels;
    Vector scale(in_shape.size()), shift(in_shape.size());
    for (std::size_t c = 0; c < channels; ++c) {
        const double denom = layer.var[c] + layer.eps;
        if (!(denom > 0.0)) throw NumericError("batchnorm channel " + std::to_string(c) + ": var + eps must be positive");
        const double sd = std::sqrt(denom);
        const double w_norm = layer.gamma[c] / sd;
        const double b_norm = -layer.mean[c] * layer.gamma[c] / sd + layer.beta[c];
        std::fill_n(scale.begin() + static_cast<std::ptrdiff_t>(c * plane), plane, w_norm);
        std::fill_n(shift.begin() + static_cast<std::ptrdiff_t>(c * plane), plane, b_norm);
    }
    return {SparseRowMatrix::diagonal(scale), std::move(shift)};
}

Vector activation_lambda(const Activation& act, std::span<const double> z) {
    Vector lambda(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double v = z[i];
        const bool tiny = std::abs(v) < kLambdaLimitThreshold;
        double l = 0.0;
        switch (act.kind) {
            // Piecewise-linear gates are exact on both sides; z == 0 takes the lower branch.
            case ActivationKind::relu: l = v > 0.0 ? 1.0 : 0.0; break;
            case ActivationKind::leaky_relu: l = v > 0.0 ? 1.0 : act.alpha; break;
            case ActivationKind::elu:
                l = v > 0.0 ? 1.0 : (tiny ? act.alpha : act.alpha * std::expm1(v) / v);
                break;
            case ActivationKind::selu:
                l = kSeluScale * (v > 0.0 ? 1.0 : (tiny ? kSeluAlpha : kSeluAlpha * std::expm1(v) / v));
                break;
            case ActivationKind::gelu: l = tiny ? 0.5 : normal_cdf(v); break;
        }
        lambda[i] = l;
    }
    return lambda;
}

LayerLinear linearize_activation(const Activation& act, std::span<const double> z) {
    return {SparseRowMatrix::diagonal(activation_lambda(act, z)), Vector(z.size(), 0.0)};
}

LayerLinear linearize_residual(const Residual& block, const Shape& in_shape, const LayerTrace& trace) {
    if (trace.inner.size() != block.inner.size()) throw TraceError("residual trace length mismatch");
    Fold fold(in_shape.size());
    Shape shape = in_shape;
    for (std::size_t i = 0; i < block.inner.size(); ++i) {
        fold.push(linearize_layer(block.inner[i], shape, trace.inner[i]));
        shape = infer_layer_shape(block.inner[i], shape);
    }
    Vector b = std::move(fold).take_b();
    DenseMatrix w = std::move(fold).take_w();
    for (std::size_t i = 0; i < w.rows(); ++i) w(i, i) += 1.0;
    return {std::move(w), std::move(b)};
}

LayerLinear linearize_layer(const LayerSpec& layer, const Shape& in_shape, const LayerTrace& trace) {
    return std::visit(overloaded{
                          [&](const Dense& d) { return linearize_dense(d); },
                          [&](const Conv2D& c) { return linearize_conv(c, in_shape); },
                          [&](const MaxPool2D& p) { return linearize_maxpool(p, in_shape, trace.selected); },
                          [&](const AvgPool2D& p) { return linearize_avgpool(p, in_shape); },
                          [&](const BatchNorm& b) { return linearize_batchnorm(b, in_shape); },
                          [&](const Activation& a) {
                              if (trace.pre_activation.size() != in_shape.size())
                                  throw TraceError("activation trace length mismatch");
                              return linearize_activation(a, trace.pre_activation);
                          },
                          [&](const Flatten&) {
                              return LayerLinear{SparseRowMatrix::identity(in_shape.size()), Vector(in_shape.size(), 0.0)};
                          },
                          [&](const Residual& r) { return linearize_residual(r, in_shape, trace); },
                      },
                      layer);
}

// ---------------------------------------------------------------------------
// Aggregation

ActivationPattern activation_pattern(const Network& net, const ActivationTrace& trace) {
    if (trace.layers.size() != net.layers.size()) throw TraceError("trace does not match the network depth");
    ActivationPattern p;
    p.layers.reserve(net.layers.size());
    for (std::size_t i = 0; i < net.layers.size(); ++i) p.layers.push_back(pattern_entry(net.layers[i], trace.layers[i]));
    return p;
}

ActivationPattern activation_pattern(const Network& net, std::span<const double> x) {
    return activation_pattern(net, forward(net, x).trace);
}

InstanceLinearization linearize_range(const Network& net, const ActivationTrace& trace, std::size_t begin,
                                      std::size_t end) {
    if (begin > end || end > net.layers.size()) throw IndexError("layer range out of bounds");
    if (trace.layers.size() != net.layers.size()) throw TraceError("trace does not match the network depth");
    const auto shapes = infer_shapes(net);
    Fold fold(input_shape_of(net, shapes, begin).size());
    for (std::size_t i = begin; i < end; ++i) {
        try {
            fold.push(linearize_layer(net.layers[i], input_shape_of(net, shapes, i), trace.layers[i]));
        } catch (const Error& e) {
            throw TraceError("layer " + std::to_string(i) + " (" + layer_type_name(net.layers[i]) + "): " + e.what());
        }
    }
    InstanceLinearization lin;
    lin.b = std::move(fold).take_b();
    lin.w = std::move(fold).take_w();
    return lin;
}

InstanceLinearization linearize_instance(const Network& net, std::span<const double> x) {
    const ActivationTrace trace = forward(net, x).trace;
    InstanceLinearization lin = linearize_range(net, trace, 0, net.layers.size());
    lin.pattern = activation_pattern(net, trace);
    return lin;
}

InstanceLinearization linearize_ensemble(const Ensemble& ens, std::span<const double> x) {
    validate(ens);
    InstanceLinearization out;
    for (std::size_t m = 0; m < ens.members.size(); ++m) {
        InstanceLinearization lin = linearize_instance(ens.members[m], x);
        const double a = ens.shares[m];
        if (m == 0) {
            out.w = DenseMatrix(lin.w.rows(), lin.w.cols());
            out.b.assign(lin.b.size(), 0.0);
        }
        auto& dst = out.w.values();
        const auto& src = lin.w.values();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += a * src[i];
        for (std::size_t i = 0; i < out.b.size(); ++i) out.b[i] += a * lin.b[i];
        for (auto& e : lin.pattern.layers) out.pattern.layers.push_back(std::move(e));
    }
    return out;
}

bool is_piecewise_linear(const Network& net) { return layers_piecewise_linear(net.layers); }

DenseMatrix jacobian_fd(const Network& net, std::span<const double> x, double h) {
    if (!(h > 0.0)) throw ValidationError("finite-difference step must be positive");
    const std::size_t n = x.size();
    const std::size_t m = net.output_size();
    DenseMatrix J(m, n);
    Vector probe(x.begin(), x.end());
    for (std::size_t j = 0; j < n; ++j) {
        probe[j] = x[j] + h;
        const Vector up = forward(net, probe).output;
        probe[j] = x[j] - h;
        const Vector down = forward(net, probe).output;
        probe[j] = x[j];
        for (std::size_t i = 0; i < m; ++i) J(i, j) = (up[i] - down[i]) / (2.0 * h);
    }
    return J;
}

double kink_distance(const Network& net, std::span<const double> x) {
    return stack_kink_distance(net.layers, net.input_shape, Vector(x.begin(), x.end()));
}

RegionProbe region_probe(const Network& net, std::span<const double> x, std::span<const double> direction,
                         const RegionProbeOptions& options) {
    if (direction.size() != x.size()) throw ShapeError("direction length != input length");
    double norm = 0.0;
    for (double d : direction) norm += d * d;
    norm = std::sqrt(norm);
    if (!(norm > 0.0) || !std::isfinite(norm)) throw ValidationError("direction must be a non-zero finite vector");

    RegionProbe probe;
    probe.x.assign(x.begin(), x.end());
    probe.direction.resize(direction.size());
    for (std::size_t i = 0; i < direction.size(); ++i) probe.direction[i] = direction[i] / norm;

    const ActivationPattern base = activation_pattern(net, x);
    Vector point(x.size());
    auto pattern_at = [&](double t) {
        for (std::size_t i = 0; i < x.size(); ++i) point[i] = x[i] + t * probe.direction[i];
        return activation_pattern(net, point);
    };

    if (pattern_at(options.t_max) == base) {
        probe.delta = options.t_max;
        probe.unbounded = true;
        return probe;
    }

    // Grow geometrically from the resolution scale so the first crossing is
    // bracketed rather than an arbitrary one further along the ray.
    double lo = 0.0;
    double hi = options.t_max;
    for (double t = options.t_max * std::ldexp(1.0, -40); t < options.t_max; t *= 2.0) {
        if (pattern_at(t) != base) {
            hi = t;
            break;
        }
        lo = t;
    }
    for (int it = 0; it < options.max_iterations && hi - lo > options.resolution; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (pattern_at(mid) == base)
            lo = mid;
        else
            hi = mid;
    }
    probe.delta = lo;
    probe.boundary_layer = pattern_at(hi).first_difference(base);
    return probe;
}

}  // namespace ilin
