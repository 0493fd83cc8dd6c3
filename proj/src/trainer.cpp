// SPDX-License-Identifier: Apache-2.0
#include "ilin/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "ilin/random.hpp"

namespace ilin {

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};

/// Inputs of every layer from one forward pass, kept for the backward pass.
struct Tape {
    std::vector<Shape> in_shapes;
    std::vector<Vector> inputs;
    std::vector<LayerTrace> traces;
    std::vector<Tape> inner;
};

Vector run_forward(const std::vector<LayerSpec>& layers, Shape shape, Vector x, Tape& tape) {
    const std::size_t n = layers.size();
    tape.in_shapes.resize(n);
    tape.inputs.resize(n);
    tape.traces.assign(n, {});
    tape.inner.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        Shape next = infer_layer_shape(layers[i], shape);
        Vector y;
        if (const auto* r = std::get_if<Residual>(&layers[i])) {
            y = run_forward(r->inner, shape, x, tape.inner[i]);
            for (std::size_t k = 0; k < y.size(); ++k) y[k] += x[k];
        } else {
            y = forward_layer(layers[i], shape, x, &tape.traces[i]);
        }
        for (double v : y)
            if (!std::isfinite(v))
                throw NumericError("layer " + std::to_string(i) + " (" + layer_type_name(layers[i]) + "): non-finite output");
        tape.in_shapes[i] = std::move(shape);
        tape.inputs[i] = std::move(x);
        x = std::move(y);
        shape = std::move(next);
    }
    return x;
}

std::vector<LayerGrad> zero_grads(const std::vector<LayerSpec>& layers) {
    std::vector<LayerGrad> out(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
        std::visit(overloaded{
                       [&](const Dense& d) {
                           out[i].weight.assign(d.weight.values().size(), 0.0);
                           if (d.bias) out[i].bias.assign(d.bias->size(), 0.0);
                       },
                       [&](const Conv2D& c) {
                           out[i].weight.assign(c.kernels.size(), 0.0);
                           if (c.bias) out[i].bias.assign(c.bias->size(), 0.0);
                       },
                       [&](const BatchNorm& b) {
                           out[i].weight.assign(b.gamma.size(), 0.0);
                           out[i].bias.assign(b.beta.size(), 0.0);
                       },
                       [&](const Residual& r) { out[i].inner = zero_grads(r.inner); },
                       [](const auto&) {},
                   },
                   layers[i]);
    }
    return out;
}

Vector layer_backward(const LayerSpec& layer, const Shape& in_shape, const Vector& x, const LayerTrace& trace,
                      const Tape* inner_tape, const Vector& g, LayerGrad& grad);

Vector run_backward(const std::vector<LayerSpec>& layers, const Tape& tape, Vector g, std::vector<LayerGrad>& grads) {
    for (std::size_t i = layers.size(); i-- > 0;) {
        g = layer_backward(layers[i], tape.in_shapes[i], tape.inputs[i], tape.traces[i], &tape.inner[i], g, grads[i]);
    }
    return g;
}

Vector layer_backward(const LayerSpec& layer, const Shape& in_shape, const Vector& x, const LayerTrace& trace,
                      const Tape* inner_tape, const Vector& g, LayerGrad& grad) {
    Vector dx(x.size(), 0.0);
    std::visit(
        overloaded{
            [&](const Dense& d) {
                const std::size_t in = d.in();
                for (std::size_t r = 0; r < d.out(); ++r) {
                    const double gr = g[r];
                    if (gr == 0.0) continue;
                    const auto wrow = d.weight.row(r);
                    double* gw = grad.weight.data() + r * in;
                    for (std::size_t c = 0; c < in; ++c) {
                        gw[c] += gr * x[c];
                        dx[c] += wrow[c] * gr;
                    }
                }
                if (d.bias)
                    for (std::size_t r = 0; r < d.out(); ++r) grad.bias[r] += g[r];
            },
            [&](const Conv2D& c) {
                const Shape out_shape = infer_layer_shape(layer, in_shape);
                const std::size_t H = in_shape[1], W = in_shape[2], OH = out_shape[1], OW = out_shape[2];
                const auto pad = static_cast<std::ptrdiff_t>(c.padding);
                for (std::size_t oc = 0; oc < c.out_channels; ++oc)
                    for (std::size_t i = 0; i < OH; ++i)
                        for (std::size_t j = 0; j < OW; ++j) {
                            const double go = g[(oc * OH + i) * OW + j];
                            if (c.bias) grad.bias[oc] += go;
                            if (go == 0.0) continue;
                            for (std::size_t ic = 0; ic < c.in_channels; ++ic)
                                for (std::size_t a = 0; a < c.kernel_h; ++a) {
                                    const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(i * c.stride + a) - pad;
                                    if (h < 0 || h >= static_cast<std::ptrdiff_t>(H)) continue;
                                    for (std::size_t b = 0; b < c.kernel_w; ++b) {
                                        const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(j * c.stride + b) - pad;
                                        if (w < 0 || w >= static_cast<std::ptrdiff_t>(W)) continue;
                                        const std::size_t xi = (ic * H + static_cast<std::size_t>(h)) * W +
                                                               static_cast<std::size_t>(w);
                                        const std::size_t ki = c.kernel_index(oc, ic, a, b);
                                        grad.weight[ki] += go * x[xi];
                                        dx[xi] += c.kernels[ki] * go;
                                    }
                                }
                        }
            },
            [&](const MaxPool2D&) {
                for (std::size_t o = 0; o < g.size(); ++o) dx[trace.selected[o]] += g[o];
            },
            [&](const AvgPool2D& p) {
                const Shape out_shape = infer_layer_shape(layer, in_shape);
                const double inv = 1.0 / static_cast<double>(p.k * p.k);
                for (std::size_t c = 0; c < out_shape[0]; ++c)
                    for (std::size_t i = 0; i < out_shape[1]; ++i)
                        for (std::size_t j = 0; j < out_shape[2]; ++j) {
                            const double go = g[(c * out_shape[1] + i) * out_shape[2] + j] * inv;
                            for (std::size_t a = 0; a < p.k; ++a)
                                for (std::size_t b = 0; b < p.k; ++b)
                                    dx[flat_index(c, i * p.stride + a, j * p.stride + b, in_shape)] += go;
                        }
            },
            [&](const BatchNorm& bn) {
                const std::size_t channels = in_shape[0];
                const std::size_t plane = in_shape.size() / channels;
                for (std::size_t c = 0; c < channels; ++c) {
                    const double sd = std::sqrt(bn.var[c] + bn.eps);
                    for (std::size_t k = 0; k < plane; ++k) {
                        const std::size_t i = c * plane + k;
                        dx[i] = g[i] * bn.gamma[c] / sd;
                        grad.weight[c] += g[i] * (x[i] - bn.mean[c]) / sd;
                        grad.bias[c] += g[i];
                    }
                }
            },
            [&](const Activation& act) {
                for (std::size_t i = 0; i < x.size(); ++i) dx[i] = g[i] * activate_derivative(act, x[i]);
            },
            [&](const Flatten&) { dx = g; },
            [&](const Residual& r) {
                dx = run_backward(r.inner, *inner_tape, g, grad.inner);
                for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i];
            },
        },
        layer);
    return dx;
}

void flatten_grads(const std::vector<LayerGrad>& grads, Vector& out) {
    for (const auto& g : grads) {
        out.insert(out.end(), g.weight.begin(), g.weight.end());
        out.insert(out.end(), g.bias.begin(), g.bias.end());
        flatten_grads(g.inner, out);
    }
}

void add_grads(std::vector<LayerGrad>& dst, const std::vector<LayerGrad>& src) {
    if (dst.size() != src.size()) throw ShapeError("gradient structures differ");
    for (std::size_t i = 0; i < dst.size(); ++i) {
        if (dst[i].weight.size() != src[i].weight.size() || dst[i].bias.size() != src[i].bias.size())
            throw ShapeError("gradient structures differ");
        for (std::size_t k = 0; k < dst[i].weight.size(); ++k) dst[i].weight[k] += src[i].weight[k];
        for (std::size_t k = 0; k < dst[i].bias.size(); ++k) dst[i].bias[k] += src[i].bias[k];
        add_grads(dst[i].inner, src[i].inner);
    }
}

void scale_grads(std::vector<LayerGrad>& grads, double s) {
    for (auto& g : grads) {
        for (double& v : g.weight) v *= s;
        for (double& v : g.bias) v *= s;
        scale_grads(g.inner, s);
    }
}

/// Calls fn(vector) on every trainable parameter array, in flatten order.
template <class Layers, class Fn>
void visit_parameters(Layers& layers, Fn&& fn) {
    for (auto& layer : layers) {
        if (auto* d = std::get_if<Dense>(&layer)) {
            fn(d->weight.values());
            if (d->bias) fn(*d->bias);
        } else if (auto* c = std::get_if<Conv2D>(&layer)) {
            fn(c->kernels);
            if (c->bias) fn(*c->bias);
        } else if (auto* b = std::get_if<BatchNorm>(&layer)) {
            fn(b->gamma);
            fn(b->beta);
        } else if (auto* r = std::get_if<Residual>(&layer)) {
            visit_parameters(r->inner, fn);
        }
    }
}

double loss_and_grad(std::span<const double> y, std::span<const double> target, LossKind loss, Vector& grad) {
    if (y.size() != target.size())
        throw ShapeError("target length " + std::to_string(target.size()) + " != output length " + std::to_string(y.size()));
    grad.assign(y.size(), 0.0);
    switch (loss) {
        case LossKind::cross_entropy: {
            const double peak = *std::max_element(y.begin(), y.end());
            double z = 0.0;
            for (double v : y) z += std::exp(v - peak);
            const double lse = peak + std::log(z);
            double total = 0.0, mass = 0.0;
            for (double t : target) mass += t;
            for (std::size_t i = 0; i < y.size(); ++i) {
                const double p = std::exp(y[i] - lse);
                total -= target[i] * (y[i] - lse);
                grad[i] = p * mass - target[i];
            }
            return total;
        }
        case LossKind::squared_error: {
            double total = 0.0;
            for (std::size_t i = 0; i < y.size(); ++i) {
                const double d = y[i] - target[i];
                total += d * d;
                grad[i] = 2.0 * d;
            }
            return total;
        }
        case LossKind::tsne: break;
    }
    throw ValidationError("t-SNE loss is defined over a batch, not a single sample");
}

void calibrate_stack(std::vector<LayerSpec>& layers, Shape shape, std::vector<Vector>& xs) {
    for (auto& layer : layers) {
        const Shape next = infer_layer_shape(layer, shape);
        if (auto* bn = std::get_if<BatchNorm>(&layer)) {
            const std::size_t channels = shape[0];
            const std::size_t plane = shape.size() / channels;
            const double count = static_cast<double>(plane * xs.size());
            for (std::size_t c = 0; c < channels; ++c) {
                double sum = 0.0;
                for (const auto& x : xs)
                    for (std::size_t k = 0; k < plane; ++k) sum += x[c * plane + k];
                const double mean = sum / count;
                double sq = 0.0;
                for (const auto& x : xs)
                    for (std::size_t k = 0; k < plane; ++k) {
                        const double d = x[c * plane + k] - mean;
                        sq += d * d;
                    }
                bn->mean[c] = mean;
                bn->var[c] = sq / count;
            }
        }
        if (auto* r = std::get_if<Residual>(&layer)) {
            std::vector<Vector> inner = xs;
            calibrate_stack(r->inner, shape, inner);
            for (std::size_t i = 0; i < xs.size(); ++i)
                for (std::size_t k = 0; k < xs[i].size(); ++k) xs[i][k] += inner[i][k];
        } else {
            for (auto& x : xs) x = forward_layer(layer, shape, x, nullptr);
        }
        shape = next;
    }
}

}  // namespace

void validate(const TrainConfig& cfg, std::size_t dataset_size) {
    if (!(cfg.learning_rate > 0.0) || !std::isfinite(cfg.learning_rate))
        throw ValidationError("learning rate must be positive");
    if (cfg.batch_size == 0) throw ValidationError("batch size must be positive");
    if (cfg.batch_size > dataset_size) throw ValidationError("batch size exceeds the dataset size");
    if (!(cfg.perplexity > 0.0)) throw ValidationError("perplexity must be positive");
}

Gradients Gradients::zeros_like(const Network& net) { return {zero_grads(net.layers)}; }

Vector Gradients::flatten() const {
    Vector out;
    flatten_grads(layers, out);
    return out;
}

void Gradients::add(const Gradients& other) { add_grads(layers, other.layers); }

void Gradients::scale(double s) { scale_grads(layers, s); }

BackpropResult backward(const Network& net, std::span<const double> x, std::span<const double> output_grad) {
    if (x.size() != net.input_size()) throw ShapeError("input length does not match the network");
    Tape tape;
    const Vector y = run_forward(net.layers, net.input_shape, Vector(x.begin(), x.end()), tape);
    if (output_grad.size() != y.size()) throw ShapeError("output gradient length != output length");
    BackpropResult r;
    r.grads = Gradients::zeros_like(net);
    r.input_grad = run_backward(net.layers, tape, Vector(output_grad.begin(), output_grad.end()), r.grads.layers);
    return r;
}

BackpropResult backprop(const Network& net, std::span<const double> x, std::span<const double> target, LossKind loss) {
    if (x.size() != net.input_size()) throw ShapeError("input length does not match the network");
    Tape tape;
    const Vector y = run_forward(net.layers, net.input_shape, Vector(x.begin(), x.end()), tape);
    Vector g;
    BackpropResult r;
    r.loss = loss_and_grad(y, target, loss, g);
    r.grads = Gradients::zeros_like(net);
    r.input_grad = run_backward(net.layers, tape, std::move(g), r.grads.layers);
    return r;
}

Vector flat_parameters(const Network& net) {
    Vector out;
    visit_parameters(net.layers, [&](const Vector& v) { out.insert(out.end(), v.begin(), v.end()); });
    return out;
}

std::size_t parameter_count(const Network& net) {
    std::size_t n = 0;
    visit_parameters(net.layers, [&](const Vector& v) { n += v.size(); });
    return n;
}

void set_flat_parameters(Network& net, std::span<const double> values) {
    if (values.size() != parameter_count(net)) throw ShapeError("parameter vector length mismatch");
    std::size_t pos = 0;
    visit_parameters(net.layers, [&](Vector& v) {
        std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(pos), v.size(), v.begin());
        pos += v.size();
    });
}

Network sgd_step(Network net, const Gradients& grads, double lr) {
    const Vector g = grads.flatten();
    if (g.size() != parameter_count(net)) throw ShapeError("gradients do not match the network parameters");
    std::size_t pos = 0;
    visit_parameters(net.layers, [&](Vector& v) {
        for (double& p : v) p -= lr * g[pos++];
    });
    return net;
}

double accuracy(const Network& net, const Dataset& ds) {
    if (ds.size() == 0) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) hits += argmax(forward(net, ds.inputs[i]).output) == ds.labels[i];
    return static_cast<double>(hits) / static_cast<double>(ds.size());
}

TrainResult train_classifier(Network net, const Dataset& train, const Dataset* test, const TrainConfig& cfg) {
    validate(net);
    validate(train);
    validate(cfg, train.size());
    if (cfg.loss != LossKind::cross_entropy) throw ValidationError("classifier training uses cross_entropy");
    if (net.output_size() != train.num_classes)
        throw ValidationError("network has " + std::to_string(net.output_size()) + " outputs for " +
                              std::to_string(train.num_classes) + " classes");

    Rng rng(cfg.seed);
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    TrainResult result;
    Vector target(train.num_classes, 0.0);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            Gradients batch = Gradients::zeros_like(net);
            for (std::size_t k = start; k < end; ++k) {
                const std::size_t i = order[k];
                target[train.labels[i]] = 1.0;
                const BackpropResult r = backprop(net, train.inputs[i], target, LossKind::cross_entropy);
                target[train.labels[i]] = 0.0;
                epoch_loss += r.loss;
                batch.add(r.grads);
            }
            batch.scale(1.0 / static_cast<double>(end - start));
            net = sgd_step(std::move(net), batch, cfg.learning_rate);
        }
        result.log.push_back({epoch + 1, epoch_loss / static_cast<double>(train.size()),
                              accuracy(net, test ? *test : train)});
    }
    result.net = std::move(net);
    return result;
}

std::string classifier_log_csv(const std::vector<EpochLog>& log) {
    std::string out = "epoch,loss,accuracy\n";
    char buf[128];
    for (const auto& e : log) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", e.epoch, e.loss, e.accuracy);
        out += buf;
    }
    return out;
}

WeightInitializer glorot_initializer(std::uint64_t seed) {
    auto rng = std::make_shared<Rng>(seed);
    return [rng](std::size_t count, std::size_t fan_in, std::size_t fan_out) {
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        return rng->uniform_vector(count, -limit, limit);
    };
}

Network network_from_template(const std::string& json_text, std::uint64_t seed) {
    Model m = model_from_json(json_text, ParseOptions{glorot_initializer(seed)});
    if (!std::holds_alternative<Network>(m)) throw ValidationError("template must describe a network");
    return std::get<Network>(std::move(m));
}

Network load_template(const std::filesystem::path& path, std::uint64_t seed) {
    try {
        return network_from_template(read_file(path), seed);
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

void calibrate_batchnorm(Network& net, std::span<const Vector> inputs) {
    if (inputs.empty()) throw ValidationError("batch-norm calibration needs at least one input");
    std::vector<Vector> xs(inputs.begin(), inputs.end());
    calibrate_stack(net.layers, net.input_shape, xs);
}

}  // namespace ilin
