// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>

#include "ilin/trainer.hpp"

namespace ilin {

namespace {

constexpr double kPerplexityTolerance = 1e-5;
constexpr int kMaxBisections = 100;

double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        const double d = a[k] - b[k];
        s += d * d;
    }
    return s;
}

struct Conditional {
    Vector p;
    double perplexity = 0.0;
};

/// p_{.|i} for precision beta = 1 / (2 sigma^2). `d` holds squared distances
/// with the self entry excluded; `shift` is min(d) so the largest weight is 1.
Conditional conditional(const Vector& d, double shift, double beta) {
    Conditional c;
    c.p.resize(d.size());
    double z = 0.0, weighted = 0.0;
    for (std::size_t j = 0; j < d.size(); ++j) {
        c.p[j] = std::exp(-beta * (d[j] - shift));
        z += c.p[j];
        weighted += (d[j] - shift) * c.p[j];
    }
    for (double& v : c.p) v /= z;
    const double entropy_nats = std::log(z) + beta * weighted / z;
    c.perplexity = std::exp2(entropy_nats / std::numbers::ln2);
    return c;
}

void check_embeddings(const PairwiseAffinity& p, std::span<const Vector> y) {
    if (y.size() != p.p.rows()) throw ShapeError("embedding count does not match the affinity matrix");
    if (y.empty()) throw ShapeError("no embeddings");
    const std::size_t dim = y[0].size();
    bool all_same = true;
    for (const auto& v : y) {
        if (v.size() != dim) throw ShapeError("embeddings have different dimensions");
        for (double c : v)
            if (!std::isfinite(c)) throw NumericError("non-finite embedding");
        all_same = all_same && v == y[0];
    }
    if (all_same) throw NumericError("all embeddings are identical; q is degenerate");
}

/// log of the normalizer sum_{k != l} exp(-|y_k - y_l|^2), plus the squared distances.
double log_normalizer(std::span<const Vector> y, DenseMatrix& d2) {
    const std::size_t n = y.size();
    double lowest = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) {
                d2(i, j) = squared_distance(y[i], y[j]);
                lowest = std::min(lowest, d2(i, j));
            }
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) z += std::exp(-(d2(i, j) - lowest));
    return std::log(z) - lowest;
}

}  // namespace

PairwiseAffinity tsne_affinities(std::span<const Vector> data, double perplexity) {
    const std::size_t n = data.size();
    if (n < 2) throw ValidationError("t-SNE affinities need at least 2 points");
    if (!(perplexity > 0.0) || !(perplexity < static_cast<double>(n)))
        throw ValidationError("perplexity must lie in (0, N)");
    for (const auto& v : data) {
        if (v.size() != data[0].size()) throw ShapeError("data points have different dimensions");
        for (double c : v)
            if (!std::isfinite(c)) throw NumericError("non-finite data value");
    }
    if (std::all_of(data.begin(), data.end(), [&](const Vector& v) { return v == data[0]; }))
        throw NumericError("all data points are identical; affinities are degenerate");

    PairwiseAffinity out{DenseMatrix(n, n), Vector(n, 1.0), Vector(n, 0.0)};
    DenseMatrix cond(n, n);
    Vector d(n - 1);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0, k = 0; j < n; ++j)
            if (j != i) d[k++] = squared_distance(data[i], data[j]);
        const auto [lo_it, hi_it] = std::minmax_element(d.begin(), d.end());
        const double shift = *lo_it;

        double beta = 1.0;
        Conditional c = conditional(d, shift, beta);
        if (*hi_it > shift) {
            // Perplexity falls as beta grows: double or halve until bracketed, then bisect.
            double lo = 0.0, hi = std::numeric_limits<double>::infinity();
            for (int it = 0; it < kMaxBisections && std::abs(c.perplexity - perplexity) > kPerplexityTolerance; ++it) {
                if (c.perplexity > perplexity) {
                    lo = beta;
                    beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
                } else {
                    hi = beta;
                    beta = 0.5 * (beta + lo);
                }
                c = conditional(d, shift, beta);
            }
            out.sigmas[i] = std::sqrt(0.5 / beta);
        }
        // Otherwise every neighbor is equidistant and p_{.|i} is uniform for any sigma; sigma stays 1.
        out.perplexities[i] = c.perplexity;
        for (std::size_t j = 0, k = 0; j < n; ++j)
            if (j != i) cond(i, j) = c.p[k++];
    }

    const double denom = 2.0 * static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) out.p(i, j) = (cond(i, j) + cond(j, i)) / denom;
    return out;
}

double tsne_loss(const PairwiseAffinity& p, std::span<const Vector> embeddings) {
    return tsne_loss_gradient(p, embeddings).loss;
}

TsneLossGradient tsne_loss_gradient(const PairwiseAffinity& p, std::span<const Vector> embeddings) {
    check_embeddings(p, embeddings);
    const std::size_t n = embeddings.size();
    const std::size_t dim = embeddings[0].size();
    DenseMatrix d2(n, n);
    const double log_z = log_normalizer(embeddings, d2);

    TsneLossGradient out;
    out.grad.assign(n, Vector(dim, 0.0));
    double p_total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const double pij = p.p(i, j);
            p_total += pij;
            // KL terms with p_ij = 0 contribute nothing.
            if (pij > 0.0) out.loss += pij * (std::log(pij) + d2(i, j) + log_z);
        }
    // dL/dy_i = 4 sum_j (p_ij - S q_ij)(y_i - y_j), S = sum p (1 up to rounding).
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const double q = std::exp(-d2(i, j) - log_z);
            const double coeff = 4.0 * (p.p(i, j) - p_total * q);
            for (std::size_t k = 0; k < dim; ++k)
                out.grad[i][k] += coeff * (embeddings[i][k] - embeddings[j][k]);
        }
    return out;
}

TsneTrainResult train_parametric_tsne(Network net, std::span<const Vector> data, const TrainConfig& cfg) {
    validate(net);
    if (cfg.loss != LossKind::tsne) throw ValidationError("parametric t-SNE training needs loss = tsne");
    if (net.output_size() != 2)
        throw ValidationError("parametric t-SNE needs a 2-output network, got " + std::to_string(net.output_size()));
    if (!(cfg.learning_rate > 0.0) || !std::isfinite(cfg.learning_rate))
        throw ValidationError("learning rate must be positive");
    for (const auto& x : data)
        if (x.size() != net.input_size()) throw ShapeError("data dimension does not match the network input");

    const PairwiseAffinity p = tsne_affinities(data, cfg.perplexity);
    std::vector<Vector> y(data.size());
    auto project = [&] {
        for (std::size_t i = 0; i < data.size(); ++i) y[i] = forward(net, data[i]).output;
    };

    TsneTrainResult result;
    for (std::size_t iter = 0; iter < cfg.epochs; ++iter) {
        project();
        const TsneLossGradient lg = tsne_loss_gradient(p, y);
        result.loss_log.push_back(lg.loss);
        Gradients total = Gradients::zeros_like(net);
        for (std::size_t i = 0; i < data.size(); ++i) total.add(backward(net, data[i], lg.grad[i]).grads);
        net = sgd_step(std::move(net), total, cfg.learning_rate);
    }
    project();
    result.loss_log.push_back(tsne_loss(p, y));
    result.net = std::move(net);
    return result;
}

std::string tsne_log_csv(const std::vector<double>& loss_log) {
    std::string out = "iter,loss\n";
    char buf[64];
    for (std::size_t i = 0; i < loss_log.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i, loss_log[i]);
        out += buf;
    }
    return out;
}

}  // namespace ilin
