// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ilin/experiments.hpp"
#include "ilin/model.hpp"
#include "ilin/model_io.hpp"

namespace ilin {

enum class LossKind { cross_entropy, squared_error, tsne };

struct TrainConfig {
    double learning_rate = 0.01;
    std::size_t epochs = 50;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    LossKind loss = LossKind::cross_entropy;
    /// t-SNE only.
    double perplexity = 15.0;
};

void validate(const TrainConfig& cfg, std::size_t dataset_size);

/// Gradient of one layer's trainable parameters. Dense: weight/bias.
/// Conv2D: kernels/bias. BatchNorm: gamma/beta. Residual: per inner layer.
struct LayerGrad {
    Vector weight;
    Vector bias;
    std::vector<LayerGrad> inner;
};

struct Gradients {
    std::vector<LayerGrad> layers;

    static Gradients zeros_like(const Network& net);
    /// Parameters in the order of flat_parameters().
    [[nodiscard]] Vector flatten() const;
    void add(const Gradients& other);
    void scale(double s);
};

struct BackpropResult {
    double loss = 0.0;
    Gradients grads;
    Vector input_grad;
};

/// Exact reverse-mode gradients of the loss at one sample.
/// cross_entropy: softmax cross-entropy against a target distribution (usually one-hot).
/// squared_error: sum of squared differences.
/// Batch-norm mean/var are fixed statistics and receive no gradient.
BackpropResult backprop(const Network& net, std::span<const double> x, std::span<const double> target, LossKind loss);

/// Gradients for an arbitrary upstream gradient on the network output.
BackpropResult backward(const Network& net, std::span<const double> x, std::span<const double> output_grad);

Vector flat_parameters(const Network& net);
void set_flat_parameters(Network& net, std::span<const double> values);
std::size_t parameter_count(const Network& net);

/// theta <- theta - lr * g for every trainable parameter.
Network sgd_step(Network net, const Gradients& grads, double lr);

struct EpochLog {
    std::size_t epoch = 0;
    double loss = 0.0;
    double accuracy = 0.0;
};

struct TrainResult {
    Network net;
    std::vector<EpochLog> log;
};

double accuracy(const Network& net, const Dataset& ds);

/// Seeded minibatch SGD on softmax cross-entropy. Accuracy is measured on
/// `test` when given, otherwise on `train`.
TrainResult train_classifier(Network net, const Dataset& train, const Dataset* test, const TrainConfig& cfg);

std::string classifier_log_csv(const std::vector<EpochLog>& log);

/// Uniform in +-sqrt(6 / (fan_in + fan_out)), drawing from one seeded stream.
WeightInitializer glorot_initializer(std::uint64_t seed);

/// Loads a model file whose weight arrays may be omitted; missing ones are
/// initialized from `seed`, missing biases requested with `"bias": true` are zero.
Network load_template(const std::filesystem::path& path, std::uint64_t seed);
Network network_from_template(const std::string& json_text, std::uint64_t seed);

/// Sets every batch-norm mean/var to the statistics of its input over `inputs`.
void calibrate_batchnorm(Network& net, std::span<const Vector> inputs);

// ---------------------------------------------------------------------------
// Parametric t-SNE

/// Symmetric joint affinities p_ij = (p_j|i + p_i|j) / 2N.
struct PairwiseAffinity {
    DenseMatrix p;
    Vector sigmas;
    /// Perplexity actually reached by each conditional distribution.
    Vector perplexities;
};

PairwiseAffinity tsne_affinities(std::span<const Vector> data, double perplexity);

/// KL(P || Q) with q_ij proportional to exp(-|y_i - y_j|^2), normalized over all i != j.
double tsne_loss(const PairwiseAffinity& p, std::span<const Vector> embeddings);

struct TsneLossGradient {
    double loss = 0.0;
    std::vector<Vector> grad;
};
TsneLossGradient tsne_loss_gradient(const PairwiseAffinity& p, std::span<const Vector> embeddings);

struct TsneTrainResult {
    Network net;
    /// Entry i is the loss before update i; the last entry is the final loss.
    std::vector<double> loss_log;
};

/// Full-batch gradient descent of the network's 2-D projection on the t-SNE loss.
/// cfg.epochs is the number of iterations.
TsneTrainResult train_parametric_tsne(Network net, std::span<const Vector> data, const TrainConfig& cfg);

std::string tsne_log_csv(const std::vector<double>& loss_log);

}  // namespace ilin
