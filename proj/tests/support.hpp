// SPDX-License-Identifier: Apache-2.0
// Builders shared by the unit tests and the acceptance binary.
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "ilin/model.hpp"
#include "ilin/random.hpp"

namespace ilin::testing {

inline Vector random_vector(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
    return rng.uniform_vector(n, lo, hi);
}

inline Dense random_dense(Rng& rng, std::size_t in, std::size_t out, bool bias = true) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    Dense d{DenseMatrix(out, in, rng.uniform_vector(in * out, -limit, limit)), std::nullopt};
    if (bias) d.bias = rng.uniform_vector(out, -0.5, 0.5);
    return d;
}

inline Conv2D random_conv(Rng& rng, std::size_t in_ch, std::size_t out_ch, std::size_t k, std::size_t stride,
                          std::size_t padding, bool bias = true) {
    Conv2D c;
    c.in_channels = in_ch;
    c.out_channels = out_ch;
    c.kernel_h = c.kernel_w = k;
    c.stride = stride;
    c.padding = padding;
    const double limit = std::sqrt(6.0 / static_cast<double>((in_ch + out_ch) * k * k));
    c.kernels = rng.uniform_vector(out_ch * in_ch * k * k, -limit, limit);
    if (bias) c.bias = rng.uniform_vector(out_ch, -0.3, 0.3);
    return c;
}

inline BatchNorm random_batchnorm(Rng& rng, std::size_t channels) {
    BatchNorm b;
    b.gamma = rng.uniform_vector(channels, 0.5, 1.5);
    b.beta = rng.uniform_vector(channels, -0.5, 0.5);
    b.mean = rng.uniform_vector(channels, -0.2, 0.2);
    b.var = rng.uniform_vector(channels, 0.5, 2.0);
    return b;
}

inline Activation act(ActivationKind kind, double alpha = 0.0) {
    if (kind == ActivationKind::leaky_relu && alpha == 0.0) alpha = 0.01;
    if (kind == ActivationKind::elu && alpha == 0.0) alpha = 1.0;
    return Activation{kind, alpha};
}

/// Conv2D(padding) -> BatchNorm -> act -> MaxPool2D -> Residual(conv, act) -> Flatten -> Dense -> act -> Dense.
/// Input [channels, size, size]; size must be divisible by 2.
inline Network mixed_network(Rng& rng, ActivationKind kind = ActivationKind::relu, std::size_t size = 8,
                             std::size_t channels = 1, std::size_t classes = 10) {
    Network net;
    net.input_shape = Shape{channels, size, size};
    net.layers.push_back(random_conv(rng, channels, 3, 3, 1, 1));
    net.layers.push_back(random_batchnorm(rng, 3));
    net.layers.push_back(act(kind));
    net.layers.push_back(MaxPool2D{2, 2});
    Residual res;
    res.inner.push_back(random_conv(rng, 3, 3, 3, 1, 1));
    res.inner.push_back(act(kind));
    net.layers.push_back(std::move(res));
    net.layers.push_back(Flatten{});
    const std::size_t flat = 3 * (size / 2) * (size / 2);
    net.layers.push_back(random_dense(rng, flat, 16));
    net.layers.push_back(act(kind));
    net.layers.push_back(random_dense(rng, 16, classes));
    return net;
}

inline Network mlp(Rng& rng, std::vector<std::size_t> widths, ActivationKind kind = ActivationKind::relu,
                   bool bias = true) {
    Network net;
    net.input_shape = Shape{widths.front()};
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        if (i > 0) net.layers.push_back(act(kind));
        net.layers.push_back(random_dense(rng, widths[i], widths[i + 1], bias));
    }
    return net;
}

/// Scratch directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() /
                ("ilin_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    [[nodiscard]] const std::filesystem::path& path() const { return path_; }
    [[nodiscard]] std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    static int& counter() {
        static int n = 0;
        return n;
    }
    std::filesystem::path path_;
};

}  // namespace ilin::testing
