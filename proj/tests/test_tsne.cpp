// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "ilin/experiments.hpp"
#include "ilin/linearize.hpp"
#include "ilin/trainer.hpp"
#include "support.hpp"

namespace ilin {
namespace {

std::vector<Vector> random_points(Rng& rng, std::size_t n, std::size_t dim) {
    std::vector<Vector> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(rng.uniform_vector(dim, -1, 1));
    return out;
}

double off_diagonal_sum(const DenseMatrix& p) {
    double s = 0.0;
    for (std::size_t i = 0; i < p.rows(); ++i)
        for (std::size_t j = 0; j < p.cols(); ++j)
            if (i != j) s += p(i, j);
    return s;
}

/// Central-difference gradient of tsne_loss with respect to every embedding coordinate.
std::vector<Vector> fd_tsne_gradient(const PairwiseAffinity& p, std::vector<Vector> y) {
    std::vector<Vector> g(y.size(), Vector(y[0].size()));
    const double h = 1e-6;
    for (std::size_t i = 0; i < y.size(); ++i)
        for (std::size_t k = 0; k < y[i].size(); ++k) {
            const double saved = y[i][k];
            y[i][k] = saved + h;
            const double up = tsne_loss(p, y);
            y[i][k] = saved - h;
            const double down = tsne_loss(p, y);
            y[i][k] = saved;
            g[i][k] = (up - down) / (2 * h);
        }
    return g;
}

Vector flat(const std::vector<Vector>& v) {
    Vector out;
    for (const auto& r : v) out.insert(out.end(), r.begin(), r.end());
    return out;
}

TEST(Affinities, TwoPointsAreForced) {
    const PairwiseAffinity p = tsne_affinities(std::vector<Vector>{{0.0}, {3.0}}, 1.0);
    EXPECT_EQ(p.p(0, 1), 0.5);
    EXPECT_EQ(p.p(1, 0), 0.5);
    EXPECT_EQ(p.p(0, 0), 0.0);
}

TEST(Affinities, EquidistantPointsAreUniform) {
    const double s = std::sqrt(3.0) / 2.0;
    const PairwiseAffinity p = tsne_affinities(std::vector<Vector>{{0, 0}, {1, 0}, {0.5, s}}, 2.0);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            if (i != j) EXPECT_NEAR(p.p(i, j), 1.0 / 6.0, 1e-12);
}

TEST(Affinities, SymmetricNormalizedAndOnTarget) {
    Rng rng(1);
    const std::vector<Vector> data = random_points(rng, 60, 5);
    const PairwiseAffinity p = tsne_affinities(data, 10.0);
    EXPECT_NEAR(off_diagonal_sum(p.p), 1.0, 1e-9);
    for (std::size_t i = 0; i < 60; ++i) {
        EXPECT_EQ(p.p(i, i), 0.0);
        EXPECT_NEAR(p.perplexities[i], 10.0, 1e-4);
        EXPECT_GT(p.sigmas[i], 0.0);
        for (std::size_t j = 0; j < 60; ++j) {
            EXPECT_EQ(p.p(i, j), p.p(j, i));
            EXPECT_GE(p.p(i, j), 0.0);
        }
    }
}

TEST(Affinities, ShippedIrisReachesTargetPerplexity) {
    const Dataset iris = load_csv(std::filesystem::path(ILIN_DATA_DIR) / "iris.csv", "species");
    const PairwiseAffinity p = tsne_affinities(iris.inputs, 15.0);
    for (double perp : p.perplexities) EXPECT_NEAR(perp, 15.0, 1e-4);
}

TEST(Affinities, RejectsDegenerateInputs) {
    EXPECT_THROW(tsne_affinities(std::vector<Vector>{{1.0}}, 0.5), ValidationError);
    EXPECT_THROW(tsne_affinities(std::vector<Vector>{{1.0}, {1.0}, {1.0}}, 2.0), NumericError);
    EXPECT_THROW(tsne_affinities(std::vector<Vector>{{1.0}, {2.0}, {3.0}}, 3.0), ValidationError);
}

TEST(TsneLoss, ZeroWhenQEqualsP) {
    // Build P from Q of a fixed embedding, so the KL divergence is zero.
    const std::vector<Vector> y{{0, 0}, {1, 0}, {0, 2}, {1, 1}};
    auto d2 = [&](std::size_t i, std::size_t j) {
        return std::pow(y[i][0] - y[j][0], 2) + std::pow(y[i][1] - y[j][1], 2);
    };
    PairwiseAffinity p{DenseMatrix(4, 4), Vector(4, 1.0), Vector(4, 0.0)};
    double z = 0.0;
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            if (i != j) z += std::exp(-d2(i, j));
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            if (i != j) p.p(i, j) = std::exp(-d2(i, j)) / z;
    EXPECT_NEAR(tsne_loss(p, y), 0.0, 1e-15);
}

TEST(TsneLoss, NonNegativeOnRandomInputs) {
    Rng rng(2);
    for (int t = 0; t < 10; ++t) {
        const PairwiseAffinity p = tsne_affinities(random_points(rng, 12, 3), 4.0);
        EXPECT_GE(tsne_loss(p, random_points(rng, 12, 2)), 0.0);
    }
}

TEST(TsneLoss, TwoPointsAlwaysZero) {
    const PairwiseAffinity p = tsne_affinities(std::vector<Vector>{{0.0}, {1.0}}, 1.0);
    EXPECT_NEAR(tsne_loss(p, std::vector<Vector>{{0, 0}, {5, -3}}), 0.0, 1e-15);
}

TEST(TsneLoss, IdenticalEmbeddingsAreDegenerate) {
    Rng rng(3);
    const PairwiseAffinity p = tsne_affinities(random_points(rng, 4, 3), 2.0);
    EXPECT_THROW(tsne_loss(p, std::vector<Vector>(4, Vector{1.0, 1.0})), NumericError);
}

TEST(TsneLoss, FarApartEmbeddingsStayFinite) {
    Rng rng(4);
    const PairwiseAffinity p = tsne_affinities(random_points(rng, 5, 3), 2.0);
    const double loss = tsne_loss(p, std::vector<Vector>{{0, 0}, {100, 0}, {0, 100}, {-100, 0}, {0, -100}});
    EXPECT_TRUE(std::isfinite(loss));
}

TEST(TsneGradient, MatchesFiniteDifferences) {
    Rng rng(5);
    for (int t = 0; t < 5; ++t) {
        const PairwiseAffinity p = tsne_affinities(random_points(rng, 5, 4), 2.5);
        const std::vector<Vector> y = random_points(rng, 5, 2);
        const TsneLossGradient g = tsne_loss_gradient(p, y);
        EXPECT_LE(testing::vector_relative_error(flat(g.grad), flat(fd_tsne_gradient(p, y))), 1e-5);
    }
}

Network tsne_net(std::uint64_t seed) {
    return network_from_template(R"({"version": 1, "kind": "network", "input_shape": [4], "layers": [
        {"type": "dense", "out": 8, "bias": true}, {"type": "activation", "kind": "relu"},
        {"type": "dense", "out": 2, "bias": true}]})",
                                 seed);
}

TEST(ParametricTsne, LossDecreasesAndProjectionIsLinearizable) {
    Rng rng(6);
    const std::vector<Vector> data = random_points(rng, 30, 4);
    TrainConfig cfg;
    cfg.loss = LossKind::tsne;
    cfg.epochs = 200;
    cfg.learning_rate = 0.05;
    cfg.perplexity = 5.0;
    const TsneTrainResult r = train_parametric_tsne(tsne_net(1), data, cfg);
    ASSERT_EQ(r.loss_log.size(), 201u);
    EXPECT_LT(r.loss_log.back(), r.loss_log.front());
    for (const auto& x : data) {
        const InstanceLinearization lin = linearize_instance(r.net, x);
        EXPECT_EQ(lin.w.rows(), 2u);
        EXPECT_EQ(lin.w.cols(), 4u);
        EXPECT_LE(max_abs_diff(lin.apply(x), forward(r.net, x).output), 1e-12);
    }
    // Deterministic.
    EXPECT_EQ(train_parametric_tsne(tsne_net(1), data, cfg).net, r.net);
}

TEST(ParametricTsne, ValidatesInputs) {
    Rng rng(7);
    const std::vector<Vector> data = random_points(rng, 10, 4);
    TrainConfig cfg;
    cfg.perplexity = 3.0;
    EXPECT_THROW(train_parametric_tsne(tsne_net(1), data, cfg), ValidationError);  // loss is cross_entropy
    cfg.loss = LossKind::tsne;
    Rng init(8);
    EXPECT_THROW(train_parametric_tsne(testing::mlp(init, {4, 3}), data, cfg), ValidationError);
}

}  // namespace
}  // namespace ilin
