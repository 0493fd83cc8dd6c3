// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <numeric>

#include "ilin/attribute.hpp"
#include "ilin/model_io.hpp"
#include "support.hpp"

namespace ilin {
namespace {

double sum(const Vector& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

TEST(Attribution, CompletenessOnRandomNetworks) {
    Rng rng(1);
    for (ActivationKind k : {ActivationKind::relu, ActivationKind::gelu}) {
        const Network net = testing::mixed_network(rng, k, 8, 1, 4);
        const Vector x = testing::random_vector(rng, net.input_size());
        const InstanceLinearization lin = linearize_instance(net, x);
        const Vector fx = forward(net, x).output;
        for (std::size_t c = 0; c < 4; ++c) {
            const AttributionMap m = attribution(lin, x, c);
            EXPECT_NEAR(sum(m.contributions) + m.bias_share, m.logit, 1e-12);
            EXPECT_NEAR(m.logit, fx[c], 1e-9 * (1 + std::abs(fx[c])));
        }
        EXPECT_THROW(attribution(lin, x, 4), IndexError);
    }
}

TEST(Attribution, ContributionIsWeightTimesInput) {
    Network net{Shape{3}, {Dense{DenseMatrix::from_rows({{1, -2, 3}}), Vector{0.5}}}};
    const Vector x{2, 1, -1};
    const AttributionMap m = attribution(linearize_instance(net, x), x, 0);
    EXPECT_EQ(m.contributions, (Vector{2, -2, -3}));
    EXPECT_EQ(m.bias_share, 0.5);
    EXPECT_EQ(m.logit, -2.5);
}

TEST(Neurons, DownstreamContributionsSumToTheLogit) {
    Rng rng(2);
    const Network net = testing::mlp(rng, {5, 12, 8, 3});
    const Vector x = testing::random_vector(rng, 5);
    const double logit = forward(net, x).output[2];
    for (std::size_t layer = 0; layer < net.layers.size(); ++layer) {
        const LayerContributions lc = layer_contributions(net, x, layer, 2);
        EXPECT_NEAR(sum(lc.contributions) + lc.suffix_bias, logit, 1e-12) << layer;
    }
    EXPECT_THROW(layer_contributions(net, x, net.layers.size(), 0), IndexError);
}

TEST(Neurons, NeuronMapReconstructsItsActivation) {
    Rng rng(3);
    const Network net = testing::mixed_network(rng);
    const Vector x = testing::random_vector(rng, net.input_size());
    const auto outs = forward_layers(net, x);
    for (std::size_t n = 0; n < 6; ++n) {
        const NeuronAttribution na = neuron_attribution(net, x, 4, n, 0);
        EXPECT_NEAR(sum(na.map.contributions) + na.map.bias_share, outs[4][n], 1e-12);
        EXPECT_EQ(na.activation_value, outs[4][n]);
    }
}

TEST(Neurons, TopKOrderingAndClamping) {
    Rng rng(4);
    const Network net = testing::mlp(rng, {6, 20, 4});
    const Vector x = testing::random_vector(rng, 6);
    const TopNeurons top = top_k_neurons(net, x, 1, 5, 0);
    const LayerContributions lc = layer_contributions(net, x, 1, 0);
    ASSERT_FALSE(top.positive.empty());
    for (std::size_t i = 1; i < top.positive.size(); ++i)
        EXPECT_GE(top.positive[i - 1].downstream_contribution, top.positive[i].downstream_contribution);
    for (std::size_t i = 1; i < top.negative.size(); ++i)
        EXPECT_LE(top.negative[i - 1].downstream_contribution, top.negative[i].downstream_contribution);
    for (const auto& n : top.positive) EXPECT_GT(n.downstream_contribution, 0.0);
    for (const auto& n : top.negative) EXPECT_LT(n.downstream_contribution, 0.0);
    // The best positive neuron really is the maximum.
    EXPECT_EQ(top.positive[0].downstream_contribution, *std::max_element(lc.contributions.begin(), lc.contributions.end()));

    // A layer with fewer units than k returns what it has.
    const TopNeurons narrow = top_k_neurons(net, x, 2, 50, 0);
    EXPECT_LE(narrow.positive.size() + narrow.negative.size(), 4u);
    EXPECT_THROW(top_k_neurons(net, x, 1, 0, 0), ValidationError);
}

TEST(Gradients, VanillaGradientIsTheRowOfW) {
    Rng rng(5);
    const Network net = testing::mixed_network(rng);
    const Vector x = testing::random_vector(rng, net.input_size());
    const Vector g = vanilla_gradient(net, x, 3);
    const auto row = linearize_instance(net, x).w.row(3);
    EXPECT_EQ(g, Vector(row.begin(), row.end()));
}

TEST(Gradients, VanillaGradientForSmoothNetsIsTheJacobian) {
    Rng rng(6);
    const Network net = testing::mlp(rng, {4, 6, 2}, ActivationKind::gelu);
    const Vector x = testing::random_vector(rng, 4);
    const Vector g = vanilla_gradient(net, x, 1);
    const DenseMatrix j = jacobian_fd(net, x, 1e-5);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(g[i], j(1, i), 1e-12);
}

TEST(Gradients, IntegratedGradientsCompleteness) {
    Rng rng(7);
    // Smooth network: the midpoint rule converges, so the sum approaches F(x) - F(0).
    const Network net = testing::mlp(rng, {4, 8, 3}, ActivationKind::gelu);
    const Vector x = testing::random_vector(rng, 4);
    const Vector zero(4, 0.0);
    const Vector ig = integrated_gradients(net, x, zero, 256, 0);
    const double gap = forward(net, x).output[0] - forward(net, zero).output[0];
    EXPECT_NEAR(sum(ig), gap, 1e-4);
    // Affine network: IG equals the linear contributions exactly up to rounding.
    Network affine{Shape{3}, {Dense{DenseMatrix::from_rows({{1, -2, 3}}), Vector{7.0}}}};
    const Vector ig_affine = integrated_gradients(affine, Vector{1, 1, 1}, Vector(3, 0.0), 4, 0);
    EXPECT_EQ(ig_affine, (Vector{1, -2, 3}));
    EXPECT_THROW(integrated_gradients(net, x, zero, 0, 0), ValidationError);
}

TEST(Heatmap, PpmEncoding) {
    const std::string ppm = heatmap_ppm(Vector{1.0, -0.5, 0.0, -1.0}, 2, 2);
    const std::string header = "P6\n2 2\n255\n";
    ASSERT_EQ(ppm.size(), header.size() + 12);
    EXPECT_EQ(ppm.substr(0, header.size()), header);
    auto px = [&](std::size_t i) {
        return std::vector<int>{static_cast<unsigned char>(ppm[header.size() + 3 * i]),
                                static_cast<unsigned char>(ppm[header.size() + 3 * i + 1]),
                                static_cast<unsigned char>(ppm[header.size() + 3 * i + 2])};
    };
    EXPECT_EQ(px(0), (std::vector<int>{255, 0, 0}));
    EXPECT_EQ(px(1), (std::vector<int>{127, 127, 255}));  // s = round(127.5) = 128
    EXPECT_EQ(px(2), (std::vector<int>{255, 255, 255}));
    EXPECT_EQ(px(3), (std::vector<int>{0, 0, 255}));
}

TEST(Heatmap, AllZeroIsWhite) {
    const std::string ppm = heatmap_ppm(Vector(6, 0.0), 2, 3);
    for (std::size_t i = ppm.size() - 18; i < ppm.size(); ++i) EXPECT_EQ(static_cast<unsigned char>(ppm[i]), 255);
    EXPECT_THROW(heatmap_ppm(Vector(5, 0.0), 2, 3), ShapeError);
}

TEST(Heatmap, RenderSumsChannels) {
    testing::TempDir dir("heat");
    render_heatmap(Vector{1, 0, 0, 0, -1, 0, 0, 0}, Shape{2, 2, 2}, dir / "h.ppm");
    const std::string ppm = read_file(dir / "h.ppm");
    EXPECT_EQ(ppm.substr(0, 3), "P6\n");
    // Channel sum of pixel 0 is zero, so it is white.
    const std::size_t header = std::string("P6\n2 2\n255\n").size();
    EXPECT_EQ(static_cast<unsigned char>(ppm[header]), 255);
    EXPECT_EQ(static_cast<unsigned char>(ppm[header + 1]), 255);
}

TEST(Csv, ContributionsFormat) {
    EXPECT_EQ(contributions_csv(Vector{0.5, -0.1}), "index,contribution\n0,0.5\n1,-0.10000000000000001\n");
}

}  // namespace
}  // namespace ilin
