// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "ilin/model.hpp"
#include "support.hpp"

namespace ilin {
namespace {

using testing::act;

TEST(Activation, KnownValues) {
    EXPECT_EQ(activate(act(ActivationKind::relu), -2.0), 0.0);
    EXPECT_EQ(activate(act(ActivationKind::relu), 3.0), 3.0);
    EXPECT_DOUBLE_EQ(activate(act(ActivationKind::leaky_relu, 0.1), -2.0), -0.2);
    EXPECT_DOUBLE_EQ(activate(act(ActivationKind::elu), -1.0), std::expm1(-1.0));
    EXPECT_NEAR(activate(act(ActivationKind::selu), -1.0), -1.1113307378125625, 1e-15);
    EXPECT_DOUBLE_EQ(activate(act(ActivationKind::selu), 2.0), 2.0 * kSeluScale);
    EXPECT_NEAR(activate(act(ActivationKind::gelu), 1.0), 0.8413447460685429, 1e-15);
    EXPECT_EQ(activate(act(ActivationKind::gelu), 0.0), 0.0);
}

TEST(Activation, ReluDerivativeAtZeroIsZero) {
    EXPECT_EQ(activate_derivative(act(ActivationKind::relu), 0.0), 0.0);
    EXPECT_EQ(activate_derivative(act(ActivationKind::relu), 1e-300), 1.0);
}

TEST(Activation, DerivativeMatchesFiniteDifferences) {
    const ActivationKind kinds[] = {ActivationKind::relu, ActivationKind::leaky_relu, ActivationKind::elu,
                                    ActivationKind::selu, ActivationKind::gelu};
    for (ActivationKind k : kinds) {
        const Activation a = act(k);
        for (double z : {-2.3, -0.7, 0.4, 1.9}) {
            const double h = 1e-6;
            const double fd = (activate(a, z + h) - activate(a, z - h)) / (2 * h);
            EXPECT_NEAR(activate_derivative(a, z), fd, 1e-8) << static_cast<int>(k) << " at " << z;
        }
    }
}

TEST(Forward, ConvKnownValues) {
    // 1x3x3 input, one 2x2 kernel of ones, stride 1: each output sums a window.
    Conv2D c;
    c.in_channels = c.out_channels = 1;
    c.kernel_h = c.kernel_w = 2;
    c.kernels = {1, 1, 1, 1};
    c.bias = Vector{0.5};
    const Vector x{1, 2, 3, 4, 5, 6, 7, 8, 9};
    const Vector y = forward_layer(c, Shape{1, 3, 3}, x, nullptr);
    EXPECT_EQ(y, (Vector{12.5, 16.5, 24.5, 28.5}));
}

TEST(Forward, ConvPaddingReadsZeros) {
    Conv2D c;
    c.in_channels = c.out_channels = 1;
    c.kernel_h = c.kernel_w = 3;
    c.kernels = Vector(9, 1.0);
    c.padding = 1;
    const Vector y = forward_layer(c, Shape{1, 2, 2}, Vector{1, 2, 3, 4}, nullptr);
    EXPECT_EQ(y, (Vector{10, 10, 10, 10}));
}

TEST(Forward, MaxPoolTiesPickSmallestIndex) {
    LayerTrace trace;
    const Vector y = forward_layer(MaxPool2D{2, 2}, Shape{1, 2, 2}, Vector{5, 5, 5, 5}, &trace);
    EXPECT_EQ(y, Vector{5});
    ASSERT_EQ(trace.selected.size(), 1u);
    EXPECT_EQ(trace.selected[0], 0u);
}

TEST(Forward, MaxPoolRecordsArgmax) {
    LayerTrace trace;
    const Vector x{1, 9, 3, 4, 5, 6, 7, 8, 2, 0, 1, 1, 3, 3, 4, 0};
    const Vector y = forward_layer(MaxPool2D{2, 2}, Shape{1, 4, 4}, x, &trace);
    EXPECT_EQ(y, (Vector{9, 8, 3, 4}));
    EXPECT_EQ(trace.selected, (std::vector<std::size_t>{1, 7, 12, 14}));
}

TEST(Forward, AvgPoolAverages) {
    const Vector y = forward_layer(AvgPool2D{2, 2}, Shape{1, 2, 4}, Vector{1, 2, 3, 4, 5, 6, 7, 8}, nullptr);
    EXPECT_EQ(y, (Vector{3.5, 5.5}));
}

TEST(Forward, BatchNormFormula) {
    BatchNorm b{{2.0}, {1.0}, {3.0}, {4.0}, 0.0};
    const Vector y = forward_layer(b, Shape{1, 1, 2}, Vector{5.0, 1.0}, nullptr);
    EXPECT_EQ(y, (Vector{3.0, -1.0}));
}

TEST(Forward, ResidualAddsSkip) {
    Residual r;
    r.inner.push_back(Dense{DenseMatrix::from_rows({{2, 0}, {0, 3}}), Vector{1, 1}});
    Network net{Shape{2}, {r}};
    EXPECT_EQ(forward(net, Vector{1, 2}).output, (Vector{4, 9}));
}

TEST(Forward, RejectsWrongLengthAndNonFiniteInput) {
    Rng rng(1);
    const Network net = testing::mlp(rng, {3, 4, 2});
    EXPECT_THROW(forward(net, Vector{1, 2}), ShapeError);
    EXPECT_THROW(forward(net, Vector{1, std::nan(""), 3}), NumericError);
}

TEST(Forward, NonFiniteOutputNamesTheLayer) {
    Network net{Shape{1}, {Dense{DenseMatrix::from_rows({{1e308}}), std::nullopt}, Dense{DenseMatrix::from_rows({{10}}), std::nullopt}}};
    try {
        forward(net, Vector{10.0});
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("layer 0"), std::string::npos) << e.what();
    }
}

TEST(Shapes, InferenceThroughMixedNetwork) {
    Rng rng(2);
    const Network net = testing::mixed_network(rng, ActivationKind::relu, 8, 1, 10);
    const std::vector<Shape> shapes = infer_shapes(net);
    EXPECT_EQ(shapes[0], (Shape{3, 8, 8}));
    EXPECT_EQ(shapes[3], (Shape{3, 4, 4}));
    EXPECT_EQ(shapes[5], (Shape{48}));
    EXPECT_EQ(shapes.back(), (Shape{10}));
    EXPECT_NO_THROW(validate(net));
}

TEST(Shapes, ErrorsNameTheLayer) {
    Rng rng(3);
    Network net{Shape{1, 4, 4}, {testing::random_dense(rng, 16, 4)}};
    try {
        validate(net);
        FAIL() << "expected ValidationError";
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("layer 0 (dense)"), std::string::npos) << e.what();
    }
}

TEST(Shapes, ResidualMustPreserveShape) {
    Rng rng(4);
    Residual r;
    r.inner.push_back(testing::random_dense(rng, 4, 3));
    Network net{Shape{4}, {r}};
    EXPECT_THROW(validate(net), ValidationError);
}

TEST(Shapes, OutputMustBeFlat) {
    Network net{Shape{1, 4, 4}, {MaxPool2D{2, 2}}};
    EXPECT_THROW(validate(net), ValidationError);
}

TEST(Ensemble, WeightedSumOfMembers) {
    Rng rng(5);
    Ensemble ens{{testing::mlp(rng, {3, 4, 2}), testing::mlp(rng, {3, 5, 2})}, {0.25, 0.75}};
    const Vector x{0.1, -0.2, 0.3};
    const Vector a = forward(ens.members[0], x).output, b = forward(ens.members[1], x).output;
    const Vector y = forward_ensemble(ens, x);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(y[i], 0.25 * a[i] + 0.75 * b[i], 1e-15);
    ens.shares.pop_back();
    EXPECT_THROW(validate(ens), ValidationError);
}

}  // namespace
}  // namespace ilin
