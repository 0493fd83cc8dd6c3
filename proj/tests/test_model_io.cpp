// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <bit>
#include <filesystem>

#include "ilin/model_io.hpp"
#include "ilin/trainer.hpp"
#include "support.hpp"

namespace ilin {
namespace {

Network awkward_values_network() {
    Rng rng(17);
    Network net = testing::mixed_network(rng, ActivationKind::leaky_relu, 6, 2, 3);
    // Values whose shortest decimal form is long or sits near the edges of the double range.
    auto& dense = std::get<Dense>(net.layers.back());
    dense.weight(0, 0) = 0.1;
    dense.weight(0, 1) = 1.0 / 3.0;
    dense.weight(1, 0) = 5e-324;
    dense.weight(1, 1) = -1.7976931348623157e308;
    dense.weight(2, 0) = -0.0;
    return net;
}

TEST(ModelJson, RoundTripIsBitExact) {
    const Network net = awkward_values_network();
    const std::string text = model_to_json(net);
    const Model back = model_from_json(text);
    ASSERT_TRUE(std::holds_alternative<Network>(back));
    const Network& got = std::get<Network>(back);
    EXPECT_EQ(flat_parameters(got).size(), flat_parameters(net).size());
    const Vector a = flat_parameters(net), b = flat_parameters(got);
    for (std::size_t i = 0; i < a.size(); ++i)
        EXPECT_EQ(std::bit_cast<std::uint64_t>(a[i]), std::bit_cast<std::uint64_t>(b[i])) << i;
    EXPECT_EQ(got, net);
    EXPECT_EQ(model_to_json(back), text);
}

TEST(ModelJson, EnsembleRoundTrip) {
    Rng rng(3);
    const Ensemble ens{{testing::mlp(rng, {4, 3, 2}), testing::mlp(rng, {4, 5, 2})}, {0.3, 0.7}};
    const Model back = model_from_json(model_to_json(ens));
    ASSERT_TRUE(std::holds_alternative<Ensemble>(back));
    EXPECT_EQ(std::get<Ensemble>(back), ens);
}

TEST(ModelJson, SaveAndLoadFile) {
    testing::TempDir dir("io");
    const Network net = awkward_values_network();
    save_model(net, dir / "m.json");
    EXPECT_EQ(load_network(dir / "m.json"), net);
    // No temporary file is left behind by the atomic write.
    std::size_t files = 0;
    for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir.path())) ++files;
    EXPECT_EQ(files, 1u);
}

TEST(ModelJson, RejectsUnknownVersion) {
    EXPECT_THROW(model_from_json(R"({"version": 2, "kind": "network", "input_shape": [1], "layers": []})"),
                 ParseError);
}

TEST(ModelJson, MalformedJsonReportsByteOffset) {
    try {
        model_from_json("{\"version\": 1,");
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find("byte"), std::string::npos) << e.what();
    }
}

TEST(ModelJson, ErrorsCarryAJsonPath) {
    const std::string text = R"({"version": 1, "kind": "network", "input_shape": [3],
        "layers": [{"type": "dense", "out": 2, "weight": [1, 2, 3, 4, 5, 6]},
                   {"type": "activation", "kind": "swish"}]})";
    try {
        model_from_json(text);
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find("$.layers[1]"), std::string::npos) << e.what();
    }
}

TEST(ModelJson, WrongWeightLengthIsValidationError) {
    const std::string text = R"({"version": 1, "kind": "network", "input_shape": [3],
        "layers": [{"type": "dense", "out": 2, "weight": [1, 2, 3]}]})";
    EXPECT_THROW(model_from_json(text), ValidationError);
}

TEST(ModelJson, MissingWeightsNeedAnInitializer) {
    const std::string text = R"({"version": 1, "kind": "network", "input_shape": [3],
        "layers": [{"type": "dense", "out": 2, "bias": true}]})";
    EXPECT_THROW(model_from_json(text), ParseError);
    const Network net = network_from_template(text, 9);
    const auto& d = std::get<Dense>(net.layers[0]);
    ASSERT_TRUE(d.bias.has_value());
    EXPECT_EQ(*d.bias, (Vector{0.0, 0.0}));
    const double limit = std::sqrt(6.0 / 5.0);
    for (double w : d.weight.values()) {
        EXPECT_LE(std::abs(w), limit);
    }
    // Same seed, same weights.
    EXPECT_EQ(network_from_template(text, 9), net);
    EXPECT_NE(network_from_template(text, 10), net);
}

TEST(ModelJson, ShippedTemplatesLoad) {
    for (const char* name : {"lenet300.template.json", "tsne_iris.template.json", "toy_cnn.template.json"}) {
        const std::filesystem::path p = std::filesystem::path(ILIN_SOURCE_DIR) / "models" / name;
        EXPECT_NO_THROW(load_template(p, 1)) << name;
    }
}

TEST(ReadFile, MissingFileIsIoError) {
    EXPECT_THROW(read_file("/nonexistent/ilin/model.json"), IoError);
}

}  // namespace
}  // namespace ilin
