// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <fstream>

#include "ilin/experiments.hpp"
#include "ilin/model_io.hpp"
#include "support.hpp"

namespace ilin {
namespace {

void put_be32(std::string& s, std::uint32_t v) {
    for (int shift = 24; shift >= 0; shift -= 8) s.push_back(static_cast<char>((v >> shift) & 0xFF));
}

/// Writes an IDX pair of n 2x3 images whose pixel k of image i is (i + k) * 10.
void write_idx(const testing::TempDir& dir, std::uint32_t n, std::uint32_t image_magic = 0x803) {
    std::string img, lab;
    put_be32(img, image_magic);
    put_be32(img, n);
    put_be32(img, 2);
    put_be32(img, 3);
    put_be32(lab, 0x801);
    put_be32(lab, n);
    for (std::uint32_t i = 0; i < n; ++i) {
        for (std::uint32_t k = 0; k < 6; ++k) img.push_back(static_cast<char>((i + k) * 10));
        lab.push_back(static_cast<char>(i % 3));
    }
    write_file_atomic(dir / "img", img);
    write_file_atomic(dir / "lab", lab);
}

TEST(Idx, LoadsScaledPixelsAndLabels) {
    testing::TempDir dir("idx");
    write_idx(dir, 4);
    const Dataset ds = load_idx(dir / "img", dir / "lab");
    ASSERT_EQ(ds.size(), 4u);
    EXPECT_EQ(ds.input_shape, (Shape{1, 2, 3}));
    EXPECT_EQ(ds.num_classes, 3u);
    EXPECT_EQ(ds.labels, (std::vector<std::size_t>{0, 1, 2, 0}));
    EXPECT_DOUBLE_EQ(ds.inputs[1][2], 30.0 / 255.0);
    EXPECT_EQ(ds.head(2).size(), 2u);
}

TEST(Idx, RejectsWrongMagic) {
    testing::TempDir dir("idx");
    write_idx(dir, 2, 0x802);
    EXPECT_THROW(load_idx(dir / "img", dir / "lab"), ParseError);
    // Swapped files fail the magic check too.
    write_idx(dir, 2);
    EXPECT_THROW(load_idx(dir / "lab", dir / "img"), ParseError);
}

TEST(Idx, RejectsTruncationAndCountMismatch) {
    testing::TempDir dir("idx");
    write_idx(dir, 3);
    std::string img = read_file(dir / "img");
    write_file_atomic(dir / "short", img.substr(0, img.size() - 1));
    EXPECT_THROW(load_idx(dir / "short", dir / "lab"), ParseError);
    std::string lab = read_file(dir / "lab");
    lab[7] = 2;  // label count 3 -> 2
    write_file_atomic(dir / "lab2", lab);
    EXPECT_THROW(load_idx(dir / "img", dir / "lab2"), ParseError);
    EXPECT_THROW(load_idx(dir / "missing", dir / "lab"), IoError);
}

TEST(Csv, LoadsFeaturesAndLabelsInFirstAppearanceOrder) {
    testing::TempDir dir("csv");
    write_file_atomic(dir / "d.csv", "a,kind,b\n1,y,2\n3,x,4\n5,y,6\n");
    const Dataset ds = load_csv(dir / "d.csv", "kind");
    EXPECT_EQ(ds.input_shape, (Shape{2}));
    EXPECT_EQ(ds.inputs[1], (Vector{3, 4}));
    EXPECT_EQ(ds.labels, (std::vector<std::size_t>{0, 1, 0}));
    EXPECT_EQ(ds.label_names, (std::vector<std::string>{"y", "x"}));
    EXPECT_THROW(load_csv(dir / "d.csv", "species"), ParseError);
    write_file_atomic(dir / "bad.csv", "a,kind\nfoo,y\n");
    EXPECT_THROW(load_csv(dir / "bad.csv", "kind"), ParseError);
}

TEST(Csv, ShippedIrisHasFourFeaturesAndThreeClasses) {
    const Dataset ds = load_csv(std::filesystem::path(ILIN_DATA_DIR) / "iris.csv", "species");
    EXPECT_EQ(ds.size(), 150u);
    EXPECT_EQ(ds.input_shape, (Shape{4}));
    EXPECT_EQ(ds.num_classes, 3u);
}

TEST(Csv, InstancesSkipANonNumericHeader) {
    testing::TempDir dir("inst");
    write_file_atomic(dir / "x.csv", "f0,f1\n1,2\n3.5,-4\n");
    EXPECT_EQ(read_instances_csv(dir / "x.csv"), (std::vector<Vector>{{1, 2}, {3.5, -4}}));
    write_file_atomic(dir / "y.csv", "1,2\n3,4\n");
    EXPECT_EQ(read_instances_csv(dir / "y.csv").size(), 2u);
    write_file_atomic(dir / "z.csv", "1,2\n3\n");
    EXPECT_THROW(read_instances_csv(dir / "z.csv"), ParseError);
}

TEST(Argmax, TiesGoToTheSmallestIndex) {
    EXPECT_EQ(argmax(Vector{1, 3, 3, 2}), 1u);
    EXPECT_EQ(argmax(Vector{-1}), 0u);
    EXPECT_THROW(argmax(Vector{}), ShapeError);
}

TEST(Lfr, FractionOfDisagreements) {
    const std::vector<std::size_t> a{1, 2, 3, 4}, b{1, 0, 3, 0};
    EXPECT_EQ(lfr(a, b), 0.5);
    EXPECT_EQ(lfr(a, a), 0.0);
}

TEST(FormatFixed, HalfAwayFromZeroOnTheShortestDecimal) {
    EXPECT_EQ(format_fixed(0.98155, 4), "0.9816");
    EXPECT_EQ(format_fixed(0.12345, 4), "0.1235");
    EXPECT_EQ(format_fixed(0.99996, 4), "1.0000");
    EXPECT_EQ(format_fixed(-0.00004, 4), "0.0000");
    EXPECT_EQ(format_fixed(-0.25, 1), "-0.3");
    EXPECT_EQ(format_fixed(0.0, 4), "0.0000");
    EXPECT_EQ(format_fixed(1.0, 4), "1.0000");
}

TEST(Report, HeaderAndRow) {
    EXPECT_EQ(report_header(), "model\tacc_wx\tlfr_wx\tacc_b\tlfr_b\tacc_full");
    DecompositionReport r{0.982, 0.9794, 0.1828, 0.00355, 0.8, 1000};
    EXPECT_EQ(report_row(r, "lenet"), "lenet\t0.9794\t0.0036\t0.1828\t0.8000\t0.9820");
    EXPECT_EQ(report_table(r, "m"), report_header() + "\n" + report_row(r, "m") + "\n");
}

Dataset toy_dataset(Rng& rng, std::size_t n, std::size_t dim, std::size_t classes) {
    Dataset ds;
    ds.input_shape = Shape{dim};
    ds.num_classes = classes;
    for (std::size_t i = 0; i < n; ++i) {
        ds.inputs.push_back(rng.uniform_vector(dim, -1, 1));
        ds.labels.push_back(rng.below(classes));
    }
    return ds;
}

TEST(Decompose, ConsistentPredictions) {
    Rng rng(1);
    const Network net = testing::mlp(rng, {5, 10, 3});
    const Dataset ds = toy_dataset(rng, 40, 5, 3);
    DecompositionPredictions preds;
    const DecompositionReport r = decompose_eval(net, ds, &preds);
    EXPECT_EQ(r.n, 40u);
    std::size_t full_hits = 0, wx_flips = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const Vector fx = forward(net, ds.inputs[i]).output;
        EXPECT_EQ(preds.full[i], argmax(fx));
        full_hits += preds.full[i] == ds.labels[i];
        wx_flips += preds.wx[i] != preds.full[i];
    }
    EXPECT_DOUBLE_EQ(r.acc_full, full_hits / 40.0);
    EXPECT_DOUBLE_EQ(r.lfr_wx, wx_flips / 40.0);
}

TEST(Decompose, BiasFreeModelHasNoFlips) {
    Rng rng(2);
    const Network net = testing::mlp(rng, {5, 10, 3}, ActivationKind::relu, false);
    const Dataset ds = toy_dataset(rng, 50, 5, 3);
    const DecompositionReport r = decompose_eval(net, ds);
    EXPECT_EQ(r.lfr_wx, 0.0);
    EXPECT_EQ(r.acc_wx, r.acc_full);
    EXPECT_EQ(format_fixed(r.lfr_wx, 4), "0.0000");
}

TEST(Decompose, EnsembleMatchesMemberwiseSum) {
    Rng rng(3);
    const Ensemble ens{{testing::mlp(rng, {4, 6, 3}), testing::mlp(rng, {4, 6, 3})}, {0.5, 0.5}};
    const Dataset ds = toy_dataset(rng, 20, 4, 3);
    DecompositionPredictions preds;
    decompose_eval(ens, ds, &preds);
    for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_EQ(preds.full[i], argmax(forward_ensemble(ens, ds.inputs[i])));
}

TEST(Decompose, RejectsClassCountMismatch) {
    Rng rng(4);
    const Network net = testing::mlp(rng, {4, 2});
    const Dataset ds = toy_dataset(rng, 5, 4, 3);
    EXPECT_THROW(decompose_eval(net, ds), ValidationError);
}

}  // namespace
}  // namespace ilin
