// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ilin/model.hpp"

namespace ilin {

struct Dataset {
    std::vector<Vector> inputs;
    std::vector<std::size_t> labels;
    Shape input_shape;
    std::size_t num_classes = 0;
    /// Original label strings in index order (CSV datasets only).
    std::vector<std::string> label_names;

    [[nodiscard]] std::size_t size() const { return inputs.size(); }
    /// First `n` samples (or all of them).
    [[nodiscard]] Dataset head(std::size_t n) const;
};

/// Checks equal lengths, label range and finiteness.
void validate(const Dataset& ds);

/// Big-endian IDX pair (uncompressed). Pixels are scaled to [0, 1].
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Comma-separated file with a header row. Every column except `label_column`
/// is a numeric feature; labels map to dense indices in order of first appearance.
Dataset load_csv(const std::filesystem::path& path, const std::string& label_column);

/// Rows of numbers; a non-numeric first row is taken as a header and skipped.
std::vector<Vector> read_instances_csv(const std::filesystem::path& path);

/// Index of the maximum entry; ties go to the smallest index.
std::size_t argmax(std::span<const double> v);

/// Fraction of positions where the two prediction lists differ.
double lfr(std::span<const std::size_t> a, std::span<const std::size_t> b);

struct DecompositionReport {
    double acc_full = 0.0;
    double acc_wx = 0.0;
    double acc_b = 0.0;
    /// Flip rates of argmax(W x) and argmax(b) against argmax F(x).
    double lfr_wx = 0.0;
    double lfr_b = 0.0;
    std::size_t n = 0;
};

struct DecompositionPredictions {
    std::vector<std::size_t> full, wx, b;
};

DecompositionReport decompose_eval(const Network& net, const Dataset& ds, DecompositionPredictions* preds = nullptr);
DecompositionReport decompose_eval(const Ensemble& ens, const Dataset& ds, DecompositionPredictions* preds = nullptr);

/// Fixed-point rendering with half-away-from-zero rounding applied to the
/// shortest decimal form of `value` (so 0.98155 gives 0.9816).
std::string format_fixed(double value, int decimals);

std::string report_header();
/// One tab-separated row: name, acc_wx, lfr_wx, acc_b, lfr_b, acc_full.
std::string report_row(const DecompositionReport& report, const std::string& model_name);
/// Header line followed by one row.
std::string report_table(const DecompositionReport& report, const std::string& model_name);

}  // namespace ilin
