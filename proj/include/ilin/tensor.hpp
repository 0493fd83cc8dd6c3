// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "ilin/errors.hpp"

namespace ilin {

using Vector = std::vector<double>;

/// Ordered list of positive extents, e.g. [channels, height, width].
class Shape {
public:
    Shape() = default;
    Shape(std::initializer_list<std::size_t> dims);
    explicit Shape(std::vector<std::size_t> dims);

    [[nodiscard]] const std::vector<std::size_t>& dims() const { return dims_; }
    [[nodiscard]] std::size_t rank() const { return dims_.size(); }
    [[nodiscard]] std::size_t operator[](std::size_t i) const { return dims_.at(i); }
    /// Product of all extents.
    [[nodiscard]] std::size_t size() const { return size_; }
    [[nodiscard]] std::string str() const;

    friend bool operator==(const Shape&, const Shape&) = default;

private:
    std::vector<std::size_t> dims_;
    std::size_t size_ = 0;
};

/// Flat position of element (c, h, w) in a [C, H, W] tensor.
///
/// Channel-major, then row-major over the spatial plane. Every layer
/// rewrite goes through this function so that the matrices agree on
/// one flattening.
std::size_t flat_index(std::size_t c, std::size_t h, std::size_t w, const Shape& shape);

/// Row-major dense matrix of doubles.
class DenseMatrix {
public:
    DenseMatrix() = default;
    /// Zero-filled rows x cols matrix.
    DenseMatrix(std::size_t rows, std::size_t cols);
    /// Takes ownership of row-major values; rejects wrong length or non-finite entries.
    DenseMatrix(std::size_t rows, std::size_t cols, Vector values);

    static DenseMatrix identity(std::size_t n);
    static DenseMatrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

    [[nodiscard]] std::size_t rows() const { return rows_; }
    [[nodiscard]] std::size_t cols() const { return cols_; }
    [[nodiscard]] double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
    double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
    [[nodiscard]] std::span<const double> row(std::size_t r) const {
        return {values_.data() + r * cols_, cols_};
    }
    std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
    [[nodiscard]] const Vector& values() const { return values_; }
    Vector& values() { return values_; }

    friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    Vector values_;
};

/// Compressed sparse row matrix.
class SparseRowMatrix {
public:
    SparseRowMatrix() = default;
    /// Validates the CSR invariants: offsets start at 0 and never decrease,
    /// columns strictly increase within a row and stay below `cols`,
    /// entries are finite.
    SparseRowMatrix(std::size_t rows, std::size_t cols, std::vector<std::size_t> row_offsets,
                    std::vector<std::size_t> col_indices, Vector entries);

    static SparseRowMatrix identity(std::size_t n);
    static SparseRowMatrix diagonal(std::span<const double> d);

    [[nodiscard]] std::size_t rows() const { return rows_; }
    [[nodiscard]] std::size_t cols() const { return cols_; }
    [[nodiscard]] std::size_t nonzeros() const { return entries_.size(); }
    [[nodiscard]] const std::vector<std::size_t>& row_offsets() const { return row_offsets_; }
    [[nodiscard]] const std::vector<std::size_t>& col_indices() const { return col_indices_; }
    [[nodiscard]] const Vector& entries() const { return entries_; }
    Vector& entries() { return entries_; }

    [[nodiscard]] DenseMatrix to_dense() const;

    friend bool operator==(const SparseRowMatrix&, const SparseRowMatrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<std::size_t> row_offsets_{0};
    std::vector<std::size_t> col_indices_;
    Vector entries_;
};

/// Row-by-row CSR construction. Columns must be pushed in increasing order.
class SparseRowBuilder {
public:
    SparseRowBuilder(std::size_t rows, std::size_t cols);

    void push(std::size_t col, double value);
    void end_row();
    [[nodiscard]] SparseRowMatrix build() &&;

private:
    std::size_t rows_;
    std::size_t cols_;
    std::vector<std::size_t> row_offsets_{0};
    std::vector<std::size_t> col_indices_;
    Vector entries_;
};

Vector matvec(const DenseMatrix& m, std::span<const double> v);
Vector matvec(const SparseRowMatrix& m, std::span<const double> v);

/// a * b, materialized dense.
DenseMatrix compose(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix compose(const DenseMatrix& a, const SparseRowMatrix& b);
DenseMatrix compose(const SparseRowMatrix& a, const DenseMatrix& b);

/// Row i multiplied by lambda[i].
DenseMatrix scale_rows(DenseMatrix m, std::span<const double> lambda);
SparseRowMatrix scale_rows(SparseRowMatrix m, std::span<const double> lambda);

/// Largest absolute entry of a - b.
double max_abs_diff(std::span<const double> a, std::span<const double> b);
double max_abs(std::span<const double> v);

}  // namespace ilin
