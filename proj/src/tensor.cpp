// SPDX-License-Identifier: Apache-2.0
#include "ilin/tensor.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace ilin {

namespace {

void require_finite(std::span<const double> values, const char* what) {
    for (double v : values) {
        if (!std::isfinite(v)) throw NumericError(std::string(what) + ": non-finite value");
    }
}

std::string dims_str(std::size_t r, std::size_t c) {
    return std::to_string(r) + "x" + std::to_string(c);
}

}  // namespace

Shape::Shape(std::initializer_list<std::size_t> dims) : Shape(std::vector<std::size_t>(dims)) {}

Shape::Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
    if (dims_.empty()) throw ValidationError("shape must have at least one dimension");
    std::size_t n = 1;
    for (std::size_t d : dims_) {
        if (d == 0) throw ValidationError("shape " + str() + " has a zero extent");
        if (n > std::numeric_limits<std::size_t>::max() / d)
            throw ValidationError("shape " + str() + " overflows the index range");
        n *= d;
    }
    size_ = n;
}

std::string Shape::str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims_.size(); ++i) {
        if (i) os << ',';
        os << dims_[i];
    }
    os << ']';
    return os.str();
}

std::size_t flat_index(std::size_t c, std::size_t h, std::size_t w, const Shape& shape) {
    if (shape.rank() != 3) throw ShapeError("flat_index needs a [C,H,W] shape, got " + shape.str());
    const std::size_t C = shape[0], H = shape[1], W = shape[2];
    if (c >= C || h >= H || w >= W) {
        throw IndexError("coordinate (" + std::to_string(c) + "," + std::to_string(h) + "," +
                         std::to_string(w) + ") outside " + shape.str());
    }
    return c * H * W + h * W + w;
}

// ---------------------------------------------------------------------------
// DenseMatrix

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), values_(rows * cols, 0.0) {}

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, Vector values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows_ * cols_) {
        throw ShapeError("dense " + dims_str(rows_, cols_) + " needs " + std::to_string(rows_ * cols_) +
                         " values, got " + std::to_string(values_.size()));
    }
    require_finite(values_, "dense matrix");
}

DenseMatrix DenseMatrix::identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

DenseMatrix DenseMatrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    Vector values;
    values.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw ShapeError("ragged matrix literal");
        values.insert(values.end(), row.begin(), row.end());
    }
    return {r, c, std::move(values)};
}

// ---------------------------------------------------------------------------
// SparseRowMatrix

SparseRowMatrix::SparseRowMatrix(std::size_t rows, std::size_t cols, std::vector<std::size_t> row_offsets,
                                 std::vector<std::size_t> col_indices, Vector entries)
    : rows_(rows),
      cols_(cols),
      row_offsets_(std::move(row_offsets)),
      col_indices_(std::move(col_indices)),
      entries_(std::move(entries)) {
    if (row_offsets_.size() != rows_ + 1) throw ShapeError("row_offsets must have rows+1 entries");
    if (row_offsets_.front() != 0) throw ValidationError("row_offsets[0] must be 0");
    if (col_indices_.size() != entries_.size() || row_offsets_.back() != entries_.size())
        throw ShapeError("column index / entry count mismatch");
    for (std::size_t r = 0; r < rows_; ++r)
        if (row_offsets_[r + 1] < row_offsets_[r]) throw ValidationError("row_offsets decreases");
    for (std::size_t r = 0; r < rows_; ++r) {
        for (std::size_t k = row_offsets_[r]; k < row_offsets_[r + 1]; ++k) {
            if (col_indices_[k] >= cols_) throw IndexError("column index out of range");
            if (k > row_offsets_[r] && col_indices_[k] <= col_indices_[k - 1])
                throw ValidationError("column indices not strictly increasing in row " + std::to_string(r));
        }
    }
    require_finite(entries_, "sparse matrix");
}

SparseRowMatrix SparseRowMatrix::identity(std::size_t n) {
    std::vector<std::size_t> offsets(n + 1), cols(n);
    for (std::size_t i = 0; i < n; ++i) {
        offsets[i + 1] = i + 1;
        cols[i] = i;
    }
    return {n, n, std::move(offsets), std::move(cols), Vector(n, 1.0)};
}

SparseRowMatrix SparseRowMatrix::diagonal(std::span<const double> d) {
    const std::size_t n = d.size();
    std::vector<std::size_t> offsets(n + 1), cols(n);
    for (std::size_t i = 0; i < n; ++i) {
        offsets[i + 1] = i + 1;
        cols[i] = i;
    }
    return {n, n, std::move(offsets), std::move(cols), Vector(d.begin(), d.end())};
}

DenseMatrix SparseRowMatrix::to_dense() const {
    DenseMatrix m(rows_, cols_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t k = row_offsets_[r]; k < row_offsets_[r + 1]; ++k) m(r, col_indices_[k]) = entries_[k];
    return m;
}

SparseRowBuilder::SparseRowBuilder(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols) {
    row_offsets_.reserve(rows + 1);
}

void SparseRowBuilder::push(std::size_t col, double value) {
    if (col >= cols_) throw IndexError("sparse column " + std::to_string(col) + " >= " + std::to_string(cols_));
    if (col_indices_.size() > row_offsets_.back() && col <= col_indices_.back())
        throw ValidationError("sparse columns must be pushed in increasing order");
    col_indices_.push_back(col);
    entries_.push_back(value);
}

void SparseRowBuilder::end_row() {
    if (row_offsets_.size() > rows_) throw ShapeError("too many sparse rows");
    row_offsets_.push_back(col_indices_.size());
}

SparseRowMatrix SparseRowBuilder::build() && {
    return {rows_, cols_, std::move(row_offsets_), std::move(col_indices_), std::move(entries_)};
}

// ---------------------------------------------------------------------------
// Products

Vector matvec(const DenseMatrix& m, std::span<const double> v) {
    if (v.size() != m.cols())
        throw ShapeError("matvec: matrix " + dims_str(m.rows(), m.cols()) + " vs vector " + std::to_string(v.size()));
    Vector out(m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const auto row = m.row(r);
        double acc = 0.0;
        for (std::size_t c = 0; c < row.size(); ++c) acc += row[c] * v[c];
        out[r] = acc;
    }
    return out;
}

Vector matvec(const SparseRowMatrix& m, std::span<const double> v) {
    if (v.size() != m.cols())
        throw ShapeError("matvec: matrix " + dims_str(m.rows(), m.cols()) + " vs vector " + std::to_string(v.size()));
    const auto& off = m.row_offsets();
    const auto& cols = m.col_indices();
    const auto& e = m.entries();
    Vector out(m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        double acc = 0.0;
        for (std::size_t k = off[r]; k < off[r + 1]; ++k) acc += e[k] * v[cols[k]];
        out[r] = acc;
    }
    return out;
}

DenseMatrix compose(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols() != b.rows())
        throw ShapeError("compose: " + dims_str(a.rows(), a.cols()) + " * " + dims_str(b.rows(), b.cols()));
    DenseMatrix out(a.rows(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* dst = out.row(i).data();
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double s = a(i, k);
            if (s == 0.0) continue;
            const double* src = b.row(k).data();
            for (std::size_t j = 0; j < n; ++j) dst[j] += s * src[j];
        }
    }
    return out;
}

DenseMatrix compose(const DenseMatrix& a, const SparseRowMatrix& b) {
    if (a.cols() != b.rows())
        throw ShapeError("compose: " + dims_str(a.rows(), a.cols()) + " * " + dims_str(b.rows(), b.cols()));
    DenseMatrix out(a.rows(), b.cols());
    const auto& off = b.row_offsets();
    const auto& cols = b.col_indices();
    const auto& e = b.entries();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double s = a(i, k);
            if (s == 0.0) continue;
            for (std::size_t p = off[k]; p < off[k + 1]; ++p) out(i, cols[p]) += s * e[p];
        }
    }
    return out;
}

DenseMatrix compose(const SparseRowMatrix& a, const DenseMatrix& b) {
    if (a.cols() != b.rows())
        throw ShapeError("compose: " + dims_str(a.rows(), a.cols()) + " * " + dims_str(b.rows(), b.cols()));
    DenseMatrix out(a.rows(), b.cols());
    const auto& off = a.row_offsets();
    const auto& cols = a.col_indices();
    const auto& e = a.entries();
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* dst = out.row(i).data();
        for (std::size_t p = off[i]; p < off[i + 1]; ++p) {
            const double s = e[p];
            const double* src = b.row(cols[p]).data();
            for (std::size_t j = 0; j < n; ++j) dst[j] += s * src[j];
        }
    }
    return out;
}

DenseMatrix scale_rows(DenseMatrix m, std::span<const double> lambda) {
    if (lambda.size() != m.rows()) throw ShapeError("scale_rows: lambda length != rows");
    require_finite(lambda, "scale_rows");
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (double& v : m.row(r)) v *= lambda[r];
    return m;
}

SparseRowMatrix scale_rows(SparseRowMatrix m, std::span<const double> lambda) {
    if (lambda.size() != m.rows()) throw ShapeError("scale_rows: lambda length != rows");
    require_finite(lambda, "scale_rows");
    const auto& off = m.row_offsets();
    auto& e = m.entries();
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t k = off[r]; k < off[r + 1]; ++k) e[k] *= lambda[r];
    return m;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("max_abs_diff: length mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

double max_abs(std::span<const double> v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

}  // namespace ilin
