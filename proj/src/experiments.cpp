// SPDX-License-Identifier: Apache-2.0
#include "ilin/experiments.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "ilin/linearize.hpp"
#include "ilin/model_io.hpp"

namespace ilin {

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

std::uint32_t read_be32(const std::string& bytes, std::size_t offset, const std::string& file) {
    if (offset + 4 > bytes.size()) throw ParseError(file + ": truncated header");
    std::uint32_t v = 0;
    for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[offset + i]);
    return v;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r' || s.back() == '\n'))
        s.remove_suffix(1);
    return s;
}

std::vector<std::string_view> split_commas(std::string_view line) {
    std::vector<std::string_view> cells;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(',', start);
        cells.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return cells;
}

bool parse_double(std::string_view s, double& out) {
    if (s.empty()) return false;
    if (s.front() == '+') s.remove_prefix(1);
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && ptr == s.data() + s.size() && std::isfinite(out);
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!trim(line).empty()) lines.push_back(line);
    }
    return lines;
}

template <class Predict>
DecompositionReport decompose_with(const Dataset& ds, std::size_t out_dim, Predict&& predict,
                                   DecompositionPredictions* preds) {
    validate(ds);
    if (ds.size() == 0) throw ValidationError("decomposition needs a non-empty dataset");
    if (out_dim != ds.num_classes)
        throw ValidationError("model has " + std::to_string(out_dim) + " outputs, dataset has " +
                              std::to_string(ds.num_classes) + " classes");
    DecompositionPredictions p;
    p.full.reserve(ds.size());
    p.wx.reserve(ds.size());
    p.b.reserve(ds.size());
    std::size_t hit_full = 0, hit_wx = 0, hit_b = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto [full, wx, b] = predict(ds.inputs[i]);
        p.full.push_back(full);
        p.wx.push_back(wx);
        p.b.push_back(b);
        hit_full += full == ds.labels[i];
        hit_wx += wx == ds.labels[i];
        hit_b += b == ds.labels[i];
    }
    const double n = static_cast<double>(ds.size());
    DecompositionReport r;
    r.n = ds.size();
    r.acc_full = static_cast<double>(hit_full) / n;
    r.acc_wx = static_cast<double>(hit_wx) / n;
    r.acc_b = static_cast<double>(hit_b) / n;
    r.lfr_wx = lfr(p.full, p.wx);
    r.lfr_b = lfr(p.full, p.b);
    if (preds) *preds = std::move(p);
    return r;
}

struct Prediction {
    std::size_t full, wx, b;
};

Prediction predict_parts(const InstanceLinearization& lin, const Vector& output, const Vector& x) {
    return {argmax(output), argmax(matvec(lin.w, x)), argmax(lin.b)};
}

}  // namespace

Dataset Dataset::head(std::size_t n) const {
    Dataset d = *this;
    n = std::min(n, size());
    d.inputs.resize(n);
    d.labels.resize(n);
    return d;
}

void validate(const Dataset& ds) {
    if (ds.inputs.size() != ds.labels.size()) throw ValidationError("dataset inputs and labels differ in length");
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds.labels[i] >= ds.num_classes)
            throw ValidationError("label " + std::to_string(ds.labels[i]) + " >= class count " +
                                  std::to_string(ds.num_classes));
        if (ds.inputs[i].size() != ds.input_shape.size())
            throw ValidationError("sample " + std::to_string(i) + " does not match " + ds.input_shape.str());
        for (double v : ds.inputs[i])
            if (!std::isfinite(v)) throw ValidationError("sample " + std::to_string(i) + " is not finite");
    }
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
    const std::string img = read_file(images);
    const std::string lab = read_file(labels);
    const std::string img_name = images.string(), lab_name = labels.string();

    if (read_be32(img, 0, img_name) != kIdxImagesMagic) throw ParseError(img_name + ": wrong magic for IDX images");
    if (read_be32(lab, 0, lab_name) != kIdxLabelsMagic) throw ParseError(lab_name + ": wrong magic for IDX labels");
    const std::size_t n = read_be32(img, 4, img_name);
    const std::size_t h = read_be32(img, 8, img_name);
    const std::size_t w = read_be32(img, 12, img_name);
    const std::size_t n_labels = read_be32(lab, 4, lab_name);
    if (n != n_labels)
        throw ParseError("count mismatch: " + std::to_string(n) + " images vs " + std::to_string(n_labels) + " labels");
    if (h == 0 || w == 0) throw ParseError(img_name + ": zero image extent");
    if (img.size() < 16 + n * h * w) throw ParseError(img_name + ": truncated pixel data");
    if (lab.size() < 8 + n) throw ParseError(lab_name + ": truncated label data");

    Dataset ds;
    ds.input_shape = Shape{1, h, w};
    ds.inputs.resize(n, Vector(h * w));
    ds.labels.resize(n);
    std::size_t max_label = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const char* px = img.data() + 16 + i * h * w;
        for (std::size_t k = 0; k < h * w; ++k) ds.inputs[i][k] = static_cast<unsigned char>(px[k]) / 255.0;
        ds.labels[i] = static_cast<unsigned char>(lab[8 + i]);
        max_label = std::max(max_label, ds.labels[i]);
    }
    ds.num_classes = max_label + 1;
    return ds;
}

Dataset load_csv(const std::filesystem::path& path, const std::string& label_column) {
    const auto lines = read_lines(path);
    if (lines.empty()) throw ParseError(path.string() + ": empty file");
    const auto header = split_commas(lines[0]);
    const auto it = std::find(header.begin(), header.end(), label_column);
    if (it == header.end()) throw ParseError(path.string() + ": label column \"" + label_column + "\" not found");
    const std::size_t label_col = static_cast<std::size_t>(it - header.begin());

    Dataset ds;
    std::map<std::string, std::size_t, std::less<>> ids;
    for (std::size_t r = 1; r < lines.size(); ++r) {
        const auto cells = split_commas(lines[r]);
        const std::string where = path.string() + ":" + std::to_string(r + 1);
        if (cells.size() != header.size())
            throw ParseError(where + ": expected " + std::to_string(header.size()) + " columns, got " +
                             std::to_string(cells.size()));
        Vector features;
        features.reserve(cells.size() - 1);
        for (std::size_t c = 0; c < cells.size(); ++c) {
            if (c == label_col) continue;
            double v = 0.0;
            if (!parse_double(cells[c], v))
                throw ParseError(where + ": non-numeric value \"" + std::string(cells[c]) + "\" in column \"" +
                                 std::string(header[c]) + "\"");
            features.push_back(v);
        }
        const std::string_view name = cells[label_col];
        auto found = ids.find(name);
        if (found == ids.end()) {
            found = ids.emplace(std::string(name), ds.label_names.size()).first;
            ds.label_names.emplace_back(name);
        }
        ds.inputs.push_back(std::move(features));
        ds.labels.push_back(found->second);
    }
    if (header.size() < 2) throw ParseError(path.string() + ": no feature columns");
    ds.input_shape = Shape{header.size() - 1};
    ds.num_classes = ds.label_names.size();
    return ds;
}

std::vector<Vector> read_instances_csv(const std::filesystem::path& path) {
    const auto lines = read_lines(path);
    std::vector<Vector> rows;
    for (std::size_t r = 0; r < lines.size(); ++r) {
        const auto cells = split_commas(lines[r]);
        Vector row;
        bool numeric = true;
        for (auto cell : cells) {
            double v = 0.0;
            if (!parse_double(cell, v)) {
                numeric = false;
                break;
            }
            row.push_back(v);
        }
        if (!numeric) {
            if (r == 0) continue;
            throw ParseError(path.string() + ":" + std::to_string(r + 1) + ": non-numeric value");
        }
        if (!rows.empty() && row.size() != rows.front().size())
            throw ParseError(path.string() + ":" + std::to_string(r + 1) + ": row length differs from the first row");
        rows.push_back(std::move(row));
    }
    return rows;
}

std::size_t argmax(std::span<const double> v) {
    if (v.empty()) throw ShapeError("argmax of an empty vector");
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

double lfr(std::span<const std::size_t> a, std::span<const std::size_t> b) {
    if (a.size() != b.size()) throw ShapeError("label flip rate needs equal-length prediction lists");
    if (a.empty()) throw ValidationError("label flip rate of empty prediction lists");
    std::size_t flips = 0;
    for (std::size_t i = 0; i < a.size(); ++i) flips += a[i] != b[i];
    return static_cast<double>(flips) / static_cast<double>(a.size());
}

DecompositionReport decompose_eval(const Network& net, const Dataset& ds, DecompositionPredictions* preds) {
    return decompose_with(
        ds, net.output_size(),
        [&](const Vector& x) {
            const InstanceLinearization lin = linearize_instance(net, x);
            return predict_parts(lin, forward(net, x).output, x);
        },
        preds);
}

DecompositionReport decompose_eval(const Ensemble& ens, const Dataset& ds, DecompositionPredictions* preds) {
    validate(ens);
    return decompose_with(
        ds, ens.members.front().output_size(),
        [&](const Vector& x) {
            const InstanceLinearization lin = linearize_ensemble(ens, x);
            return predict_parts(lin, forward_ensemble(ens, x), x);
        },
        preds);
}

std::string format_fixed(double value, int decimals) {
    char buf[512];
    const auto res = std::to_chars(buf, buf + sizeof buf, std::abs(value), std::chars_format::fixed);
    std::string digits(buf, res.ptr);
    const std::size_t dot = digits.find('.');
    std::string int_part = dot == std::string::npos ? digits : digits.substr(0, dot);
    std::string frac = dot == std::string::npos ? "" : digits.substr(dot + 1);

    const auto d = static_cast<std::size_t>(decimals);
    bool round_up = frac.size() > d && frac[d] >= '5';
    frac.resize(d, '0');
    if (round_up) {
        std::string all = int_part + frac;
        int i = static_cast<int>(all.size()) - 1;
        for (; i >= 0; --i) {
            if (all[static_cast<std::size_t>(i)] == '9') {
                all[static_cast<std::size_t>(i)] = '0';
            } else {
                ++all[static_cast<std::size_t>(i)];
                break;
            }
        }
        if (i < 0) all.insert(all.begin(), '1');
        int_part = all.substr(0, all.size() - d);
        frac = all.substr(all.size() - d);
    }
    std::string out = int_part;
    if (d) out += "." + frac;
    const bool zero = std::all_of(out.begin(), out.end(), [](char c) { return c == '0' || c == '.'; });
    if (std::signbit(value) && !zero) out.insert(out.begin(), '-');
    return out;
}

std::string report_header() { return "model\tacc_wx\tlfr_wx\tacc_b\tlfr_b\tacc_full"; }

std::string report_row(const DecompositionReport& r, const std::string& model_name) {
    return model_name + "\t" + format_fixed(r.acc_wx, 4) + "\t" + format_fixed(r.lfr_wx, 4) + "\t" +
           format_fixed(r.acc_b, 4) + "\t" + format_fixed(r.lfr_b, 4) + "\t" + format_fixed(r.acc_full, 4);
}

std::string report_table(const DecompositionReport& report, const std::string& model_name) {
    return report_header() + "\n" + report_row(report, model_name) + "\n";
}

}  // namespace ilin
