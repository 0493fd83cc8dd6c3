// SPDX-License-Identifier: Apache-2.0
#include "ilin/cli.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <json.hpp>
#include <numeric>
#include <optional>
#include <sstream>

#include "ilin/attribute.hpp"
#include "ilin/experiments.hpp"
#include "ilin/linearize.hpp"
#include "ilin/model_io.hpp"
#include "ilin/random.hpp"
#include "ilin/trainer.hpp"

namespace ilin::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

/// Flag values that parse but make no sense for the given inputs.
class UsageError : public Error {
public:
    using Error::Error;
};

/// Relative reconstruction error above which verify fails.
constexpr double kResidualThreshold = 1e-9;
constexpr double kJacobianThreshold = 1e-4;
constexpr double kJacobianStep = 1e-5;
/// Inputs closer than this to a kink are skipped by the Jacobian check:
/// a step of h can move a pre-activation by more than h.
constexpr double kJacobianKinkMargin = 1e-3;

std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

Vector pick_instance(const fs::path& path, std::size_t index) {
    std::vector<Vector> rows = read_instances_csv(path);
    if (index >= rows.size())
        throw UsageError("--index " + std::to_string(index) + " out of range: " + path.string() + " has " +
                         std::to_string(rows.size()) + " instances");
    return std::move(rows[index]);
}

void check_class(std::size_t c, std::size_t outputs) {
    if (c >= outputs)
        throw UsageError("--class " + std::to_string(c) + " out of range for " + std::to_string(outputs) + " outputs");
}

void check_input(const Vector& x, std::size_t expected) {
    if (x.size() != expected)
        throw UsageError("instance has " + std::to_string(x.size()) + " features, the model expects " +
                         std::to_string(expected));
}

bool has_batchnorm(const std::vector<LayerSpec>& layers) {
    for (const auto& l : layers) {
        if (std::holds_alternative<BatchNorm>(l)) return true;
        if (const auto* r = std::get_if<Residual>(&l); r && has_batchnorm(r->inner)) return true;
    }
    return false;
}

std::size_t input_size(const Model& m) {
    return std::visit(
        [](const auto& v) -> std::size_t {
            if constexpr (std::is_same_v<std::decay_t<decltype(v)>, Network>)
                return v.input_size();
            else
                return v.members.front().input_size();
        },
        m);
}

InstanceLinearization linearize_model(const Model& m, std::span<const double> x) {
    if (const auto* net = std::get_if<Network>(&m)) return linearize_instance(*net, x);
    return linearize_ensemble(std::get<Ensemble>(m), x);
}

Vector forward_model(const Model& m, std::span<const double> x) {
    if (const auto* net = std::get_if<Network>(&m)) return forward(*net, x).output;
    return forward_ensemble(std::get<Ensemble>(m), x);
}

const Network& require_network(const Model& m, const std::string& what) {
    if (const auto* net = std::get_if<Network>(&m)) return *net;
    throw UsageError(what + " needs a single network, not an ensemble");
}

double relative_residual(const Vector& f, const Vector& g) {
    return max_abs_diff(f, g) / (1.0 + max_abs(f));
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string model, images, labels, test_images, test_labels, out, log;
    std::size_t epochs = 10, batch = 32;
    double lr = 0.05;
    std::uint64_t seed = 0;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
    if (a.test_images.empty() != a.test_labels.empty())
        throw UsageError("--test-images and --test-labels go together");
    Network net = load_template(a.model, a.seed);
    const Dataset train = load_idx(a.images, a.labels);
    std::optional<Dataset> test;
    if (!a.test_images.empty()) test = load_idx(a.test_images, a.test_labels);
    if (train.input_shape.size() != net.input_size())
        throw UsageError("dataset inputs have " + std::to_string(train.input_shape.size()) +
                         " values, the model expects " + std::to_string(net.input_size()));
    if (has_batchnorm(net.layers)) calibrate_batchnorm(net, train.inputs);

    TrainConfig cfg;
    cfg.learning_rate = a.lr;
    cfg.epochs = a.epochs;
    cfg.batch_size = a.batch;
    cfg.seed = a.seed;
    const TrainResult r = train_classifier(std::move(net), train, test ? &*test : nullptr, cfg);
    save_model(r.net, a.out);
    if (!a.log.empty()) write_file_atomic(a.log, classifier_log_csv(r.log));
    for (const auto& e : r.log)
        out << "epoch=" << e.epoch << " loss=" << num(e.loss) << " accuracy=" << format_fixed(e.accuracy, 4) << "\n";
    return kExitOk;
}

struct LinearizeArgs {
    std::string model, input, out;
    std::size_t index = 0;
};

int cmd_linearize(const LinearizeArgs& a, std::ostream& out) {
    const Model m = load_model(a.model);
    const Vector x = pick_instance(a.input, a.index);
    check_input(x, input_size(m));
    const InstanceLinearization lin = linearize_model(m, x);
    const double residual = max_abs_diff(forward_model(m, x), lin.apply(x));

    json w = json::array();
    for (std::size_t r = 0; r < lin.w.rows(); ++r) {
        const auto row = lin.w.row(r);
        w.push_back(std::vector<double>(row.begin(), row.end()));
    }
    const json doc = {{"W", std::move(w)}, {"b", lin.b}, {"residual", residual}};
    write_file_atomic(a.out, doc.dump() + "\n");
    out << "rows=" << lin.w.rows() << " cols=" << lin.w.cols() << " residual=" << num(residual) << "\n";
    return kExitOk;
}

struct AttributeArgs {
    std::string model, input, heatmap, csv, method = "linear", baseline = "zeros";
    std::size_t index = 0, cls = 0, ig_steps = kDefaultIgSteps;
};

int cmd_attribute(const AttributeArgs& a, std::ostream& out) {
    if (a.heatmap.empty() && a.csv.empty()) throw UsageError("give --heatmap and/or --csv");
    const Model m = load_model(a.model);
    const Vector x = pick_instance(a.input, a.index);
    check_input(x, input_size(m));
    const Vector fx = forward_model(m, x);
    check_class(a.cls, fx.size());

    Vector values;
    Shape shape = std::holds_alternative<Network>(m) ? std::get<Network>(m).input_shape
                                                     : std::get<Ensemble>(m).members.front().input_shape;
    if (a.method == "linear") {
        const AttributionMap map = attribution(linearize_model(m, x), x, a.cls);
        const double sum = std::accumulate(map.contributions.begin(), map.contributions.end(), 0.0);
        out << "logit=" << num(map.logit) << " sum=" << num(sum) << " bias=" << num(map.bias_share) << "\n";
        values = map.contributions;
    } else if (a.method == "vg") {
        values = vanilla_gradient(require_network(m, "--method vg"), x, a.cls);
    } else {
        const Network& net = require_network(m, "--method ig");
        const Vector baseline(x.size(), 0.0);
        values = integrated_gradients(net, x, baseline, a.ig_steps, a.cls);
        const double sum = std::accumulate(values.begin(), values.end(), 0.0);
        const double gap = fx[a.cls] - forward(net, baseline).output[a.cls];
        out << "ig_sum=" << num(sum) << " output_gap=" << num(gap) << "\n";
    }
    if (!a.heatmap.empty()) render_heatmap(values, shape, a.heatmap);
    if (!a.csv.empty()) write_file_atomic(a.csv, contributions_csv(values));
    return kExitOk;
}

struct NeuronsArgs {
    std::string model, input, outdir;
    std::size_t index = 0, layer = 0, k = 5, cls = 0;
};

int cmd_neurons(const NeuronsArgs& a, std::ostream& out) {
    const Network net = load_network(a.model);
    if (a.layer >= net.layers.size())
        throw UsageError("--layer " + std::to_string(a.layer) + " out of range for " +
                         std::to_string(net.layers.size()) + " layers");
    if (a.k == 0) throw UsageError("--k must be at least 1");
    const Vector x = pick_instance(a.input, a.index);
    check_input(x, net.input_size());
    check_class(a.cls, net.output_size());

    const TopNeurons top = top_k_neurons(net, x, a.layer, a.k, a.cls);
    fs::create_directories(a.outdir);
    std::string tsv = "sign\trank\tneuron\tactivation\tcontribution\n";
    auto emit = [&](const std::vector<NeuronAttribution>& list, const std::string& sign) {
        for (std::size_t r = 0; r < list.size(); ++r) {
            const auto& n = list[r];
            const std::string name = sign + "_" + std::to_string(r + 1) + "_" + std::to_string(n.neuron_index) + ".ppm";
            render_heatmap(n.map, net.input_shape, fs::path(a.outdir) / name);
            tsv += sign + "\t" + std::to_string(r + 1) + "\t" + std::to_string(n.neuron_index) + "\t" +
                   num(n.activation_value) + "\t" + num(n.downstream_contribution) + "\n";
        }
    };
    emit(top.positive, "pos");
    emit(top.negative, "neg");
    write_file_atomic(fs::path(a.outdir) / "neurons.tsv", tsv);
    out << "positive=" << top.positive.size() << " negative=" << top.negative.size() << "\n";
    return kExitOk;
}

struct DecomposeArgs {
    std::string model, images, labels, out, name;
};

int cmd_decompose(const DecomposeArgs& a, std::ostream& out) {
    const Model m = load_model(a.model);
    const Dataset ds = load_idx(a.images, a.labels);
    if (ds.input_shape.size() != input_size(m)) throw UsageError("dataset inputs do not match the model input size");
    const DecompositionReport r = std::holds_alternative<Network>(m) ? decompose_eval(std::get<Network>(m), ds)
                                                                     : decompose_eval(std::get<Ensemble>(m), ds);
    const std::string name = a.name.empty() ? fs::path(a.model).stem().string() : a.name;
    write_file_atomic(a.out, report_table(r, name));
    out << "n=" << r.n << "\n";
    return kExitOk;
}

struct RegionArgs {
    std::string model, input, direction = "random";
    std::size_t index = 0;
    std::uint64_t seed = 0;
};

int cmd_region(const RegionArgs& a, std::ostream& out) {
    const Network net = load_network(a.model);
    const Vector x = pick_instance(a.input, a.index);
    check_input(x, net.input_size());
    Vector dir(x.size(), 0.0);
    if (a.direction == "random") {
        Rng rng(a.seed);
        for (double& v : dir) v = rng.normal();
    } else if (a.direction.rfind("coord:", 0) == 0) {
        std::size_t j = 0;
        const std::string digits = a.direction.substr(6);
        const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), j);
        if (ec != std::errc{} || ptr != digits.data() + digits.size() || digits.empty())
            throw UsageError("bad --direction '" + a.direction + "'");
        if (j >= x.size())
            throw UsageError("--direction coordinate " + std::to_string(j) + " out of range for " +
                             std::to_string(x.size()) + " features");
        dir[j] = 1.0;
    } else {
        throw UsageError("--direction must be random or coord:<j>");
    }
    const RegionProbe p = region_probe(net, x, dir);
    out << "delta=" << num(p.delta) << " boundary_layer="
        << (p.boundary_layer ? std::to_string(*p.boundary_layer) : std::string("none")) << "\n";
    return kExitOk;
}

struct VerifyArgs {
    std::string model, images, labels;
    std::size_t n = 20;
    std::uint64_t seed = 0;
};

int cmd_verify(const VerifyArgs& a, std::ostream& out, std::ostream& err) {
    const Model m = load_model(a.model);
    const Dataset ds = load_idx(a.images, a.labels);
    if (ds.input_shape.size() != input_size(m)) throw UsageError("dataset inputs do not match the model input size");
    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(a.seed);
    rng.shuffle(order);
    order.resize(std::min(a.n, order.size()));

    const Network* net = std::get_if<Network>(&m);
    const bool check_jacobian = net && is_piecewise_linear(*net);
    double worst_residual = 0.0, worst_jacobian = 0.0;
    std::size_t jacobian_checked = 0;
    for (std::size_t i : order) {
        const Vector& x = ds.inputs[i];
        const InstanceLinearization lin = linearize_model(m, x);
        worst_residual = std::max(worst_residual, relative_residual(forward_model(m, x), lin.apply(x)));
        if (check_jacobian && kink_distance(*net, x) > kJacobianKinkMargin) {
            worst_jacobian = std::max(worst_jacobian, max_abs_diff(lin.w.values(), jacobian_fd(*net, x, kJacobianStep).values()));
            ++jacobian_checked;
        }
    }
    out << "samples=" << order.size() << "\n";
    out << "max_residual=" << num(worst_residual) << "\n";
    if (check_jacobian)
        out << "max_jacobian_error=" << num(worst_jacobian) << " checked=" << jacobian_checked << "\n";
    else
        out << "max_jacobian_error=skipped (not piecewise linear)\n";
    bool ok = worst_residual <= kResidualThreshold;
    if (check_jacobian) ok = ok && worst_jacobian <= kJacobianThreshold;
    if (!ok) {
        err << "verify: thresholds exceeded (residual " << kResidualThreshold << ", jacobian " << kJacobianThreshold
            << ")\n";
        return kExitRuntime;
    }
    return kExitOk;
}

struct TsneArgs {
    std::string csv, label_column, model_template, out, proj, attrib_dir, log;
    double perplexity = 15.0, lr = 0.05;
    std::size_t iters = 500;
    std::uint64_t seed = 0;
};

int cmd_tsne(const TsneArgs& a, std::ostream& out) {
    const Dataset ds = load_csv(a.csv, a.label_column);
    Network net = load_template(a.model_template, a.seed);
    if (ds.input_shape.size() != net.input_size())
        throw UsageError("data has " + std::to_string(ds.input_shape.size()) + " features, the model expects " +
                         std::to_string(net.input_size()));
    if (has_batchnorm(net.layers)) calibrate_batchnorm(net, ds.inputs);
    TrainConfig cfg;
    cfg.loss = LossKind::tsne;
    cfg.learning_rate = a.lr;
    cfg.epochs = a.iters;
    cfg.seed = a.seed;
    cfg.perplexity = a.perplexity;
    const TsneTrainResult r = train_parametric_tsne(std::move(net), ds.inputs, cfg);
    save_model(r.net, a.out);
    if (!a.log.empty()) write_file_atomic(a.log, tsne_log_csv(r.loss_log));

    if (!a.proj.empty()) {
        std::string csv = "index,y0,y1,label\n";
        for (std::size_t i = 0; i < ds.size(); ++i) {
            const Vector y = forward(r.net, ds.inputs[i]).output;
            csv += std::to_string(i) + "," + num(y[0]) + "," + num(y[1]) + "," + ds.label_names[ds.labels[i]] + "\n";
        }
        write_file_atomic(a.proj, csv);
    }
    if (!a.attrib_dir.empty()) {
        fs::create_directories(a.attrib_dir);
        for (std::size_t i = 0; i < ds.size(); ++i) {
            const InstanceLinearization lin = linearize_instance(r.net, ds.inputs[i]);
            for (std::size_t d = 0; d < 2; ++d) {
                const AttributionMap map = attribution(lin, ds.inputs[i], d);
                write_file_atomic(fs::path(a.attrib_dir) /
                                      ("sample_" + std::to_string(i) + "_dim" + std::to_string(d) + ".csv"),
                                  contributions_csv(map.contributions));
            }
        }
    }
    out << "initial_loss=" << num(r.loss_log.front()) << " final_loss=" << num(r.loss_log.back()) << "\n";
    return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Instance-wise linearization of neural networks", "ilin"};
    app.require_subcommand(1);

    TrainArgs train;
    auto* sc_train = app.add_subcommand("train", "Train a classifier from a model template with minibatch SGD");
    sc_train->add_option("--model", train.model, "Model template JSON")->required()->check(CLI::ExistingFile);
    sc_train->add_option("--images", train.images, "IDX image file")->required()->check(CLI::ExistingFile);
    sc_train->add_option("--labels", train.labels, "IDX label file")->required()->check(CLI::ExistingFile);
    sc_train->add_option("--test-images", train.test_images, "IDX image file for per-epoch accuracy")
        ->check(CLI::ExistingFile);
    sc_train->add_option("--test-labels", train.test_labels, "IDX label file for per-epoch accuracy")
        ->check(CLI::ExistingFile);
    sc_train->add_option("--out", train.out, "Trained model JSON")->required();
    sc_train->add_option("--epochs", train.epochs)->capture_default_str();
    sc_train->add_option("--lr", train.lr)->capture_default_str()->check(CLI::PositiveNumber);
    sc_train->add_option("--batch", train.batch)->capture_default_str()->check(CLI::PositiveNumber);
    sc_train->add_option("--seed", train.seed)->capture_default_str();
    sc_train->add_option("--log", train.log, "Per-epoch CSV log");

    LinearizeArgs lin;
    auto* sc_lin = app.add_subcommand("linearize", "Write W and b of F(x) = W x + b for one instance");
    sc_lin->add_option("--model", lin.model)->required()->check(CLI::ExistingFile);
    sc_lin->add_option("--input", lin.input, "Instances CSV")->required()->check(CLI::ExistingFile);
    sc_lin->add_option("--index", lin.index)->capture_default_str();
    sc_lin->add_option("--out", lin.out)->required();

    AttributeArgs attr;
    auto* sc_attr = app.add_subcommand("attribute", "Attribution map of one output for one instance");
    sc_attr->add_option("--model", attr.model)->required()->check(CLI::ExistingFile);
    sc_attr->add_option("--input", attr.input)->required()->check(CLI::ExistingFile);
    sc_attr->add_option("--index", attr.index)->capture_default_str();
    sc_attr->add_option("--class", attr.cls)->capture_default_str();
    sc_attr->add_option("--heatmap", attr.heatmap, "PPM output");
    sc_attr->add_option("--csv", attr.csv, "CSV output");
    sc_attr->add_option("--method", attr.method)->capture_default_str()->check(CLI::IsMember({"linear", "vg", "ig"}));
    sc_attr->add_option("--ig-steps", attr.ig_steps)->capture_default_str()->check(CLI::PositiveNumber);
    sc_attr->add_option("--baseline", attr.baseline)->capture_default_str()->check(CLI::IsMember({"zeros"}));

    NeuronsArgs neu;
    auto* sc_neu = app.add_subcommand("neurons", "Heatmaps of the top contributing neurons of one layer");
    sc_neu->add_option("--model", neu.model)->required()->check(CLI::ExistingFile);
    sc_neu->add_option("--input", neu.input)->required()->check(CLI::ExistingFile);
    sc_neu->add_option("--index", neu.index)->capture_default_str();
    sc_neu->add_option("--layer", neu.layer)->required();
    sc_neu->add_option("--k", neu.k)->capture_default_str();
    sc_neu->add_option("--class", neu.cls)->capture_default_str();
    sc_neu->add_option("--outdir", neu.outdir)->required();

    DecomposeArgs dec;
    auto* sc_dec = app.add_subcommand("decompose", "Accuracy and label flip rate of W x and b");
    sc_dec->add_option("--model", dec.model)->required()->check(CLI::ExistingFile);
    sc_dec->add_option("--images", dec.images)->required()->check(CLI::ExistingFile);
    sc_dec->add_option("--labels", dec.labels)->required()->check(CLI::ExistingFile);
    sc_dec->add_option("--out", dec.out, "Report TSV")->required();
    sc_dec->add_option("--name", dec.name, "Model column value (default: model file stem)");

    RegionArgs reg;
    auto* sc_reg = app.add_subcommand("region", "Distance to the edge of the linear region along a direction");
    sc_reg->add_option("--model", reg.model)->required()->check(CLI::ExistingFile);
    sc_reg->add_option("--input", reg.input)->required()->check(CLI::ExistingFile);
    sc_reg->add_option("--index", reg.index)->capture_default_str();
    sc_reg->add_option("--direction", reg.direction, "random or coord:<j>")->capture_default_str();
    sc_reg->add_option("--seed", reg.seed)->capture_default_str();

    VerifyArgs ver;
    auto* sc_ver = app.add_subcommand("verify", "Check reconstruction and Jacobian equality on sampled inputs");
    sc_ver->add_option("--model", ver.model)->required()->check(CLI::ExistingFile);
    sc_ver->add_option("--images", ver.images)->required()->check(CLI::ExistingFile);
    sc_ver->add_option("--labels", ver.labels)->required()->check(CLI::ExistingFile);
    sc_ver->add_option("--n", ver.n)->capture_default_str()->check(CLI::PositiveNumber);
    sc_ver->add_option("--seed", ver.seed)->capture_default_str();

    TsneArgs ts;
    auto* sc_ts = app.add_subcommand("tsne", "Train a parametric t-SNE network on a CSV dataset");
    sc_ts->add_option("--csv", ts.csv)->required()->check(CLI::ExistingFile);
    sc_ts->add_option("--label-column", ts.label_column)->required();
    sc_ts->add_option("--model-template", ts.model_template)->required()->check(CLI::ExistingFile);
    sc_ts->add_option("--out", ts.out)->required();
    sc_ts->add_option("--perplexity", ts.perplexity)->capture_default_str()->check(CLI::PositiveNumber);
    sc_ts->add_option("--iters", ts.iters)->capture_default_str();
    sc_ts->add_option("--lr", ts.lr)->capture_default_str()->check(CLI::PositiveNumber);
    sc_ts->add_option("--seed", ts.seed)->capture_default_str();
    sc_ts->add_option("--proj", ts.proj, "Projection CSV (index,y0,y1,label)");
    sc_ts->add_option("--attrib-dir", ts.attrib_dir, "Directory for per-sample attribution CSVs");
    sc_ts->add_option("--log", ts.log, "Per-iteration loss CSV");

    std::vector<const char*> argv{"ilin"};
    for (const auto& s : args) argv.push_back(s.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (sc_train->parsed()) return cmd_train(train, out);
        if (sc_lin->parsed()) return cmd_linearize(lin, out);
        if (sc_attr->parsed()) return cmd_attribute(attr, out);
        if (sc_neu->parsed()) return cmd_neurons(neu, out);
        if (sc_dec->parsed()) return cmd_decompose(dec, out);
        if (sc_reg->parsed()) return cmd_region(reg, out);
        if (sc_ver->parsed()) return cmd_verify(ver, out, err);
        if (sc_ts->parsed()) return cmd_tsne(ts, out);
    } catch (const UsageError& e) {
        err << "ilin: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "ilin: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}

int run(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run(args, std::cout, std::cerr);
}

}  // namespace ilin::cli
