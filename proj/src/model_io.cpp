// SPDX-License-Identifier: Apache-2.0
#include "ilin/model_io.hpp"

#include <fstream>
#include <sstream>
#include <unistd.h>

#include "json.hpp"

namespace ilin {

using nlohmann::json;

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};

// ---------------------------------------------------------------------------
// Writing

json vec_json(const Vector& v) { return json(v); }

json bias_json(const std::optional<Vector>& b) { return b ? json(*b) : json(nullptr); }

const char* activation_name(ActivationKind k) {
    switch (k) {
        case ActivationKind::relu: return "relu";
        case ActivationKind::leaky_relu: return "leaky_relu";
        case ActivationKind::elu: return "elu";
        case ActivationKind::selu: return "selu";
        case ActivationKind::gelu: return "gelu";
    }
    return "relu";
}

json layers_json(const std::vector<LayerSpec>& layers);

json layer_json(const LayerSpec& layer) {
    return std::visit(overloaded{
                          [](const Dense& d) {
                              return json{{"type", "dense"},
                                          {"in", d.in()},
                                          {"out", d.out()},
                                          {"weight", vec_json(d.weight.values())},
                                          {"bias", bias_json(d.bias)}};
                          },
                          [](const Conv2D& c) {
                              return json{{"type", "conv2d"},
                                          {"in_channels", c.in_channels},
                                          {"out_channels", c.out_channels},
                                          {"kernel_size", {c.kernel_h, c.kernel_w}},
                                          {"stride", c.stride},
                                          {"padding", c.padding},
                                          {"weight", vec_json(c.kernels)},
                                          {"bias", bias_json(c.bias)}};
                          },
                          [](const MaxPool2D& p) { return json{{"type", "maxpool2d"}, {"k", p.k}, {"stride", p.stride}}; },
                          [](const AvgPool2D& p) { return json{{"type", "avgpool2d"}, {"k", p.k}, {"stride", p.stride}}; },
                          [](const BatchNorm& b) {
                              return json{{"type", "batchnorm"}, {"gamma", b.gamma}, {"beta", b.beta},
                                          {"mean", b.mean},      {"var", b.var},     {"eps", b.eps}};
                          },
                          [](const Activation& a) {
                              json j{{"type", "activation"}, {"kind", activation_name(a.kind)}};
                              if (a.kind == ActivationKind::leaky_relu || a.kind == ActivationKind::elu)
                                  j["alpha"] = a.alpha;
                              return j;
                          },
                          [](const Flatten&) { return json{{"type", "flatten"}}; },
                          [](const Residual& r) { return json{{"type", "residual"}, {"layers", layers_json(r.inner)}}; },
                      },
                      layer);
}

json layers_json(const std::vector<LayerSpec>& layers) {
    json arr = json::array();
    for (const auto& l : layers) arr.push_back(layer_json(l));
    return arr;
}

json network_body(const Network& net) {
    return json{{"input_shape", net.input_shape.dims()}, {"layers", layers_json(net.layers)}};
}

// ---------------------------------------------------------------------------
// Reading

[[noreturn]] void fail(const std::string& where, const std::string& msg) { throw ParseError(where + ": " + msg); }

const json& field(const json& obj, const char* key, const std::string& where) {
    if (!obj.is_object()) fail(where, "expected an object");
    auto it = obj.find(key);
    if (it == obj.end()) fail(where, std::string("missing field \"") + key + "\"");
    return *it;
}

bool has(const json& obj, const char* key) {
    auto it = obj.find(key);
    return it != obj.end() && !it->is_null();
}

std::size_t get_count(const json& obj, const char* key, const std::string& where) {
    const json& v = field(obj, key, where);
    if (!v.is_number_integer() || v.get<long long>() < 0)
        fail(where + "." + key, "expected a non-negative integer");
    return v.get<std::size_t>();
}

std::size_t get_count_or(const json& obj, const char* key, std::size_t fallback, const std::string& where) {
    return has(obj, key) ? get_count(obj, key, where) : fallback;
}

double get_number(const json& v, const std::string& where) {
    if (!v.is_number()) fail(where, "expected a number");
    return v.get<double>();
}

Vector get_vector(const json& obj, const char* key, const std::string& where) {
    const json& v = field(obj, key, where);
    const std::string at = where + "." + key;
    if (!v.is_array()) fail(at, "expected an array of numbers");
    Vector out;
    out.reserve(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out.push_back(get_number(v[i], at + "[" + std::to_string(i) + "]"));
    return out;
}

void require_length(const Vector& v, std::size_t n, const std::string& where) {
    if (v.size() != n)
        throw ValidationError(where + ": expected " + std::to_string(n) + " values, got " + std::to_string(v.size()));
}

Vector weights_or_init(const json& obj, const char* key, std::size_t count, std::size_t fan_in, std::size_t fan_out,
                       const ParseOptions& opt, const std::string& where) {
    if (has(obj, key)) {
        Vector v = get_vector(obj, key, where);
        require_length(v, count, where + "." + key);
        return v;
    }
    if (!opt.init) fail(where, std::string("missing field \"") + key + "\"");
    Vector v = opt.init(count, fan_in, fan_out);
    require_length(v, count, where + "." + key);
    return v;
}

std::optional<Vector> bias_field(const json& obj, std::size_t n, const ParseOptions& opt, const std::string& where) {
    if (!has(obj, "bias")) return std::nullopt;
    const json& b = obj["bias"];
    if (b.is_boolean()) {
        if (!opt.init) fail(where + ".bias", "boolean bias is only allowed in templates");
        return b.get<bool>() ? std::optional<Vector>(Vector(n, 0.0)) : std::nullopt;
    }
    Vector v = get_vector(obj, "bias", where);
    require_length(v, n, where + ".bias");
    return v;
}

Vector vector_or(const json& obj, const char* key, std::size_t n, double fill, const ParseOptions& opt,
                 const std::string& where) {
    if (has(obj, key) || !opt.init) {
        Vector v = get_vector(obj, key, where);
        require_length(v, n, where + "." + key);
        return v;
    }
    return Vector(n, fill);
}

ActivationKind parse_activation_kind(const std::string& s, const std::string& where) {
    if (s == "relu") return ActivationKind::relu;
    if (s == "leaky_relu") return ActivationKind::leaky_relu;
    if (s == "elu") return ActivationKind::elu;
    if (s == "selu") return ActivationKind::selu;
    if (s == "gelu") return ActivationKind::gelu;
    fail(where, "unknown activation kind \"" + s + "\"");
}

std::vector<LayerSpec> parse_layers(const json& arr, Shape& shape, const ParseOptions& opt, const std::string& where);

LayerSpec parse_layer(const json& j, const Shape& in, const ParseOptions& opt, const std::string& where) {
    const json& type_field = field(j, "type", where);
    if (!type_field.is_string()) fail(where + ".type", "expected a string");
    const std::string type = type_field.get<std::string>();

    if (type == "dense") {
        const std::size_t n_in = get_count_or(j, "in", in.size(), where);
        const std::size_t n_out = get_count(j, "out", where);
        Vector w = weights_or_init(j, "weight", n_in * n_out, n_in, n_out, opt, where);
        Dense d{DenseMatrix(n_out, n_in, std::move(w)), bias_field(j, n_out, opt, where)};
        return d;
    }
    if (type == "conv2d") {
        Conv2D c;
        c.in_channels = get_count_or(j, "in_channels", in[0], where);
        c.out_channels = get_count(j, "out_channels", where);
        const json& ks = field(j, "kernel_size", where);
        if (ks.is_array() && ks.size() == 2 && ks[0].is_number_integer() && ks[1].is_number_integer()) {
            c.kernel_h = ks[0].get<std::size_t>();
            c.kernel_w = ks[1].get<std::size_t>();
        } else if (ks.is_number_integer()) {
            c.kernel_h = c.kernel_w = ks.get<std::size_t>();
        } else {
            fail(where + ".kernel_size", "expected an integer or [kh, kw]");
        }
        c.stride = get_count_or(j, "stride", 1, where);
        c.padding = get_count_or(j, "padding", 0, where);
        const std::size_t per_out = c.in_channels * c.kernel_h * c.kernel_w;
        c.kernels = weights_or_init(j, "weight", c.out_channels * per_out, per_out, c.out_channels * c.kernel_h * c.kernel_w,
                                    opt, where);
        c.bias = bias_field(j, c.out_channels, opt, where);
        return c;
    }
    if (type == "maxpool2d") {
        const std::size_t k = get_count(j, "k", where);
        return MaxPool2D{k, get_count_or(j, "stride", k, where)};
    }
    if (type == "avgpool2d") {
        const std::size_t k = get_count(j, "k", where);
        return AvgPool2D{k, get_count_or(j, "stride", k, where)};
    }
    if (type == "batchnorm") {
        const std::size_t n = in[0];
        BatchNorm b;
        b.gamma = vector_or(j, "gamma", n, 1.0, opt, where);
        b.beta = vector_or(j, "beta", n, 0.0, opt, where);
        b.mean = vector_or(j, "mean", n, 0.0, opt, where);
        b.var = vector_or(j, "var", n, 1.0, opt, where);
        b.eps = has(j, "eps") ? get_number(j["eps"], where + ".eps") : 1e-5;
        return b;
    }
    if (type == "activation") {
        const json& k = field(j, "kind", where);
        if (!k.is_string()) fail(where + ".kind", "expected a string");
        Activation a{parse_activation_kind(k.get<std::string>(), where + ".kind"), 0.0};
        if (a.kind == ActivationKind::leaky_relu) a.alpha = 0.01;
        if (a.kind == ActivationKind::elu) a.alpha = 1.0;
        if (has(j, "alpha")) a.alpha = get_number(j["alpha"], where + ".alpha");
        return a;
    }
    if (type == "flatten") return Flatten{};
    if (type == "residual") {
        Shape inner_shape = in;
        Residual r{parse_layers(field(j, "layers", where), inner_shape, opt, where + ".layers")};
        return r;
    }
    fail(where + ".type", "unknown layer type \"" + type + "\"");
}

std::vector<LayerSpec> parse_layers(const json& arr, Shape& shape, const ParseOptions& opt, const std::string& where) {
    if (!arr.is_array()) fail(where, "expected an array of layers");
    std::vector<LayerSpec> layers;
    for (std::size_t i = 0; i < arr.size(); ++i) {
        const std::string at = where + "[" + std::to_string(i) + "]";
        layers.push_back(parse_layer(arr[i], shape, opt, at));
        try {
            shape = infer_layer_shape(layers.back(), shape);
        } catch (const Error& e) {
            throw ValidationError(at + ": " + e.what());
        }
    }
    return layers;
}

Network parse_network(const json& j, const ParseOptions& opt, const std::string& where) {
    const json& dims = field(j, "input_shape", where);
    if (!dims.is_array()) fail(where + ".input_shape", "expected an array of integers");
    std::vector<std::size_t> d;
    for (const auto& v : dims) {
        if (!v.is_number_integer() || v.get<long long>() <= 0) fail(where + ".input_shape", "expected positive integers");
        d.push_back(v.get<std::size_t>());
    }
    Network net;
    net.input_shape = Shape(std::move(d));
    Shape shape = net.input_shape;
    net.layers = parse_layers(field(j, "layers", where), shape, opt, where + ".layers");
    validate(net);
    return net;
}

}  // namespace

std::string model_to_json(const Model& model) {
    json j = std::visit(overloaded{
                            [](const Network& n) {
                                json out = network_body(n);
                                out["version"] = kModelFormatVersion;
                                out["kind"] = "network";
                                return out;
                            },
                            [](const Ensemble& e) {
                                json members = json::array();
                                for (const auto& m : e.members) members.push_back(network_body(m));
                                return json{{"version", kModelFormatVersion},
                                            {"kind", "ensemble"},
                                            {"members", members},
                                            {"shares", e.shares}};
                            },
                        },
                        model);
    return j.dump(1) + "\n";
}

Model model_from_json(const std::string& text, const ParseOptions& options) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("malformed JSON at byte ") + std::to_string(e.byte) + ": " + e.what());
    }
    const json& version = field(j, "version", "$");
    if (!version.is_number_integer() || version.get<long long>() != kModelFormatVersion)
        fail("$.version", "unsupported model format version " + version.dump());
    const json& kind = field(j, "kind", "$");
    if (kind == "network") return parse_network(j, options, "$");
    if (kind == "ensemble") {
        Ensemble e;
        const json& members = field(j, "members", "$");
        if (!members.is_array()) fail("$.members", "expected an array");
        for (std::size_t i = 0; i < members.size(); ++i)
            e.members.push_back(parse_network(members[i], options, "$.members[" + std::to_string(i) + "]"));
        e.shares = get_vector(j, "shares", "$");
        validate(e);
        return e;
    }
    fail("$.kind", "expected \"network\" or \"ensemble\"");
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    std::filesystem::path tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed for " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw IoError("cannot rename into " + path.string() + ": " + ec.message());
    }
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void save_model(const Model& model, const std::filesystem::path& path) {
    std::visit([](const auto& m) { validate(m); }, model);
    write_file_atomic(path, model_to_json(model));
}

Model load_model(const std::filesystem::path& path, const ParseOptions& options) {
    const std::string text = read_file(path);
    try {
        return model_from_json(text, options);
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    } catch (const ValidationError& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
}

Network load_network(const std::filesystem::path& path, const ParseOptions& options) {
    Model m = load_model(path, options);
    if (!std::holds_alternative<Network>(m)) throw ValidationError(path.string() + ": expected a network, found an ensemble");
    return std::get<Network>(std::move(m));
}

}  // namespace ilin
