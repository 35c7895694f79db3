#include "ntkcorr/network.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>

#include "ntkcorr/errors.hpp"

namespace ntkcorr {

std::string to_string(InitScheme s) {
    switch (s) {
        case InitScheme::Gaussian: return "gaussian";
        case InitScheme::UniformSymmetric: return "uniform-symmetric";
        case InitScheme::RademacherScaled: return "rademacher-scaled";
    }
    return "?";
}

std::string to_string(VarianceRule r) {
    return r == VarianceRule::FanIn ? "fan-in" : "fan-out";
}

std::string to_string(ModelKind m) {
    switch (m) {
        case ModelKind::Fcnn: return "fcnn";
        case ModelKind::FcnnPerNeuron: return "fcnn-per-neuron";
        case ModelKind::QuadraticPerp: return "quadratic-perp";
    }
    return "?";
}

InitScheme init_scheme_from_string(const std::string& s) {
    if (s == "gaussian") {
        return InitScheme::Gaussian;
    }
    if (s == "uniform-symmetric") {
        return InitScheme::UniformSymmetric;
    }
    if (s == "rademacher-scaled") {
        return InitScheme::RademacherScaled;
    }
    throw ConfigError("unknown init scheme '" + s + "'");
}

VarianceRule variance_rule_from_string(const std::string& s) {
    if (s == "fan-in") {
        return VarianceRule::FanIn;
    }
    if (s == "fan-out") {
        return VarianceRule::FanOut;
    }
    throw ConfigError("unknown variance rule '" + s + "'");
}

ModelKind model_kind_from_string(const std::string& s) {
    if (s == "fcnn") {
        return ModelKind::Fcnn;
    }
    if (s == "fcnn-per-neuron") {
        return ModelKind::FcnnPerNeuron;
    }
    if (s == "quadratic-perp") {
        return ModelKind::QuadraticPerp;
    }
    throw ConfigError("unknown model kind '" + s + "'");
}

std::vector<std::size_t> NetworkConfig::widths() const {
    std::vector<std::size_t> w;
    w.push_back(static_cast<std::size_t>(input_dim));
    for (int l = 1; l < depth; ++l) {
        w.push_back(static_cast<std::size_t>(hidden_width));
    }
    w.push_back(static_cast<std::size_t>(output_dim));
    return w;
}

double NetworkConfig::eta() const {
    if (model_kind == ModelKind::QuadraticPerp) {
        // Features already carry the 1/sqrt(n) normalization, so the kernel
        // is O(c_eta) without further width scaling.
        return c_eta;
    }
    return c_eta / static_cast<double>(hidden_width);
}

void NetworkConfig::validate() const {
    if (model_kind == ModelKind::QuadraticPerp) {
        if (hidden_width < 2 || hidden_width % 2 != 0) {
            throw ConfigError("quadratic-perp model needs an even feature count >= 2");
        }
        if (input_dim < 1) {
            throw ConfigError("input_dim must be positive");
        }
        return;
    }
    // depth 1 is the exactly-linear model used by the degeneracy checks
    if (depth < 1) {
        throw ConfigError("depth must be >= 1");
    }
    if (input_dim < 1 || output_dim < 1 || hidden_width < 1) {
        throw ConfigError("widths must be positive");
    }
    if (model_kind == ModelKind::Fcnn && !activation_registered(activation)) {
        throw ConfigError("unknown activation '" + activation + "'");
    }
    if (bias_variance < 0.0) {
        throw ConfigError("bias_variance must be >= 0");
    }
}

nlohmann::json NetworkConfig::to_json() const {
    nlohmann::json j;
    j["depth"] = depth;
    j["input_dim"] = input_dim;
    j["output_dim"] = output_dim;
    j["hidden_width"] = hidden_width;
    j["activation"] = activation;
    j["model_kind"] = to_string(model_kind);
    j["init_scheme"] = to_string(init_scheme);
    j["variance_rule"] = to_string(variance_rule);
    j["bias_variance"] = bias_variance;
    j["c_eta"] = c_eta;
    j["phi_on_input"] = phi_on_input;
    j["quad_feature_seed"] = quad_feature_seed;
    return j;
}

NetworkConfig NetworkConfig::from_json(const nlohmann::json& j) {
    NetworkConfig c;
    c.depth = j.value("depth", c.depth);
    c.input_dim = j.value("input_dim", c.input_dim);
    c.output_dim = j.value("output_dim", c.output_dim);
    c.hidden_width = j.value("hidden_width", c.hidden_width);
    c.activation = j.value("activation", c.activation);
    c.model_kind = model_kind_from_string(j.value("model_kind", std::string("fcnn")));
    c.init_scheme = init_scheme_from_string(j.value("init_scheme", std::string("gaussian")));
    c.variance_rule = variance_rule_from_string(j.value("variance_rule", std::string("fan-in")));
    c.bias_variance = j.value("bias_variance", c.bias_variance);
    c.c_eta = j.value("c_eta", c.c_eta);
    c.phi_on_input = j.value("phi_on_input", c.phi_on_input);
    c.quad_feature_seed = j.value("quad_feature_seed", c.quad_feature_seed);
    c.validate();
    return c;
}

NetworkParams NetworkParams::zeros_for(const NetworkConfig& config) {
    NetworkParams p;
    if (config.model_kind == ModelKind::QuadraticPerp) {
        p.flat.assign(static_cast<std::size_t>(config.hidden_width), 0.0);
        LayerShape s;
        s.rows = 1;
        s.cols = static_cast<std::size_t>(config.hidden_width);
        s.w_offset = 0;
        s.b_offset = p.flat.size();
        s.bias_len = 0;
        p.layers.push_back(s);
        return p;
    }
    const auto widths = config.widths();
    std::size_t offset = 0;
    for (std::size_t l = 1; l < widths.size(); ++l) {
        LayerShape s;
        s.rows = widths[l];
        s.cols = widths[l - 1];
        s.w_offset = offset;
        offset += s.rows * s.cols;
        s.b_offset = offset;
        s.bias_len = s.rows;
        offset += s.rows;
        p.layers.push_back(s);
    }
    p.flat.assign(offset, 0.0);
    return p;
}

namespace {

double draw_with_variance(Rng& rng, InitScheme scheme, double variance) {
    if (variance == 0.0) {
        return 0.0;
    }
    const double sd = std::sqrt(variance);
    switch (scheme) {
        case InitScheme::Gaussian:
            return sd * rng.normal();
        case InitScheme::UniformSymmetric:
            // Uniform on [-a, a] with a = sqrt(3) sd gives the target variance.
            return rng.uniform(-1.0, 1.0) * sd * 1.7320508075688772;
        case InitScheme::RademacherScaled:
            return (rng.next_u64() & 1ULL) ? sd : -sd;
    }
    return 0.0;
}

}  // namespace

NetworkParams init_params(const NetworkConfig& config, std::uint64_t seed) {
    config.validate();
    NetworkParams p = NetworkParams::zeros_for(config);
    if (config.model_kind == ModelKind::QuadraticPerp) {
        return p;  // theta starts at zero
    }
    Rng rng(mix_seed({seed, hash_str("init"), 0}));
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const auto& shape = p.layers[l];
        const double fan = config.variance_rule == VarianceRule::FanIn
                               ? static_cast<double>(shape.cols)
                               : static_cast<double>(shape.rows);
        const double wvar = 1.0 / fan;
        for (double& w : p.weight(l)) {
            w = draw_with_variance(rng, config.init_scheme, wvar);
        }
        for (double& b : p.bias(l)) {
            b = draw_with_variance(rng, config.init_scheme, config.bias_variance);
        }
    }
    return p;
}

double phi_value(const NetworkConfig& config, std::size_t src_layer, std::size_t j, double x) {
    if (src_layer == 0 && !config.phi_on_input) {
        return x;
    }
    if (config.per_neuron()) {
        const auto& ids = activation_ids();
        // identity excluded from the per-neuron cycle (last registry entry)
        return activation(ids[j % (ids.size() - 1)]).value(x);
    }
    return activation(config.activation).value(x);
}

double phi_deriv(const NetworkConfig& config, std::size_t src_layer, std::size_t j, int order,
                 double x) {
    if (order == 0) {
        return phi_value(config, src_layer, j, x);
    }
    if (src_layer == 0 && !config.phi_on_input) {
        return order == 1 ? 1.0 : 0.0;
    }
    if (config.per_neuron()) {
        const auto& ids = activation_ids();
        return activation(ids[j % (ids.size() - 1)]).d(order, x);
    }
    return activation(config.activation).d(order, x);
}

std::vector<std::vector<double>> forward_layers(const NetworkConfig& config,
                                                const NetworkParams& params,
                                                std::span<const double> x) {
    if (config.model_kind == ModelKind::QuadraticPerp) {
        if (x.size() != static_cast<std::size_t>(config.input_dim)) {
            throw InputError("forward: input length does not match input_dim");
        }
        const auto& feats = quad_features(config);
        std::vector<std::vector<double>> out(2);
        out[0].assign(x.begin(), x.end());
        out[1] = {quad_value(feats, params.flat, x)};
        return out;
    }
    if (x.size() != static_cast<std::size_t>(config.input_dim)) {
        throw InputError("forward: input length does not match input_dim");
    }
    const std::size_t L = params.layers.size();
    std::vector<std::vector<double>> acts(L + 1);
    acts[0].assign(x.begin(), x.end());
    std::vector<double> buf;
    for (std::size_t l = 0; l < L; ++l) {
        const auto& shape = params.layers[l];
        buf.resize(shape.cols);
        for (std::size_t j = 0; j < shape.cols; ++j) {
            buf[j] = phi_value(config, l, j, acts[l][j]);
        }
        std::vector<double>& out = acts[l + 1];
        out.resize(shape.rows);
        const double* w = params.flat.data() + shape.w_offset;
        const double* b = params.flat.data() + shape.b_offset;
        for (std::size_t i = 0; i < shape.rows; ++i) {
            double s = b[i];
            const double* row = w + i * shape.cols;
            for (std::size_t j = 0; j < shape.cols; ++j) {
                s += row[j] * buf[j];
            }
            out[i] = s;
        }
    }
    return acts;
}

std::vector<double> forward(const NetworkConfig& config, const NetworkParams& params,
                            std::span<const double> x) {
    return forward_layers(config, params, x).back();
}

std::vector<double> QuadPerpFeatures::features(std::span<const double> x) const {
    std::vector<double> f(n_features);
    const double scale = std::sqrt(2.0 / static_cast<double>(n_features));
    for (std::size_t i = 0; i < n_features; ++i) {
        double arg = phase[i];
        const double* row = omega.data() + i * input_dim;
        for (std::size_t k = 0; k < input_dim; ++k) {
            arg += row[k] * x[k];
        }
        f[i] = scale * std::cos(arg);
    }
    return f;
}

std::vector<double> QuadPerpFeatures::rotate(const std::vector<double>& f) {
    std::vector<double> g(f.size());
    for (std::size_t i = 0; i + 1 < f.size(); i += 2) {
        g[i] = -f[i + 1];
        g[i + 1] = f[i];
    }
    return g;
}

const QuadPerpFeatures& quad_features(const NetworkConfig& config) {
    struct Key {
        std::uint64_t seed;
        std::size_t n;
        std::size_t d;
        bool operator<(const Key& o) const {
            if (seed != o.seed) {
                return seed < o.seed;
            }
            if (n != o.n) {
                return n < o.n;
            }
            return d < o.d;
        }
    };
    static std::mutex mu;
    static std::map<Key, QuadPerpFeatures> cache;

    const Key key{config.quad_feature_seed, static_cast<std::size_t>(config.hidden_width),
                  static_cast<std::size_t>(config.input_dim)};
    std::scoped_lock lock(mu);
    auto it = cache.find(key);
    if (it != cache.end()) {
        return it->second;
    }
    QuadPerpFeatures feats;
    feats.n_features = key.n;
    feats.input_dim = key.d;
    Rng rng(mix_seed({key.seed, hash_str("quad-features"), key.n}));
    feats.omega.resize(key.n * key.d);
    const double bandwidth = 2.0;
    for (double& w : feats.omega) {
        w = bandwidth * rng.normal();
    }
    feats.phase.resize(key.n);
    for (double& p : feats.phase) {
        p = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    }
    return cache.emplace(key, std::move(feats)).first->second;
}

double quad_value(const QuadPerpFeatures& feats, std::span<const double> theta,
                  std::span<const double> x) {
    if (theta.size() != feats.n_features) {
        throw InputError("quad_value: parameter length mismatch");
    }
    const std::vector<double> f = feats.features(x);
    const std::vector<double> g = QuadPerpFeatures::rotate(f);
    double lin = 0.0;
    double tg = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
        lin += theta[i] * f[i];
        tg += theta[i] * g[i];
    }
    return lin + tg * tg;
}

std::map<std::string, std::vector<SweepSample>> layer_norm_audit(
    const NetworkConfig& base, const std::vector<std::size_t>& widths_grid, std::size_t seeds,
    std::uint64_t master_seed) {
    std::map<std::string, std::vector<SweepSample>> out;
    for (std::size_t n : widths_grid) {
        NetworkConfig cfg = base;
        cfg.hidden_width = static_cast<int>(n);
        for (std::size_t s = 0; s < seeds; ++s) {
            const std::uint64_t cell = mix_seed({master_seed, hash_str("layer_norm"), n, s});
            Rng rng(cell);
            const NetworkParams params = init_params(cfg, cell);
            const std::vector<double> x = rng.unit_sphere(static_cast<std::size_t>(cfg.input_dim));
            const auto acts = forward_layers(cfg, params, x);
            for (std::size_t l = 1; l < acts.size(); ++l) {
                double norm_sq = 0.0;
                for (double v : acts[l]) {
                    norm_sq += v * v;
                }
                const double stat =
                    std::sqrt(norm_sq / static_cast<double>(acts[l].size()));
                out["layer_norm_l" + std::to_string(l)].push_back({n, s, stat});
            }
        }
    }
    return out;
}

std::vector<double> Task::sample_input(Rng& rng) const {
    return rng.unit_sphere(static_cast<std::size_t>(input_dim));
}

std::vector<double> Task::target_at(std::span<const double> x) const {
    std::vector<double> out;
    if (target == "teacher") {
        out = forward(teacher_config, teacher_params, x);
    } else if (target == "sinusoid") {
        // fixed smooth scalar function, broadcast across outputs
        Rng dir_rng(mix_seed({task_seed, hash_str("sinusoid")}));
        const std::vector<double> w = dir_rng.unit_sphere(static_cast<std::size_t>(input_dim));
        double arg = 0.0;
        for (std::size_t k = 0; k < x.size(); ++k) {
            arg += w[k] * x[k];
        }
        out.assign(static_cast<std::size_t>(output_dim), std::sin(3.0 * arg));
    } else {
        // "linear": one fixed direction per output; degree-1 spherical
        // harmonics sit in a single kernel eigenspace, so the linearized
        // error decays at one rate
        Rng dir_rng(mix_seed({task_seed, hash_str("linear-target")}));
        out.resize(static_cast<std::size_t>(output_dim));
        for (int i = 0; i < output_dim; ++i) {
            const std::vector<double> w =
                dir_rng.unit_sphere(static_cast<std::size_t>(input_dim));
            double arg = 0.0;
            for (std::size_t k = 0; k < x.size(); ++k) {
                arg += w[k] * x[k];
            }
            out[static_cast<std::size_t>(i)] = arg;
        }
    }
    for (double& v : out) {
        v *= target_scale;
    }
    return out;
}

nlohmann::json Task::to_json() const {
    nlohmann::json j;
    j["input_dim"] = input_dim;
    j["output_dim"] = output_dim;
    j["target"] = target;
    j["target_scale"] = target_scale;
    j["task_seed"] = task_seed;
    j["teacher_width"] = teacher_width;
    j["teacher_depth"] = teacher_depth;
    j["teacher_activation"] = teacher_activation;
    j["probe_count"] = probe_count;
    return j;
}

Task Task::from_json(const nlohmann::json& j) {
    Task t = make_task(j.value("input_dim", 8), j.value("output_dim", 1),
                       j.value("target", std::string("teacher")),
                       j.value("task_seed", std::uint64_t{1234}), j.value("probe_count", 32),
                       j.value("target_scale", 1.0));
    return t;
}

Task make_task(int input_dim, int output_dim, const std::string& target, std::uint64_t task_seed,
               int probe_count, double target_scale) {
    if (target != "teacher" && target != "sinusoid" && target != "linear") {
        throw ConfigError("unknown target '" + target + "'");
    }
    Task t;
    t.input_dim = input_dim;
    t.output_dim = output_dim;
    t.target = target;
    t.target_scale = target_scale;
    t.task_seed = task_seed;
    t.probe_count = probe_count;

    t.teacher_config.depth = t.teacher_depth;
    t.teacher_config.input_dim = input_dim;
    t.teacher_config.output_dim = output_dim;
    t.teacher_config.hidden_width = t.teacher_width;
    t.teacher_config.activation = t.teacher_activation;
    t.teacher_params = init_params(t.teacher_config, mix_seed({task_seed, hash_str("teacher")}));

    Rng probe_rng(mix_seed({task_seed, hash_str("probe")}));
    t.probe.reserve(static_cast<std::size_t>(probe_count));
    for (int i = 0; i < probe_count; ++i) {
        t.probe.push_back(probe_rng.unit_sphere(static_cast<std::size_t>(input_dim)));
    }
    return t;
}

void save_params(const NetworkParams& params, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw InputError("save_params: cannot open '" + path + "'");
    }
    nlohmann::json header;
    std::vector<std::vector<std::size_t>> shapes;
    for (const auto& s : params.layers) {
        shapes.push_back({s.rows, s.cols, s.w_offset, s.b_offset, s.bias_len});
    }
    header["shapes"] = shapes;
    header["total"] = params.flat.size();
    os << header.dump() << '\n';
    static_assert(std::endian::native == std::endian::little,
                  "snapshot format is little-endian");
    os.write(reinterpret_cast<const char*>(params.flat.data()),
             static_cast<std::streamsize>(params.flat.size() * sizeof(double)));
}

NetworkParams load_params(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw InputError("load_params: cannot open '" + path + "'");
    }
    std::string header_line;
    if (!std::getline(is, header_line)) {
        throw InputError("load_params: missing header");
    }
    const nlohmann::json header = nlohmann::json::parse(header_line);
    NetworkParams p;
    const std::size_t total = header.at("total").get<std::size_t>();
    for (const auto& sj : header.at("shapes")) {
        LayerShape s;
        s.rows = sj.at(0).get<std::size_t>();
        s.cols = sj.at(1).get<std::size_t>();
        s.w_offset = sj.at(2).get<std::size_t>();
        s.b_offset = sj.at(3).get<std::size_t>();
        s.bias_len = sj.at(4).get<std::size_t>();
        if (s.b_offset + s.bias_len > total || s.w_offset + s.rows * s.cols > total) {
            throw InputError("load_params: inconsistent header");
        }
        p.layers.push_back(s);
    }
    p.flat.resize(total);
    is.read(reinterpret_cast<char*>(p.flat.data()),
            static_cast<std::streamsize>(total * sizeof(double)));
    if (!is) {
        throw InputError("load_params: truncated payload");
    }
    return p;
}

}  // namespace ntkcorr
