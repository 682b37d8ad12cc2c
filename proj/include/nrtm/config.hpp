#pragma once

// Run configuration: one JSON document with sections oracle, sampling,
// network, lut, retrieval, bench and a global seed. Every field has a
// default; unknown keys are rejected with their full path.

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "nrtm/emulator.hpp"
#include "nrtm/errors.hpp"
#include "nrtm/io.hpp"
#include "nrtm/lut.hpp"
#include "nrtm/retrieval.hpp"
#include "nrtm/sampling.hpp"

namespace nrtm {

struct SamplingConfig {
    std::size_t n = 8192;
    std::size_t k = 32;
    double lambda_min = 0.35;
    double lambda_max = 1.05;
    std::vector<double> lambdas;  ///< explicit grid; overrides k / lambda_min / lambda_max
    SamplingMethod method = SamplingMethod::latin_hypercube;
    StateRanges ranges;
    SplitFractions fractions;

    WavelengthGrid grid() const {
        return lambdas.empty() ? WavelengthGrid::uniform(k, lambda_min, lambda_max) : WavelengthGrid(lambdas);
    }
};

struct LutConfig {
    std::array<std::size_t, kLutAxes> knots{9, 9, 9, 9, 9};
    std::uint64_t cap_bytes = kDefaultLutCapBytes;
};

enum class RetrievalMode { known_atmosphere, joint };

struct BenchConfig {
    std::size_t queries = 1000;
    std::size_t repeats = 3;
    int quadrature_depth = 256;  ///< oracle amplification for the timed engine
};

struct RunConfig {
    std::uint64_t seed = 0;
    OracleConfig oracle;
    SamplingConfig sampling;
    EmulatorOptions network;
    LutConfig lut;
    RetrievalMode retrieval_mode = RetrievalMode::known_atmosphere;
    RetrievalConfig retrieval;
    BenchConfig bench;

    /// The network seed follows the global seed.
    EmulatorOptions emulator_options() const {
        EmulatorOptions o = network;
        o.seed = derive_seed(seed, 1);
        return o;
    }
};

namespace detail {

/// Overlays `patch` onto `base`. Every key in `patch` must already exist in
/// `base`; objects merge recursively, anything else is replaced.
inline void merge_checked(nlohmann::json& base, const nlohmann::json& patch, const std::string& path) {
    if (!patch.is_object()) throw ConfigError((path.empty() ? "config" : path) + ": expected an object");
    for (const auto& [key, val] : patch.items()) {
        const std::string p = path.empty() ? key : path + "." + key;
        if (!base.contains(key)) throw ConfigError("unknown config key '" + p + "'");
        nlohmann::json& slot = base[key];
        if (slot.is_object())
            merge_checked(slot, val, p);
        else
            slot = val;
    }
}

template <typename T>
T field(const nlohmann::json& j, const char* key, const std::string& path) {
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config field '" + path + "." + key + "' has the wrong type");
    }
}

inline std::size_t count_field(const nlohmann::json& j, const char* key, const std::string& path) {
    const auto& v = j.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
        throw ConfigError("config field '" + path + "." + key + "' must be a non-negative integer");
    return v.get<std::size_t>();
}

}  // namespace detail

inline std::string_view to_string(RetrievalMode m) { return m == RetrievalMode::joint ? "joint" : "known_atmosphere"; }

inline RetrievalMode parse_retrieval_mode(std::string_view s) {
    if (s == "known_atmosphere" || s == "known") return RetrievalMode::known_atmosphere;
    if (s == "joint") return RetrievalMode::joint;
    throw ConfigError("retrieval.mode must be known_atmosphere or joint, got '" + std::string(s) + "'");
}

inline nlohmann::json to_json(const RunConfig& c) {
    const TrainOptions& t = c.network.train;
    nlohmann::json j;
    j["seed"] = c.seed;
    j["oracle"] = to_json(c.oracle);
    j["sampling"] = {{"n", c.sampling.n},
                     {"k", c.sampling.k},
                     {"lambda_min", c.sampling.lambda_min},
                     {"lambda_max", c.sampling.lambda_max},
                     {"lambdas", c.sampling.lambdas},
                     {"method", to_string(c.sampling.method)},
                     {"ranges", to_json(c.sampling.ranges)},
                     {"fractions", to_json(c.sampling.fractions)}};
    j["network"] = {{"layer_dims", c.network.layer_dims},
                    {"lr", t.adam.lr},
                    {"beta1", t.adam.beta1},
                    {"beta2", t.adam.beta2},
                    {"adam_eps", t.adam.eps},
                    {"batch_size", t.batch_size},
                    {"max_epochs", t.max_epochs},
                    {"epsilon", t.epsilon},
                    {"patience", t.patience},
                    {"min_improvement", t.min_improvement},
                    {"loss", to_string(t.loss)},
                    {"lr_factor", t.lr_factor},
                    {"lr_patience", t.lr_patience},
                    {"min_lr", t.min_lr},
                    {"lr_gamma", t.lr_gamma}};
    j["lut"] = {{"knots", c.lut.knots}, {"cap_bytes", c.lut.cap_bytes}};
    j["retrieval"] = {{"mode", to_string(c.retrieval_mode)},
                      {"basis_order", c.retrieval.basis_order},
                      {"tol", c.retrieval.tol},
                      {"max_iters", c.retrieval.max_iters},
                      {"lm_lambda", c.retrieval.lm_lambda},
                      {"starts_per_axis", c.retrieval.starts_per_axis},
                      {"noise_sigma", c.retrieval.noise_sigma}};
    j["bench"] = {{"queries", c.bench.queries},
                  {"repeats", c.bench.repeats},
                  {"quadrature_depth", c.bench.quadrature_depth}};
    return j;
}

/// Builds a config from a fully populated document (see `resolve_config`).
inline RunConfig run_config_from_json(const nlohmann::json& j) {
    using detail::count_field;
    using detail::field;
    RunConfig c;
    c.seed = field<std::uint64_t>(j, "seed", "");

    c.oracle = oracle_config_from_json(j.at("oracle"));

    const auto& s = j.at("sampling");
    c.sampling.n = count_field(s, "n", "sampling");
    c.sampling.k = count_field(s, "k", "sampling");
    c.sampling.lambda_min = field<double>(s, "lambda_min", "sampling");
    c.sampling.lambda_max = field<double>(s, "lambda_max", "sampling");
    c.sampling.lambdas = field<std::vector<double>>(s, "lambdas", "sampling");
    c.sampling.method = parse_sampling_method(field<std::string>(s, "method", "sampling"));
    c.sampling.ranges = state_ranges_from_json(s.at("ranges"), "sampling.ranges");
    c.sampling.fractions = split_fractions_from_json(s.at("fractions"));
    if (c.sampling.n == 0) throw ConfigError("sampling.n must be >= 1");
    if (!(c.sampling.lambda_min < c.sampling.lambda_max) && c.sampling.k > 1)
        throw ConfigError("sampling.lambda_min must be < sampling.lambda_max");
    (void)c.sampling.grid();  // validates the wavelengths

    const auto& n = j.at("network");
    TrainOptions& t = c.network.train;
    c.network.layer_dims = field<std::vector<std::size_t>>(n, "layer_dims", "network");
    t.adam.lr = field<double>(n, "lr", "network");
    t.adam.beta1 = field<double>(n, "beta1", "network");
    t.adam.beta2 = field<double>(n, "beta2", "network");
    t.adam.eps = field<double>(n, "adam_eps", "network");
    t.batch_size = count_field(n, "batch_size", "network");
    t.max_epochs = count_field(n, "max_epochs", "network");
    t.epsilon = field<double>(n, "epsilon", "network");
    t.patience = count_field(n, "patience", "network");
    t.min_improvement = field<double>(n, "min_improvement", "network");
    t.loss = parse_loss(field<std::string>(n, "loss", "network"));
    t.lr_factor = field<double>(n, "lr_factor", "network");
    t.lr_patience = count_field(n, "lr_patience", "network");
    t.min_lr = field<double>(n, "min_lr", "network");
    t.lr_gamma = field<double>(n, "lr_gamma", "network");
    if (c.network.layer_dims.size() < 2 || c.network.layer_dims.front() != kChannelInputs ||
        c.network.layer_dims.back() != 1)
        throw ConfigError("network.layer_dims must start with 5 and end with 1");
    for (std::size_t d : c.network.layer_dims)
        if (d == 0) throw ConfigError("network.layer_dims entries must be >= 1");
    if (!(t.adam.lr > 0.0)) throw ConfigError("network.lr must be > 0");
    if (!(t.adam.beta1 >= 0.0 && t.adam.beta1 < 1.0 && t.adam.beta2 >= 0.0 && t.adam.beta2 < 1.0))
        throw ConfigError("network.beta1 and network.beta2 must lie in [0, 1)");
    if (!(t.adam.eps > 0.0)) throw ConfigError("network.adam_eps must be > 0");
    if (t.batch_size == 0) throw ConfigError("network.batch_size must be >= 1");
    if (t.max_epochs == 0) throw ConfigError("network.max_epochs must be >= 1");
    if (!(t.epsilon >= 0.0)) throw ConfigError("network.epsilon must be >= 0");
    if (!(t.lr_factor > 0.0 && t.lr_factor <= 1.0)) throw ConfigError("network.lr_factor must lie in (0, 1]");
    if (!(t.lr_gamma > 0.0 && t.lr_gamma <= 1.0)) throw ConfigError("network.lr_gamma must lie in (0, 1]");
    if (!(t.min_lr >= 0.0)) throw ConfigError("network.min_lr must be >= 0");

    const auto& l = j.at("lut");
    const auto knots = field<std::vector<std::size_t>>(l, "knots", "lut");
    if (knots.size() != kLutAxes) throw ConfigError("lut.knots must list 5 knot counts");
    for (std::size_t a = 0; a < kLutAxes; ++a) {
        if (knots[a] < 2) throw ConfigError("lut.knots entries must be >= 2");
        c.lut.knots[a] = knots[a];
    }
    c.lut.cap_bytes = field<std::uint64_t>(l, "cap_bytes", "lut");

    const auto& r = j.at("retrieval");
    c.retrieval_mode = parse_retrieval_mode(field<std::string>(r, "mode", "retrieval"));
    c.retrieval.basis_order = count_field(r, "basis_order", "retrieval");
    c.retrieval.tol = field<double>(r, "tol", "retrieval");
    c.retrieval.max_iters = count_field(r, "max_iters", "retrieval");
    c.retrieval.lm_lambda = field<double>(r, "lm_lambda", "retrieval");
    c.retrieval.starts_per_axis = count_field(r, "starts_per_axis", "retrieval");
    c.retrieval.noise_sigma = field<double>(r, "noise_sigma", "retrieval");
    c.retrieval.noise_seed = derive_seed(c.seed, 2);
    c.retrieval.validate();

    const auto& b = j.at("bench");
    c.bench.queries = count_field(b, "queries", "bench");
    c.bench.repeats = count_field(b, "repeats", "bench");
    c.bench.quadrature_depth = field<int>(b, "quadrature_depth", "bench");
    if (c.bench.queries == 0) throw ConfigError("bench.queries must be >= 1");
    if (c.bench.repeats == 0) throw ConfigError("bench.repeats must be >= 1");
    if (c.bench.quadrature_depth < 0) throw ConfigError("bench.quadrature_depth must be >= 0");
    return c;
}

/// Parses one `section.key=value` override into a patch object. The value is
/// read as JSON when it parses, otherwise as a plain string.
inline nlohmann::json parse_override(std::string_view assignment) {
    const std::size_t eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0)
        throw ConfigError("override '" + std::string(assignment) + "' must look like section.key=value");
    const std::string path(assignment.substr(0, eq));
    const std::string text(assignment.substr(eq + 1));
    nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;

    nlohmann::json patch = nlohmann::json::object();
    nlohmann::json* node = &patch;
    std::size_t start = 0;
    while (true) {
        const std::size_t dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) throw ConfigError("override path '" + path + "' has an empty component");
        if (dot == std::string::npos) {
            (*node)[key] = std::move(value);
            break;
        }
        node = &(*node)[key];
        *node = nlohmann::json::object();
        start = dot + 1;
    }
    return patch;
}

/// Defaults, then the config file (if any), then each override in order.
inline RunConfig resolve_config(const nlohmann::json& file, const std::vector<std::string>& overrides) {
    nlohmann::json doc = to_json(RunConfig{});
    if (!file.is_null()) detail::merge_checked(doc, file, "");
    for (const auto& o : overrides) detail::merge_checked(doc, parse_override(o), "");
    return run_config_from_json(doc);
}

}  // namespace nrtm
