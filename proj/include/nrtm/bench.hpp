#pragma once

// Throughput and accuracy of interchangeable forward engines (oracle,
// emulator, LUT) on one shuffled batch of query states.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <functional>
#include <numeric>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include <sys/utsname.h>

#include "nrtm/emulator.hpp"
#include "nrtm/errors.hpp"
#include "nrtm/io.hpp"
#include "nrtm/lut.hpp"
#include "nrtm/oracle.hpp"
#include "nrtm/rng.hpp"
#include "nrtm/sampling.hpp"

namespace nrtm {

/// A forward model answering n x (4 + k) queries with an n x k spectrum block.
struct BenchEngine {
    std::string name;
    std::function<Eigen::MatrixXd(const Eigen::MatrixXd&)> run;
    double precompute_seconds = 0.0;
    std::uint64_t memory_bytes = 0;
    std::size_t precompute_spectra = 0;  ///< oracle spectra spent before the first query
};

inline BenchEngine oracle_engine(const WavelengthGrid& grid, OracleConfig cfg, int quadrature_depth) {
    cfg.quadrature_depth = quadrature_depth;
    cfg.validate();
    BenchEngine e;
    e.name = "oracle_N" + std::to_string(quadrature_depth);
    e.run = [grid, cfg](const Eigen::MatrixXd& X) {
        const std::size_t k = grid.k();
        Eigen::MatrixXd Y(X.rows(), static_cast<Eigen::Index>(k));
        std::vector<double> rho(k), y(k);
        for (Eigen::Index r = 0; r < X.rows(); ++r) {
            const AtmosphericState st{X(r, 0), X(r, 1), X(r, 2), X(r, 3)};
            for (std::size_t i = 0; i < k; ++i) rho[i] = X(r, static_cast<Eigen::Index>(kAtmParams + i));
            spectrum_into(st, rho, grid, cfg, y);
            for (std::size_t i = 0; i < k; ++i) Y(r, static_cast<Eigen::Index>(i)) = y[i];
        }
        return Y;
    };
    return e;
}

inline std::uint64_t parameter_bytes(const EmulatorModel& F) {
    std::uint64_t b = 0;
    for (const auto& m : F.subnets)
        for (std::size_t l = 0; l < m.weights.size(); ++l)
            b += static_cast<std::uint64_t>(m.weights[l].size() + m.biases[l].size()) * sizeof(double);
    return b + static_cast<std::uint64_t>(F.scaler.mean.size() + F.scaler.stddev.size()) * sizeof(double);
}

/// `F` must outlive the engine.
inline BenchEngine emulator_engine(const EmulatorModel& F, double train_seconds, std::size_t train_spectra) {
    BenchEngine e;
    e.name = "emulator";
    e.run = [&F](const Eigen::MatrixXd& X) { return predict_batch(F, X); };
    e.precompute_seconds = train_seconds;
    e.memory_bytes = parameter_bytes(F);
    e.precompute_spectra = train_spectra;
    return e;
}

/// `lut` must outlive the engine.
inline BenchEngine lut_engine(std::string name, const LookupTable& lut, double build_seconds) {
    BenchEngine e;
    e.name = std::move(name);
    e.run = [&lut](const Eigen::MatrixXd& X) {
        const std::size_t k = lut.k();
        Eigen::MatrixXd Y(X.rows(), static_cast<Eigen::Index>(k));
        SurfaceSpectrum surf;
        surf.rho_s.resize(k);
        for (Eigen::Index r = 0; r < X.rows(); ++r) {
            const AtmosphericState st{X(r, 0), X(r, 1), X(r, 2), X(r, 3)};
            for (std::size_t i = 0; i < k; ++i) surf.rho_s[i] = X(r, static_cast<Eigen::Index>(kAtmParams + i));
            const auto y = interpolate_spectrum(lut, st, surf);
            for (std::size_t i = 0; i < k; ++i) Y(r, static_cast<Eigen::Index>(i)) = y[i];
        }
        return Y;
    };
    e.precompute_seconds = build_seconds;
    e.memory_bytes = lut.footprint_bytes();
    e.precompute_spectra = lut.knot_combinations();
    return e;
}

struct TimingStats {
    std::vector<double> seconds;  ///< one per timed repeat
    double median = 0.0;
    double min = 0.0;
    double max = 0.0;
};

inline TimingStats summarize(std::vector<double> s) {
    TimingStats t;
    t.seconds = s;
    if (s.empty()) return t;
    std::sort(s.begin(), s.end());
    const std::size_t n = s.size();
    t.median = n % 2 ? s[n / 2] : 0.5 * (s[n / 2 - 1] + s[n / 2]);
    t.min = s.front();
    t.max = s.back();
    return t;
}

struct EngineResult {
    std::string name;
    bool ok = false;
    std::string error;
    TimingStats wall;
    double queries_per_second = 0.0;
    double precompute_seconds = 0.0;
    std::uint64_t memory_bytes = 0;
    std::size_t precompute_spectra = 0;
    double nmae = 0.0;  ///< vs the reference engine, mean over channels
    double mae = 0.0;
    bool stable_outputs = true;  ///< every repeat returned bitwise-identical answers
    Eigen::MatrixXd answers;     ///< not serialized
};

struct BenchReport {
    std::size_t queries = 0;
    std::size_t repeats = 0;
    std::string reference;
    std::string machine;
    nlohmann::json config = nlohmann::json::object();
    bool partial = false;
    std::vector<EngineResult> engines;

    const EngineResult* find(std::string_view name) const {
        for (const auto& e : engines)
            if (e.name == name) return &e;
        return nullptr;
    }
};

inline std::string machine_descriptor() {
    std::string d;
    utsname u{};
    if (uname(&u) == 0) d = std::string(u.sysname) + " " + u.release + " " + u.machine;
    std::ifstream cpu("/proc/cpuinfo");
    for (std::string line; std::getline(cpu, line);) {
        if (line.rfind("model name", 0) == 0) {
            const auto colon = line.find(':');
            if (colon != std::string::npos) d += "; " + line.substr(line.find_first_not_of(' ', colon + 1));
            break;
        }
    }
    d += "; threads=" + std::to_string(std::thread::hardware_concurrency());
#if defined(__clang__)
    d += "; clang " __clang_version__;
#elif defined(__GNUC__)
    d += "; gcc " __VERSION__;
#endif
    return d;
}

/// Times every engine on the same shuffled copy of `queries`: one untimed
/// warm-up pass, then `repeats` timed passes. Accuracy is measured against the
/// first engine's answers. A throwing engine is recorded and skipped.
inline BenchReport run_bench(const Eigen::MatrixXd& queries, const std::vector<BenchEngine>& engines, std::size_t repeats,
                             std::uint64_t seed, std::size_t min_queries = 1000) {
    if (static_cast<std::size_t>(queries.rows()) < min_queries)
        throw ConfigError("benchmark needs at least " + std::to_string(min_queries) + " query states");
    if (repeats < 3) throw ConfigError("benchmark needs at least 3 repeats");
    if (engines.empty()) throw ConfigError("benchmark needs at least one engine");

    std::vector<Eigen::Index> order(static_cast<std::size_t>(queries.rows()));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    Rng rng(derive_seed(seed, 0xbe7c4));
    shuffle(std::span<Eigen::Index>(order), rng);
    Eigen::MatrixXd X(queries.rows(), queries.cols());
    for (std::size_t r = 0; r < order.size(); ++r) X.row(static_cast<Eigen::Index>(r)) = queries.row(order[r]);

    BenchReport rep;
    rep.queries = static_cast<std::size_t>(X.rows());
    rep.repeats = repeats;
    rep.reference = engines.front().name;
    rep.machine = machine_descriptor();

    using clock = std::chrono::steady_clock;
    for (const auto& eng : engines) {
        EngineResult res;
        res.name = eng.name;
        res.precompute_seconds = eng.precompute_seconds;
        res.memory_bytes = eng.memory_bytes;
        res.precompute_spectra = eng.precompute_spectra;
        try {
            Eigen::MatrixXd first = eng.run(X);  // warm-up
            std::vector<double> secs;
            for (std::size_t i = 0; i < repeats; ++i) {
                const auto t0 = clock::now();
                Eigen::MatrixXd Y = eng.run(X);
                const auto t1 = clock::now();
                secs.push_back(std::max(std::chrono::duration<double>(t1 - t0).count(), 1e-9));
                if (Y.size() != first.size() || !(Y.array() == first.array()).all()) res.stable_outputs = false;
            }
            res.wall = summarize(std::move(secs));
            res.queries_per_second = static_cast<double>(rep.queries) / res.wall.median;
            res.answers = std::move(first);
            res.ok = true;
        } catch (const std::exception& e) {
            res.error = e.what();
            rep.partial = true;
        }
        rep.engines.push_back(std::move(res));
    }

    const EngineResult& ref = rep.engines.front();
    if (ref.ok) {
        std::vector<double> scale(static_cast<std::size_t>(ref.answers.cols()));
        for (std::size_t c = 0; c < scale.size(); ++c) scale[c] = ref.answers.col(static_cast<Eigen::Index>(c)).cwiseAbs().mean();
        for (auto& e : rep.engines) {
            if (!e.ok) continue;
            if (e.answers.rows() != ref.answers.rows() || e.answers.cols() != ref.answers.cols()) {
                e.ok = false;
                e.error = "answer shape differs from the reference";
                rep.partial = true;
                continue;
            }
            const EvalMetrics m = compute_metrics(e.answers, ref.answers, scale);
            e.nmae = m.overall_nmae;
            e.mae = m.overall_mae;
        }
    }
    return rep;
}

inline nlohmann::json to_json(const BenchReport& r) {
    nlohmann::json eng = nlohmann::json::array();
    for (const auto& e : r.engines) {
        nlohmann::json j = {{"name", e.name}, {"ok", e.ok}};
        if (!e.ok) j["error"] = e.error;
        j["wall_seconds"] = {{"median", e.wall.median}, {"min", e.wall.min}, {"max", e.wall.max}, {"repeats", e.wall.seconds}};
        j["queries_per_second"] = e.queries_per_second;
        j["precompute_seconds"] = e.precompute_seconds;
        j["precompute_spectra"] = e.precompute_spectra;
        j["memory_bytes"] = e.memory_bytes;
        j["nmae"] = e.nmae;
        j["mae"] = e.mae;
        j["stable_outputs"] = e.stable_outputs;
        eng.push_back(std::move(j));
    }
    return {{"queries", r.queries}, {"repeats", r.repeats}, {"reference", r.reference}, {"machine", r.machine},
            {"partial", r.partial}, {"engines", eng},     {"config", r.config}};
}

/// Plot-ready long format: engine,metric,value.
inline void write_bench_csv(std::ostream& os, const BenchReport& r) {
    os << "engine,metric,value\n";
    for (const auto& e : r.engines) {
        if (!e.ok) continue;
        const std::pair<const char*, double> rows[] = {
            {"queries_per_second", e.queries_per_second},
            {"median_seconds", e.wall.median},
            {"min_seconds", e.wall.min},
            {"max_seconds", e.wall.max},
            {"precompute_seconds", e.precompute_seconds},
            {"precompute_spectra", static_cast<double>(e.precompute_spectra)},
            {"memory_bytes", static_cast<double>(e.memory_bytes)},
            {"nmae", e.nmae},
            {"mae", e.mae},
        };
        for (const auto& [metric, value] : rows) os << e.name << ',' << metric << ',' << format_double(value) << '\n';
    }
}

/// Knots per axis of the largest equal-knot LUT whose node count does not
/// exceed `spectra` oracle evaluations.
inline std::size_t matched_knots(std::size_t spectra) {
    std::size_t q = 2;
    auto pow5 = [](std::size_t v) { return v * v * v * v * v; };
    while (pow5(q + 1) <= spectra) ++q;
    return q;
}

}  // namespace nrtm
