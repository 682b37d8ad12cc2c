#pragma once

// Neural RTM: one small network per wavelength channel, trained in channel
// order with weight propagation, assembled into F(x) -> rho_obs spectrum.
//
// Channel i's network sees [mu0, tau550, alpha, wvap, rho_s_i] only, so the
// reflectance block of the Jacobian is diagonal by construction.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "nrtm/errors.hpp"
#include "nrtm/neural_net.hpp"
#include "nrtm/oracle.hpp"
#include "nrtm/sampling.hpp"

namespace nrtm {

struct EmulatorOptions {
    std::vector<std::size_t> layer_dims = default_layer_dims();
    TrainOptions train;
    std::uint64_t seed = 0;

    /// Seed for the Glorot initialization of the first channel (and of every
    /// channel in the cold-start arm of the ablation).
    std::uint64_t init_seed() const { return derive_seed(seed, 0); }
    /// Minibatch shuffle seed for channel `i`.
    std::uint64_t shuffle_seed(std::size_t i) const { return derive_seed(seed, 1000 + i); }
};

struct EmulatorModel {
    std::vector<MlpModel> subnets;
    WavelengthGrid grid;
    Scaler scaler;
    StateRanges ranges;                ///< training domain
    std::vector<TrainReport> reports;  ///< one per channel when trained here
    nlohmann::json meta = nlohmann::json::object();

    std::size_t k() const { return grid.k(); }

    void validate() const {
        if (subnets.size() != grid.k())
            throw DimensionError("emulator has " + std::to_string(subnets.size()) + " subnets for " +
                                 std::to_string(grid.k()) + " channels");
        if (scaler.size() != kAtmParams + grid.k()) throw DimensionError("scaler size does not match channel count");
        for (const auto& s : subnets) {
            s.validate();
            if (s.layer_dims != subnets.front().layer_dims)
                throw DimensionError("all subnets must share layer_dims");
            if (s.input_dim() != kChannelInputs) throw DimensionError("subnets must take 5 inputs");
        }
    }
};

/// Initial parameters for the next channel: an exact copy of the previous
/// channel's trained network. Optimizer state is not carried over.
inline MlpModel propagate_weights(const MlpModel& prev) { return prev; }

/// Called after each channel finishes (channel index, its report).
using ChannelCallback = std::function<void(std::size_t, const TrainReport&)>;

/// Trains channel 0 from a Glorot init and every later channel from the
/// previous channel's trained weights, in ascending wavelength order.
inline EmulatorModel train_emulator(const SpectralDataset& ds, const EmulatorOptions& opts,
                                    const ChannelCallback& on_channel = {}) {
    EmulatorModel F;
    F.grid = ds.grid;
    F.scaler = ds.scaler;
    F.ranges = ds.ranges;
    for (std::size_t i = 0; i < ds.k(); ++i) {
        MlpModel init = i == 0 ? glorot_init(opts.layer_dims, opts.init_seed()) : propagate_weights(F.subnets.back());
        const ChannelView view = channel_view(ds, i);
        TrainOptions topts = opts.train;
        topts.seed = opts.shuffle_seed(i);
        TrainResult res;
        try {
            res = train(std::move(init), select(view, Split::train), select(view, Split::val), topts);
        } catch (const NumericalError& e) {
            throw NumericalError("channel " + std::to_string(i) + ": " + e.what());
        }
        if (on_channel) on_channel(i, res.report);
        F.subnets.push_back(std::move(res.model));
        F.reports.push_back(std::move(res.report));
    }
    return F;
}

inline Eigen::Matrix<double, kChannelInputs, 1> emulator_input(const EmulatorModel& F, std::size_t channel,
                                                               const AtmosphericState& state, double rho_s) {
    return standardize_channel_input(F.scaler, channel, state, rho_s);
}

inline std::vector<double> predict_spectrum(const EmulatorModel& F, const AtmosphericState& state,
                                            const SurfaceSpectrum& surf) {
    if (surf.size() != F.k())
        throw DimensionError("surface spectrum length " + std::to_string(surf.size()) + " does not match k=" +
                             std::to_string(F.k()));
    std::vector<double> out(F.k());
    for (std::size_t i = 0; i < F.k(); ++i) out[i] = forward(F.subnets[i], emulator_input(F, i, state, surf.rho_s[i]));
    return out;
}

/// Predictions for many rows at once. `X` uses the dataset column layout
/// [4 atmospheric, k reflectances]; the result is n x k.
inline Eigen::MatrixXd predict_batch(const EmulatorModel& F, const Eigen::Ref<const Eigen::MatrixXd>& X) {
    const std::size_t k = F.k();
    if (static_cast<std::size_t>(X.cols()) != kAtmParams + k)
        throw DimensionError("prediction inputs need " + std::to_string(kAtmParams + k) + " columns");
    const Eigen::Index n = X.rows();
    Eigen::MatrixXd xs(kChannelInputs, n);
    for (std::size_t f = 0; f < kAtmParams; ++f) {
        const auto fi = static_cast<Eigen::Index>(f);
        xs.row(fi) = ((X.col(fi).array() - F.scaler.mean[f]) / F.scaler.stddev[f]).transpose();
    }
    Eigen::MatrixXd out(n, static_cast<Eigen::Index>(k));
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t col = kAtmParams + i;
        xs.row(kAtmParams) =
            ((X.col(static_cast<Eigen::Index>(col)).array() - F.scaler.mean[col]) / F.scaler.stddev[col]).transpose();
        out.col(static_cast<Eigen::Index>(i)) = forward_batch(F.subnets[i], xs).transpose();
    }
    return out;
}

/// k x (4 + k) Jacobian of the predicted spectrum: columns are the four
/// atmospheric parameters then the k surface reflectances, in physical units.
/// Reflectance entries (i, j != i) are exactly zero.
inline Eigen::MatrixXd jacobian(const EmulatorModel& F, const AtmosphericState& state, const SurfaceSpectrum& surf) {
    const std::size_t k = F.k();
    if (surf.size() != k) throw DimensionError("surface spectrum length does not match k");
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(kAtmParams + k));
    for (std::size_t i = 0; i < k; ++i) {
        const Eigen::VectorXd g = input_jacobian(F.subnets[i], emulator_input(F, i, state, surf.rho_s[i]));
        const auto row = static_cast<Eigen::Index>(i);
        for (std::size_t f = 0; f < kAtmParams; ++f)
            J(row, static_cast<Eigen::Index>(f)) = g(static_cast<Eigen::Index>(f)) / F.scaler.stddev[f];
        const std::size_t col = kAtmParams + i;
        J(row, static_cast<Eigen::Index>(col)) = g(kAtmParams) / F.scaler.stddev[col];
    }
    return J;
}

struct EvalMetrics {
    std::vector<double> mae;   ///< per channel, reflectance units
    std::vector<double> nmae;  ///< per channel, mae / mean |y_i| over train rows
    double overall_nmae = 0.0;
    double max_nmae = 0.0;
    double overall_mae = 0.0;
    std::size_t rows = 0;
};

/// Mean |y_i| over the train rows of each channel.
inline std::vector<double> target_scale(const SpectralDataset& ds) {
    const auto train_rows = ds.rows(Split::train);
    if (train_rows.empty()) throw ConfigError("dataset has no train rows to normalize against");
    std::vector<double> s(ds.k(), 0.0);
    for (std::size_t i = 0; i < ds.k(); ++i) {
        for (auto r : train_rows) s[i] += std::abs(ds.Y(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)));
        s[i] /= static_cast<double>(train_rows.size());
    }
    return s;
}

/// Metrics of predictions `pred` (rows x k) against truth `truth` (rows x k).
inline EvalMetrics compute_metrics(const Eigen::Ref<const Eigen::MatrixXd>& pred,
                                   const Eigen::Ref<const Eigen::MatrixXd>& truth, const std::vector<double>& scale) {
    if (pred.rows() != truth.rows() || pred.cols() != truth.cols())
        throw DimensionError("prediction and truth shapes differ");
    if (pred.rows() == 0) throw ConfigError("cannot evaluate an empty split");
    EvalMetrics m;
    m.rows = static_cast<std::size_t>(pred.rows());
    const auto k = static_cast<std::size_t>(pred.cols());
    for (std::size_t i = 0; i < k; ++i) {
        const auto c = static_cast<Eigen::Index>(i);
        const double mae = (pred.col(c) - truth.col(c)).cwiseAbs().mean();
        m.mae.push_back(mae);
        m.nmae.push_back(mae / scale[i]);
    }
    const auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    m.overall_nmae = mean(m.nmae);
    m.overall_mae = mean(m.mae);
    m.max_nmae = *std::max_element(m.nmae.begin(), m.nmae.end());
    return m;
}

inline Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& M, const std::vector<std::size_t>& rows) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), M.cols());
    for (std::size_t j = 0; j < rows.size(); ++j)
        out.row(static_cast<Eigen::Index>(j)) = M.row(static_cast<Eigen::Index>(rows[j]));
    return out;
}

inline EvalMetrics evaluate(const EmulatorModel& F, const SpectralDataset& ds, Split split) {
    if (F.k() != ds.k()) throw DimensionError("emulator and dataset channel counts differ");
    const auto rows = ds.rows(split);
    if (rows.empty()) throw ConfigError("split '" + std::string(to_string(split)) + "' is empty");
    return compute_metrics(predict_batch(F, gather_rows(ds.X, rows)), gather_rows(ds.Y, rows), target_scale(ds));
}

// ---------------------------------------------------------------------------
// Cold-start ablation

struct AblationChannel {
    std::size_t channel = 0;
    TrainReport propagated;
    TrainReport cold;
    double propagated_test_nmae = 0.0;
    double cold_test_nmae = 0.0;
};

/// Epochs a channel needed to reach epsilon; runs that never converged count
/// as max_epochs.
inline std::size_t epochs_to_converge(const TrainReport& r, std::size_t max_epochs) {
    return r.converged ? r.epochs_run : max_epochs;
}

struct AblationReport {
    std::vector<AblationChannel> channels;  ///< channels 1..k-1 (0-based)
    std::size_t max_epochs = 0;
};

/// Trains channels 1..k-1 twice after a shared channel-0 network: once with
/// weight propagation and once from a fresh Glorot init. Seeds are identical
/// between arms.
inline AblationReport ablation_cold_start(const SpectralDataset& ds, const EmulatorOptions& opts) {
    AblationReport rep;
    rep.max_epochs = opts.train.max_epochs;
    const auto test_rows = ds.rows(Split::test);
    if (test_rows.empty()) throw ConfigError("ablation needs a nonempty test split");
    const auto scale = target_scale(ds);

    const auto run = [&](MlpModel init, std::size_t i) {
        const ChannelView view = channel_view(ds, i);
        TrainOptions topts = opts.train;
        topts.seed = opts.shuffle_seed(i);
        try {
            return train(std::move(init), select(view, Split::train), select(view, Split::val), topts);
        } catch (const NumericalError& e) {
            throw NumericalError("channel " + std::to_string(i) + ": " + e.what());
        }
    };
    const auto test_nmae = [&](const MlpModel& m, std::size_t i) {
        const Batch t = select(channel_view(ds, i), Split::test);
        return normalized_mae(forward_batch(m, t.x), t.y, scale[i]);
    };

    MlpModel prev = run(glorot_init(opts.layer_dims, opts.init_seed()), 0).model;
    for (std::size_t i = 1; i < ds.k(); ++i) {
        AblationChannel c;
        c.channel = i;
        TrainResult warm = run(propagate_weights(prev), i);
        TrainResult cold = run(glorot_init(opts.layer_dims, opts.init_seed()), i);
        c.propagated_test_nmae = test_nmae(warm.model, i);
        c.cold_test_nmae = test_nmae(cold.model, i);
        c.propagated = std::move(warm.report);
        c.cold = std::move(cold.report);
        prev = std::move(warm.model);
        rep.channels.push_back(std::move(c));
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const TrainReport& r, bool with_timing = false) {
    nlohmann::json j{{"epochs_run", r.epochs_run},
                     {"converged", r.converged},
                     {"initial_val_nmae", r.initial_val_nmae},
                     {"best_val_nmae", r.best_val_nmae},
                     {"best_epoch", r.best_epoch},
                     {"train_loss", r.train_loss},
                     {"val_nmae", r.val_nmae}};
    if (with_timing) j["seconds"] = r.seconds;
    return j;
}

inline TrainReport train_report_from_json(const nlohmann::json& j) {
    TrainReport r;
    r.epochs_run = j.at("epochs_run").get<std::size_t>();
    r.converged = j.at("converged").get<bool>();
    r.initial_val_nmae = j.at("initial_val_nmae").get<double>();
    r.best_val_nmae = j.at("best_val_nmae").get<double>();
    r.best_epoch = j.at("best_epoch").get<std::size_t>();
    r.train_loss = j.at("train_loss").get<std::vector<double>>();
    r.val_nmae = j.at("val_nmae").get<std::vector<double>>();
    if (j.contains("seconds")) r.seconds = j.at("seconds").get<double>();
    return r;
}

inline nlohmann::json to_json(const EvalMetrics& m) {
    return {{"rows", m.rows},
            {"overall_nmae", m.overall_nmae},
            {"max_nmae", m.max_nmae},
            {"overall_mae", m.overall_mae},
            {"mae", m.mae},
            {"nmae", m.nmae}};
}

inline nlohmann::json to_json(const Scaler& s) { return {{"mean", s.mean}, {"stddev", s.stddev}}; }

inline Scaler scaler_from_json(const nlohmann::json& j) {
    return {j.at("mean").get<std::vector<double>>(), j.at("stddev").get<std::vector<double>>()};
}

inline nlohmann::json to_json(const StateRanges& r) {
    nlohmann::json j = nlohmann::json::object();
    for (std::size_t i = 0; i < 5; ++i) j[StateRanges::kNames[i]] = {r.axis(i).low, r.axis(i).high};
    return j;
}

/// Missing axes keep their defaults; unknown axes are rejected.
inline StateRanges state_ranges_from_json(const nlohmann::json& j, const std::string& where = "ranges") {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    StateRanges r;
    for (const auto& [key, val] : j.items()) {
        std::size_t a = 5;
        for (std::size_t i = 0; i < 5; ++i)
            if (key == StateRanges::kNames[i]) a = i;
        if (a == 5) throw ConfigError(where + "." + key + ": unknown range");
        if (!val.is_array() || val.size() != 2 || !val[0].is_number() || !val[1].is_number())
            throw ConfigError(where + "." + key + ": expected [low, high]");
        r.axis(a) = {val[0].get<double>(), val[1].get<double>()};
    }
    r.validate();
    return r;
}

inline constexpr std::string_view kEmulatorFormat = "nrtm-emulator";

/// Single JSON document: grid, scaler, layer_dims, per-channel W (row-major,
/// as arrays of rows) and b, and free-form meta.
inline nlohmann::json to_json(const EmulatorModel& F) {
    nlohmann::json j;
    j["format"] = kEmulatorFormat;
    j["version"] = 1;
    j["grid"] = F.grid.lambdas();
    j["scaler"] = to_json(F.scaler);
    j["ranges"] = to_json(F.ranges);
    j["layer_dims"] = F.subnets.empty() ? std::vector<std::size_t>{} : F.subnets.front().layer_dims;
    auto& ch = j["channels"] = nlohmann::json::array();
    for (std::size_t i = 0; i < F.subnets.size(); ++i) {
        nlohmann::json c = to_json(F.subnets[i]);
        c.erase("layer_dims");
        c["lambda"] = F.grid[i];
        if (i < F.reports.size()) c["report"] = to_json(F.reports[i]);
        ch.push_back(std::move(c));
    }
    j["meta"] = F.meta;
    return j;
}

inline EmulatorModel emulator_from_json(const nlohmann::json& j) {
    EmulatorModel F;
    try {
        if (j.at("format").get<std::string>() != kEmulatorFormat) throw ParseError("not an emulator model file");
        F.grid = WavelengthGrid(j.at("grid").get<std::vector<double>>());
        F.scaler = scaler_from_json(j.at("scaler"));
        if (j.contains("ranges")) F.ranges = state_ranges_from_json(j.at("ranges"));
        const auto dims = j.at("layer_dims");
        const auto& ch = j.at("channels");
        for (std::size_t i = 0; i < ch.size(); ++i) {
            nlohmann::json c = ch[i];
            c["layer_dims"] = dims;
            F.subnets.push_back(mlp_from_json(c, "channels[" + std::to_string(i) + "]"));
            if (c.contains("report")) F.reports.push_back(train_report_from_json(c.at("report")));
        }
        if (j.contains("meta")) F.meta = j.at("meta");
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("emulator model: ") + e.what());
    } catch (const ConfigError& e) {
        throw ParseError(std::string("emulator model: ") + e.what());
    }
    try {
        F.validate();
    } catch (const Error& e) {
        throw ParseError(std::string("emulator model: ") + e.what());
    }
    return F;
}

inline std::string save(const EmulatorModel& F) { return to_json(F).dump(); }

inline EmulatorModel load_emulator(std::string_view text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("emulator model parse error at byte " + std::to_string(e.byte) + ": " + e.what());
    }
    return emulator_from_json(j);
}

}  // namespace nrtm
