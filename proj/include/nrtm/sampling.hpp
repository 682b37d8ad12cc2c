#pragma once

// Design matrix construction: sample the state space, run the oracle, split
// rows into train/validation/test and fit the input standardization.
//
// Column layout of X (and of a samples matrix) is
//   [mu0, tau550, alpha, wvap, rho_s_0 .. rho_s_{k-1}]
// and Y holds rho_obs for the k channels.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "nrtm/errors.hpp"
#include "nrtm/oracle.hpp"
#include "nrtm/rng.hpp"

namespace nrtm {

inline constexpr std::size_t kAtmParams = AtmosphericState::kSize;
/// Inputs seen by one channel subnetwork: 4 atmospheric parameters + own rho_s.
inline constexpr std::size_t kChannelInputs = kAtmParams + 1;

struct Range {
    double low = 0.0;
    double high = 1.0;
    double width() const { return high - low; }
    bool contains(double v) const { return v >= low && v <= high; }
    bool operator==(const Range&) const = default;
};

struct StateRanges {
    Range mu0{0.3, 1.0};
    Range tau550{0.0, 0.5};
    Range alpha{0.5, 2.0};
    Range wvap{0.0, 5.0};
    Range rho_s{0.0, 0.9};

    static constexpr std::array<const char*, 5> kNames{"mu0", "tau550", "alpha", "wvap", "rho_s"};

    /// Axis 0..3 are the atmospheric parameters, axis 4 is rho_s.
    const Range& axis(std::size_t i) const {
        switch (i) {
            case 0: return mu0;
            case 1: return tau550;
            case 2: return alpha;
            case 3: return wvap;
            default: return rho_s;
        }
    }
    Range& axis(std::size_t i) { return const_cast<Range&>(std::as_const(*this).axis(i)); }

    /// Ranges must nest inside the physical bounds. `low == high` is accepted
    /// (a pinned parameter); the dataset scaler rejects such columns later.
    void validate() const {
        for (std::size_t i = 0; i < 5; ++i) {
            const Range& r = axis(i);
            const double lo = i < 4 ? AtmosphericState::kLow[i] : 0.0;
            const double hi = i < 4 ? AtmosphericState::kHigh[i] : kMaxSurfaceReflectance;
            if (!(r.low <= r.high))
                throw ConfigError(std::string("sampling.ranges.") + kNames[i] + ": low must not exceed high");
            if (!(r.low >= lo && r.high <= hi))
                throw ConfigError(std::string("sampling.ranges.") + kNames[i] + " outside physical bounds");
        }
    }

    bool contains(const AtmosphericState& s) const {
        return mu0.contains(s.mu0) && tau550.contains(s.tau550) && alpha.contains(s.alpha) && wvap.contains(s.wvap);
    }
    bool operator==(const StateRanges&) const = default;
};

enum class SamplingMethod { uniform, latin_hypercube, grid };

inline std::string_view to_string(SamplingMethod m) {
    switch (m) {
        case SamplingMethod::uniform: return "uniform";
        case SamplingMethod::latin_hypercube: return "latin_hypercube";
        case SamplingMethod::grid: return "grid";
    }
    return "?";
}

inline SamplingMethod parse_sampling_method(std::string_view s) {
    if (s == "uniform") return SamplingMethod::uniform;
    if (s == "latin_hypercube" || s == "lhs") return SamplingMethod::latin_hypercube;
    if (s == "grid") return SamplingMethod::grid;
    throw ConfigError("unknown sampling method '" + std::string(s) + "'");
}

/// Draws `n` rows of [4 atmospheric parameters, k reflectances].
///
/// uniform and latin_hypercube treat every column (each channel's rho_s
/// included) as an independent dimension. grid lays a full factorial over the
/// five axes of StateRanges with the reflectance shared by all channels, so `n`
/// must be q^5 for an integer q.
inline Eigen::MatrixXd sample_states(const StateRanges& ranges, std::size_t n, std::size_t k, SamplingMethod method,
                                     std::uint64_t seed) {
    ranges.validate();
    if (n == 0) throw ConfigError("sampling.n must be >= 1");
    if (k == 0) throw ConfigError("number of channels must be >= 1");
    const std::size_t cols = kAtmParams + k;
    const auto col_range = [&](std::size_t c) -> const Range& { return ranges.axis(c < kAtmParams ? c : 4); };
    Eigen::MatrixXd out(n, cols);
    Rng rng(seed);

    switch (method) {
        case SamplingMethod::uniform:
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < cols; ++c) {
                    const Range& rg = col_range(c);
                    out(r, c) = uniform(rng, rg.low, rg.high);
                }
            break;
        case SamplingMethod::latin_hypercube: {
            std::vector<std::size_t> strata(n);
            for (std::size_t c = 0; c < cols; ++c) {
                std::iota(strata.begin(), strata.end(), std::size_t{0});
                shuffle(std::span<std::size_t>(strata), rng);
                const Range& rg = col_range(c);
                for (std::size_t r = 0; r < n; ++r) {
                    const double u = (static_cast<double>(strata[r]) + uniform01(rng)) / static_cast<double>(n);
                    out(r, c) = rg.low + rg.width() * u;
                }
            }
            break;
        }
        case SamplingMethod::grid: {
            const auto q = static_cast<std::size_t>(std::llround(std::pow(static_cast<double>(n), 0.2)));
            std::size_t q5 = 1;
            for (int i = 0; i < 5; ++i) q5 *= q;
            if (q == 0 || q5 != n)
                throw ConfigError("grid sampling needs n = q^5 for integer q; got n=" + std::to_string(n));
            const auto knot = [&](std::size_t axis, std::size_t j) {
                const Range& rg = ranges.axis(axis);
                return q == 1 ? rg.low : rg.low + rg.width() * static_cast<double>(j) / static_cast<double>(q - 1);
            };
            for (std::size_t r = 0; r < n; ++r) {
                std::size_t rem = r;
                std::array<std::size_t, 5> idx{};
                for (int a = 4; a >= 0; --a) {
                    idx[a] = rem % q;
                    rem /= q;
                }
                for (std::size_t a = 0; a < kAtmParams; ++a) out(r, a) = knot(a, idx[a]);
                for (std::size_t c = kAtmParams; c < cols; ++c) out(r, c) = knot(4, idx[4]);
            }
            break;
        }
    }
    return out;
}

enum class Split : std::uint8_t { train, val, test };

inline std::string_view to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

inline Split parse_split(std::string_view s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw ParseError("unknown split label '" + std::string(s) + "'");
}

struct SplitFractions {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;

    void validate() const {
        if (!(train > 0 && val > 0 && test > 0)) throw ConfigError("split fractions must be positive");
        if (std::abs(train + val + test - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
    }
    bool operator==(const SplitFractions&) const = default;
};

/// Per-feature z-score statistics, fitted on train rows only.
struct Scaler {
    std::vector<double> mean;
    std::vector<double> stddev;

    std::size_t size() const { return mean.size(); }
    double apply(std::size_t feature, double v) const { return (v - mean[feature]) / stddev[feature]; }
    bool operator==(const Scaler&) const = default;
};

struct SpectralDataset {
    Eigen::MatrixXd X;  ///< n x (4 + k)
    Eigen::MatrixXd Y;  ///< n x k
    WavelengthGrid grid;
    std::vector<Split> split;
    Scaler scaler;

    // provenance, echoed into the sidecar
    OracleConfig oracle;
    StateRanges ranges;
    SplitFractions fractions;
    SamplingMethod method = SamplingMethod::latin_hypercube;
    std::uint64_t seed = 0;

    std::size_t n() const { return static_cast<std::size_t>(X.rows()); }
    std::size_t k() const { return grid.k(); }

    std::vector<std::size_t> rows(Split s) const {
        std::vector<std::size_t> r;
        for (std::size_t i = 0; i < split.size(); ++i)
            if (split[i] == s) r.push_back(i);
        return r;
    }

    AtmosphericState state(std::size_t row) const {
        return {X(row, 0), X(row, 1), X(row, 2), X(row, 3)};
    }
    SurfaceSpectrum surface(std::size_t row) const {
        SurfaceSpectrum s;
        s.rho_s.resize(k());
        for (std::size_t i = 0; i < k(); ++i) s.rho_s[i] = X(row, kAtmParams + i);
        return s;
    }
};

/// Sizes of the train/val/test partitions: floor for train and val, the
/// remainder for test.
inline std::array<std::size_t, 3> split_counts(std::size_t n, const SplitFractions& f) {
    const auto take = [n](double frac) {
        return static_cast<std::size_t>(std::floor(static_cast<double>(n) * frac + 1e-9));
    };
    const std::size_t n_train = take(f.train);
    const std::size_t n_val = take(f.val);
    return {n_train, n_val, n - n_train - n_val};
}

/// Fits mean and population standard deviation of each column over `rows`.
inline Scaler fit_scaler(const Eigen::MatrixXd& X, const std::vector<std::size_t>& rows) {
    if (rows.empty()) throw ConfigError("cannot fit scaler on zero rows");
    Scaler s;
    const auto cols = static_cast<std::size_t>(X.cols());
    s.mean.assign(cols, 0.0);
    s.stddev.assign(cols, 0.0);
    const double inv_n = 1.0 / static_cast<double>(rows.size());
    for (std::size_t c = 0; c < cols; ++c) {
        double m = 0.0;
        for (auto r : rows) m += X(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
        m *= inv_n;
        double v = 0.0;
        for (auto r : rows) {
            const double d = X(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) - m;
            v += d * d;
        }
        const double sd = std::sqrt(v * inv_n);
        if (!(sd > 1e-12 * std::max(1.0, std::abs(m))))
            throw ConfigError("input column " + std::to_string(c) + " is constant over the train rows");
        s.mean[c] = m;
        s.stddev[c] = sd;
    }
    return s;
}

/// Evaluates the oracle on every sample row, partitions rows by a seeded
/// shuffle, and fits the scaler on the train rows.
inline SpectralDataset generate_dataset(const Eigen::MatrixXd& samples, const WavelengthGrid& grid,
                                        const OracleConfig& cfg, const SplitFractions& fractions,
                                        std::uint64_t seed) {
    cfg.validate();
    fractions.validate();
    const std::size_t k = grid.k();
    if (static_cast<std::size_t>(samples.cols()) != kAtmParams + k)
        throw DimensionError("samples have " + std::to_string(samples.cols()) + " columns, expected " +
                             std::to_string(kAtmParams + k));
    const auto n = static_cast<std::size_t>(samples.rows());
    const auto counts = split_counts(n, fractions);
    if (counts[0] == 0 || counts[1] == 0 || counts[2] == 0)
        throw ConfigError("n=" + std::to_string(n) + " is too small for nonempty train/val/test splits");

    SpectralDataset ds;
    ds.X = samples;
    ds.Y.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k));
    ds.grid = grid;
    ds.oracle = cfg;
    ds.fractions = fractions;
    ds.seed = seed;

    std::vector<double> rho(k), y(k);
    for (std::size_t r = 0; r < n; ++r) {
        const auto row = static_cast<Eigen::Index>(r);
        const AtmosphericState st{samples(row, 0), samples(row, 1), samples(row, 2), samples(row, 3)};
        for (std::size_t i = 0; i < k; ++i) rho[i] = samples(row, static_cast<Eigen::Index>(kAtmParams + i));
        spectrum_into(st, rho, grid, cfg, y);
        for (std::size_t i = 0; i < k; ++i) ds.Y(row, static_cast<Eigen::Index>(i)) = y[i];
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, 0x5b117));
    shuffle(std::span<std::size_t>(order), rng);
    ds.split.assign(n, Split::test);
    for (std::size_t i = 0; i < counts[0]; ++i) ds.split[order[i]] = Split::train;
    for (std::size_t i = counts[0]; i < counts[0] + counts[1]; ++i) ds.split[order[i]] = Split::val;

    ds.scaler = fit_scaler(ds.X, ds.rows(Split::train));
    return ds;
}

/// Standardized inputs and targets for one channel.
///
/// `inputs` is feature-major: 5 rows [mu0, tau550, alpha, wvap, rho_s_i] by n
/// sample columns, the layout the network consumes directly.
struct ChannelView {
    std::size_t channel = 0;
    Eigen::MatrixXd inputs;
    Eigen::VectorXd targets;
    std::vector<Split> split;
};

/// Standardizes one channel's raw inputs [4 atmospheric, rho_s_i] with the
/// dataset scaler.
inline Eigen::Matrix<double, kChannelInputs, 1> standardize_channel_input(const Scaler& scaler, std::size_t channel,
                                                                          const AtmosphericState& st, double rho_s) {
    const auto a = st.to_array();
    Eigen::Matrix<double, kChannelInputs, 1> x;
    for (std::size_t f = 0; f < kAtmParams; ++f) x(static_cast<Eigen::Index>(f)) = scaler.apply(f, a[f]);
    x(kAtmParams) = scaler.apply(kAtmParams + channel, rho_s);
    return x;
}

inline ChannelView channel_view(const SpectralDataset& ds, std::size_t channel) {
    if (channel >= ds.k())
        throw std::out_of_range("channel " + std::to_string(channel) + " out of range for k=" +
                                std::to_string(ds.k()));
    ChannelView v;
    v.channel = channel;
    const auto n = static_cast<Eigen::Index>(ds.n());
    v.inputs.resize(kChannelInputs, n);
    for (Eigen::Index r = 0; r < n; ++r) {
        for (std::size_t f = 0; f < kAtmParams; ++f)
            v.inputs(static_cast<Eigen::Index>(f), r) = ds.scaler.apply(f, ds.X(r, static_cast<Eigen::Index>(f)));
        const std::size_t col = kAtmParams + channel;
        v.inputs(kAtmParams, r) = ds.scaler.apply(col, ds.X(r, static_cast<Eigen::Index>(col)));
    }
    v.targets = ds.Y.col(static_cast<Eigen::Index>(channel));
    v.split = ds.split;
    return v;
}

/// Inputs (feature-major) and targets of one split.
struct Batch {
    Eigen::MatrixXd x;
    Eigen::VectorXd y;
    std::size_t size() const { return static_cast<std::size_t>(y.size()); }
};

inline Batch select(const ChannelView& v, Split s) {
    std::vector<Eigen::Index> idx;
    for (std::size_t i = 0; i < v.split.size(); ++i)
        if (v.split[i] == s) idx.push_back(static_cast<Eigen::Index>(i));
    Batch b;
    b.x.resize(v.inputs.rows(), static_cast<Eigen::Index>(idx.size()));
    b.y.resize(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t j = 0; j < idx.size(); ++j) {
        b.x.col(static_cast<Eigen::Index>(j)) = v.inputs.col(idx[j]);
        b.y(static_cast<Eigen::Index>(j)) = v.targets(idx[j]);
    }
    return b;
}

}  // namespace nrtm
