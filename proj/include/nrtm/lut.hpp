#pragma once

// Lookup-table baseline: oracle spectra precomputed on a rectangular 5-D grid
// over (mu0, tau550, alpha, wvap, rho_s), queried by multilinear
// interpolation.
//
// Binary file layout (all little-endian):
//   char[8]   magic "NRTMLUT1"
//   uint32    version (1)
//   uint32    number of axes (5)
//   uint64    k, number of channels
//   uint64[5] axis sizes n_0..n_4
//   float64   knots of axis 0, then axis 1, ... axis 4
//   float64[k] channel wavelengths, um
//   float64   values, index ((((i0 n1 + i1) n2 + i2) n3 + i3) n4 + i4) k + c

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "nrtm/errors.hpp"
#include "nrtm/oracle.hpp"
#include "nrtm/sampling.hpp"

namespace nrtm {

inline constexpr std::size_t kLutAxes = 5;
inline constexpr std::uint64_t kDefaultLutCapBytes = std::uint64_t{1} << 30;

class LutTooLarge : public ConfigError {
public:
    LutTooLarge(std::uint64_t bytes, std::uint64_t cap)
        : ConfigError("lookup table needs " + std::to_string(bytes) + " bytes, cap is " + std::to_string(cap)),
          bytes_(bytes) {}
    std::uint64_t bytes() const { return bytes_; }

private:
    std::uint64_t bytes_;
};

struct LookupTable {
    std::array<std::vector<double>, kLutAxes> axes;
    std::vector<double> values;
    WavelengthGrid grid;

    std::size_t k() const { return grid.k(); }
    std::size_t knot_combinations() const {
        std::size_t n = 1;
        for (const auto& a : axes) n *= a.size();
        return n;
    }
    std::uint64_t footprint_bytes() const {
        std::uint64_t b = values.size() * sizeof(double) + grid.k() * sizeof(double);
        for (const auto& a : axes) b += a.size() * sizeof(double);
        return b;
    }
    /// Flat index of a knot combination (without the channel).
    std::size_t node(const std::array<std::size_t, kLutAxes>& idx) const {
        std::size_t f = 0;
        for (std::size_t a = 0; a < kLutAxes; ++a) f = f * axes[a].size() + idx[a];
        return f;
    }
    double at(const std::array<std::size_t, kLutAxes>& idx, std::size_t channel) const {
        return values[node(idx) * k() + channel];
    }

    void validate() const {
        for (std::size_t a = 0; a < kLutAxes; ++a) {
            if (axes[a].size() < 2) throw ConfigError("every LUT axis needs at least 2 knots");
            for (std::size_t i = 1; i < axes[a].size(); ++i)
                if (!(axes[a][i] > axes[a][i - 1])) throw ConfigError("LUT knots must be strictly increasing");
        }
        if (values.size() != knot_combinations() * k()) throw DimensionError("LUT value count mismatch");
    }
};

/// Evenly spaced knots spanning each range.
inline std::array<std::vector<double>, kLutAxes> lut_axes(const StateRanges& ranges,
                                                          const std::array<std::size_t, kLutAxes>& knots) {
    std::array<std::vector<double>, kLutAxes> axes;
    for (std::size_t a = 0; a < kLutAxes; ++a) {
        const std::size_t n = knots[a];
        if (n < 2) throw ConfigError("lut.knots must be >= 2 per axis");
        const Range& r = ranges.axis(a);
        if (!(r.high > r.low)) throw ConfigError("LUT axis range must have low < high");
        axes[a].resize(n);
        for (std::size_t i = 0; i < n; ++i)
            axes[a][i] = i + 1 == n ? r.high : r.low + r.width() * static_cast<double>(i) / static_cast<double>(n - 1);
    }
    return axes;
}

inline std::uint64_t lut_footprint(const std::array<std::vector<double>, kLutAxes>& axes, std::size_t k) {
    std::uint64_t nodes = 1, b = k * sizeof(double);
    for (const auto& a : axes) {
        nodes *= a.size();
        b += a.size() * sizeof(double);
    }
    return b + nodes * k * sizeof(double);
}

/// Tabulates `fn(state, rho_s, lambda)` at every knot combination and channel.
template <typename Fn>
LookupTable tabulate(const std::array<std::vector<double>, kLutAxes>& axes, const WavelengthGrid& grid, Fn&& fn,
                     std::uint64_t cap_bytes = kDefaultLutCapBytes) {
    const std::uint64_t need = lut_footprint(axes, grid.k());
    if (need > cap_bytes) throw LutTooLarge(need, cap_bytes);
    LookupTable t;
    t.axes = axes;
    t.grid = grid;
    t.values.resize(t.knot_combinations() * grid.k());
    std::array<std::size_t, kLutAxes> idx{};
    for (std::size_t f = 0; f < t.knot_combinations(); ++f) {
        std::size_t rem = f;
        for (std::size_t a = kLutAxes; a-- > 0;) {
            idx[a] = rem % axes[a].size();
            rem /= axes[a].size();
        }
        const AtmosphericState st{axes[0][idx[0]], axes[1][idx[1]], axes[2][idx[2]], axes[3][idx[3]]};
        const double rho = axes[4][idx[4]];
        for (std::size_t c = 0; c < grid.k(); ++c) t.values[f * grid.k() + c] = fn(st, rho, grid[c]);
    }
    t.validate();
    return t;
}

struct LutBuild {
    LookupTable table;
    std::size_t oracle_spectra = 0;  ///< precompute count
    std::uint64_t bytes = 0;
};

/// Oracle LUT with `knots[a]` evenly spaced knots on axis `a`.
inline LutBuild build_lut(const StateRanges& ranges, const std::array<std::size_t, kLutAxes>& knots,
                          const WavelengthGrid& grid, const OracleConfig& cfg,
                          std::uint64_t cap_bytes = kDefaultLutCapBytes) {
    cfg.validate();
    ranges.validate();
    LutBuild b;
    b.table = tabulate(
        lut_axes(ranges, knots), grid,
        [&cfg](const AtmosphericState& s, double rho, double lambda) { return toa_reflectance(s, rho, lambda, cfg); },
        cap_bytes);
    b.oracle_spectra = b.table.knot_combinations();
    b.bytes = b.table.footprint_bytes();
    return b;
}

/// Enclosing cell and the fractional position within it for each axis.
struct LutCell {
    std::array<std::size_t, kLutAxes> lower{};
    std::array<double, kLutAxes> t{};
};

inline std::pair<std::size_t, double> locate_axis(const std::vector<double>& ax, double x, std::size_t axis) {
    if (!(x >= ax.front() && x <= ax.back()))
        throw ExtrapolationError(std::string("LUT query ") + StateRanges::kNames[axis] + "=" + std::to_string(x) +
                                 " outside [" + std::to_string(ax.front()) + ", " + std::to_string(ax.back()) + "]");
    auto hi = static_cast<std::size_t>(std::upper_bound(ax.begin(), ax.end(), x) - ax.begin());
    if (hi == ax.size()) hi = ax.size() - 1;
    const std::size_t lo = hi - 1;
    return {lo, (x - ax[lo]) / (ax[hi] - ax[lo])};
}

inline LutCell locate(const LookupTable& lut, const std::array<double, kLutAxes>& q) {
    LutCell c;
    for (std::size_t a = 0; a < kLutAxes; ++a) std::tie(c.lower[a], c.t[a]) = locate_axis(lut.axes[a], q[a], a);
    return c;
}

namespace detail {

// Visits the 2^5 corners with nonzero weight.
template <typename Visit>
void for_each_corner(const LutCell& cell, Visit&& visit) {
    for (unsigned mask = 0; mask < (1u << kLutAxes); ++mask) {
        double w = 1.0;
        std::array<std::size_t, kLutAxes> idx{};
        bool skip = false;
        for (std::size_t a = 0; a < kLutAxes; ++a) {
            const bool upper = (mask >> a) & 1u;
            const double wa = upper ? cell.t[a] : 1.0 - cell.t[a];
            if (wa == 0.0) {
                skip = true;
                break;
            }
            w *= wa;
            idx[a] = cell.lower[a] + (upper ? 1 : 0);
        }
        if (!skip) visit(idx, w);
    }
}

}  // namespace detail

/// Multilinear interpolation of channel `channel` at (state, rho_s).
inline double interpolate(const LookupTable& lut, const AtmosphericState& state, double rho_s, std::size_t channel) {
    if (channel >= lut.k()) throw DimensionError("LUT channel index out of range");
    const LutCell cell = locate(lut, {state.mu0, state.tau550, state.alpha, state.wvap, rho_s});
    double v = 0.0;
    detail::for_each_corner(cell, [&](const auto& idx, double w) { v += w * lut.at(idx, channel); });
    return v;
}

/// Whole spectrum. Each channel is looked up at its own rho_s.
inline std::vector<double> interpolate_spectrum(const LookupTable& lut, const AtmosphericState& state,
                                                const SurfaceSpectrum& surf) {
    if (surf.size() != lut.k()) throw DimensionError("surface spectrum length does not match LUT channels");
    std::vector<double> out(lut.k());
    // The four atmospheric axes are shared by every channel; only rho_s moves.
    LutCell cell;
    const auto atm = state.to_array();
    for (std::size_t a = 0; a < kAtmParams; ++a) std::tie(cell.lower[a], cell.t[a]) = locate_axis(lut.axes[a], atm[a], a);
    for (std::size_t c = 0; c < lut.k(); ++c) {
        std::tie(cell.lower[4], cell.t[4]) = locate_axis(lut.axes[4], surf.rho_s[c], 4);
        double v = 0.0;
        detail::for_each_corner(cell, [&](const auto& idx, double w) { v += w * lut.at(idx, c); });
        out[c] = v;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Binary I/O

inline constexpr char kLutMagic[8] = {'N', 'R', 'T', 'M', 'L', 'U', 'T', '1'};

namespace detail {

static_assert(std::endian::native == std::endian::little, "LUT I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
inline void put_doubles(std::ostream& os, const std::vector<double>& v) {
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}
template <typename T>
T get(std::istream& is, const char* what) {
    T v;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
        throw ParseError(std::string("LUT file truncated while reading ") + what);
    return v;
}
inline std::vector<double> get_doubles(std::istream& is, std::size_t n, const char* what) {
    std::vector<double> v(n);
    if (!is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double))))
        throw ParseError(std::string("LUT file truncated while reading ") + what);
    return v;
}

}  // namespace detail

inline void write_lut(std::ostream& os, const LookupTable& lut) {
    os.write(kLutMagic, sizeof kLutMagic);
    detail::put<std::uint32_t>(os, 1);
    detail::put<std::uint32_t>(os, kLutAxes);
    detail::put<std::uint64_t>(os, lut.k());
    for (const auto& a : lut.axes) detail::put<std::uint64_t>(os, a.size());
    for (const auto& a : lut.axes) detail::put_doubles(os, a);
    detail::put_doubles(os, lut.grid.lambdas());
    detail::put_doubles(os, lut.values);
    if (!os) throw IoError("failed writing LUT");
}

inline LookupTable read_lut(std::istream& is) {
    char magic[8];
    if (!is.read(magic, sizeof magic) || std::memcmp(magic, kLutMagic, sizeof magic) != 0)
        throw ParseError("not a LUT file (bad magic)");
    if (detail::get<std::uint32_t>(is, "version") != 1) throw ParseError("unsupported LUT version");
    if (detail::get<std::uint32_t>(is, "axis count") != kLutAxes) throw ParseError("LUT must have 5 axes");
    const auto k = detail::get<std::uint64_t>(is, "channel count");
    std::array<std::uint64_t, kLutAxes> sizes{};
    std::uint64_t nodes = 1;
    for (auto& s : sizes) {
        s = detail::get<std::uint64_t>(is, "axis size");
        if (s < 2 || s > (std::uint64_t{1} << 32)) throw ParseError("implausible LUT axis size");
        nodes *= s;
    }
    if (k == 0 || k > 100000 || nodes > (std::uint64_t{1} << 36) / k) throw ParseError("implausible LUT dimensions");
    LookupTable t;
    for (std::size_t a = 0; a < kLutAxes; ++a) t.axes[a] = detail::get_doubles(is, sizes[a], "knots");
    try {
        t.grid = WavelengthGrid(detail::get_doubles(is, k, "wavelengths"));
    } catch (const ConfigError& e) {
        throw ParseError(std::string("LUT wavelength grid: ") + e.what());
    }
    t.values = detail::get_doubles(is, nodes * k, "values");
    try {
        t.validate();
    } catch (const Error& e) {
        throw ParseError(std::string("LUT: ") + e.what());
    }
    return t;
}

}  // namespace nrtm
