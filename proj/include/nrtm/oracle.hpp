#pragma once

// Synthetic radiative transfer forward model. Plays the role of a full RTM:
// it produces the ground-truth top-of-atmosphere reflectance spectra used for
// training and as the accuracy/speed reference for the emulator and the LUT.
//
//   tau_r(l)   = beta_r * l^-rayleigh_exp
//   tau_a(l)   = tau550 * (l / 0.55)^-alpha
//   k_w(l)     = sum_j A_j exp(-(l - c_j)^2 / (2 sigma_j^2))
//   m_air      = 1/mu0 + 1/mu_v
//   T(l)       = exp(-(tau_r + tau_a) m_air) * exp(-wvap k_w(l) m_air)
//   s(l)       = (0.92 tau_r + 0.48 tau_a) / (1 + 0.92 tau_r + 0.48 tau_a)
//   rho_path   = (0.75 tau_r + 0.54 tau_a) / (4 mu0 mu_v)
//   rho_obs    = rho_path + T rho_s / (1 - s rho_s)

#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "nrtm/errors.hpp"

namespace nrtm {

inline constexpr double kMinWavelength = 0.35;
inline constexpr double kMaxWavelength = 2.60;
inline constexpr double kMaxSurfaceReflectance = 0.9;

/// Channel-center wavelengths in micrometers, strictly increasing.
class WavelengthGrid {
public:
    WavelengthGrid() = default;
    explicit WavelengthGrid(std::vector<double> lambdas) : lambdas_(std::move(lambdas)) {
        if (lambdas_.empty()) throw ConfigError("wavelength grid must have at least one channel");
        for (std::size_t i = 0; i < lambdas_.size(); ++i) {
            const double l = lambdas_[i];
            if (!(l >= kMinWavelength && l <= kMaxWavelength))
                throw ConfigError("wavelength " + std::to_string(l) + " outside [0.35, 2.60] um");
            if (i > 0 && !(l > lambdas_[i - 1]))
                throw ConfigError("wavelength grid must be strictly increasing");
        }
    }

    /// `k` channels evenly spaced over [lo, hi].
    static WavelengthGrid uniform(std::size_t k, double lo = 0.35, double hi = 1.05) {
        if (k == 0) throw ConfigError("wavelength grid must have at least one channel");
        std::vector<double> l(k);
        for (std::size_t i = 0; i < k; ++i)
            l[i] = k == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(k - 1);
        return WavelengthGrid(std::move(l));
    }

    /// Unvalidated construction; used where a test needs repeated wavelengths.
    static WavelengthGrid unchecked(std::vector<double> lambdas) {
        WavelengthGrid g;
        g.lambdas_ = std::move(lambdas);
        return g;
    }

    std::size_t k() const { return lambdas_.size(); }
    double operator[](std::size_t i) const { return lambdas_[i]; }
    const std::vector<double>& lambdas() const { return lambdas_; }
    bool operator==(const WavelengthGrid&) const = default;

private:
    std::vector<double> lambdas_;
};

/// Atmospheric part of the state vector: geometry, aerosol and water vapor.
struct AtmosphericState {
    double mu0 = 1.0;     ///< cosine of solar zenith
    double tau550 = 0.1;  ///< aerosol optical depth at 0.55 um
    double alpha = 1.0;   ///< Angstrom exponent
    double wvap = 1.0;    ///< column water vapor, cm

    static constexpr std::size_t kSize = 4;
    static constexpr std::array<const char*, kSize> kNames{"mu0", "tau550", "alpha", "wvap"};
    static constexpr std::array<double, kSize> kLow{0.3, 0.0, 0.5, 0.0};
    static constexpr std::array<double, kSize> kHigh{1.0, 0.5, 2.0, 5.0};

    std::array<double, kSize> to_array() const { return {mu0, tau550, alpha, wvap}; }
    static AtmosphericState from_array(std::span<const double> a) {
        if (a.size() < kSize) throw DimensionError("atmospheric state needs 4 values");
        return {a[0], a[1], a[2], a[3]};
    }

    bool in_bounds() const {
        const auto a = to_array();
        for (std::size_t i = 0; i < kSize; ++i)
            if (!(a[i] >= kLow[i] && a[i] <= kHigh[i])) return false;
        return true;
    }
    void validate() const {
        if (!in_bounds()) throw ConfigError("atmospheric state outside its physical bounds");
    }
    bool operator==(const AtmosphericState&) const = default;
};

/// Per-channel surface reflectance.
struct SurfaceSpectrum {
    std::vector<double> rho_s;

    std::size_t size() const { return rho_s.size(); }
    void validate() const {
        for (double r : rho_s)
            if (!(r >= 0.0 && r <= kMaxSurfaceReflectance))
                throw ConfigError("surface reflectance outside [0, 0.9]");
    }
    bool operator==(const SurfaceSpectrum&) const = default;
};

/// Solar geometry factor and exo-atmospheric irradiance per channel.
struct SolarIllumination {
    double phi0 = 1.0;
    std::vector<double> e0;

    void validate() const {
        if (!(phi0 > 0.0 && phi0 <= 1.0)) throw ConfigError("phi0 must lie in (0, 1]");
        for (double e : e0)
            if (!(e > 0.0)) throw ConfigError("solar irradiance must be positive");
    }
};

struct WaterBand {
    double center;     ///< um
    double amplitude;  ///< absorption coefficient at center, per cm
    double sigma;      ///< um
    bool operator==(const WaterBand&) const = default;
};

struct OracleConfig {
    double beta_r = 0.0088;
    double rayleigh_exp = 4.05;
    double mu_v = 1.0;
    /// Redundant inner transmittance evaluations per call. Changes cost only.
    int quadrature_depth = 0;
    std::vector<WaterBand> water_bands{
        {0.94, 0.30, 0.02}, {1.14, 0.50, 0.03}, {1.38, 2.00, 0.04}, {1.88, 3.00, 0.05}};

    void validate() const {
        if (!(beta_r >= 0.0)) throw ConfigError("oracle.beta_r must be >= 0");
        if (!(mu_v > 0.0 && mu_v <= 1.0)) throw ConfigError("oracle.mu_v must lie in (0, 1]");
        if (quadrature_depth < 0) throw ConfigError("oracle.quadrature_depth must be >= 0");
        for (const auto& b : water_bands) {
            if (!(b.sigma > 0.0)) throw ConfigError("oracle.water_bands sigma must be > 0");
            if (!(b.amplitude >= 0.0)) throw ConfigError("oracle.water_bands amplitude must be >= 0");
        }
    }
    bool operator==(const OracleConfig&) const = default;
};

inline double rayleigh_od(double lambda, const OracleConfig& cfg) {
    return cfg.beta_r * std::pow(lambda, -cfg.rayleigh_exp);
}

inline double aerosol_od(double lambda, const AtmosphericState& state) {
    return state.tau550 * std::pow(lambda / 0.55, -state.alpha);
}

/// Water absorption coefficient k_w(lambda), per cm of precipitable water.
inline double water_absorption(double lambda, const OracleConfig& cfg) {
    double k = 0.0;
    for (const auto& b : cfg.water_bands) {
        const double d = lambda - b.center;
        k += b.amplitude * std::exp(-(d * d) / (2.0 * b.sigma * b.sigma));
    }
    return k;
}

inline double air_mass(const AtmosphericState& state, const OracleConfig& cfg) {
    return 1.0 / state.mu0 + 1.0 / cfg.mu_v;
}

inline double water_transmittance(double lambda, const AtmosphericState& state, const OracleConfig& cfg) {
    return std::exp(-state.wvap * water_absorption(lambda, cfg) * air_mass(state, cfg));
}

/// Two-way total transmittance T(lambda).
inline double total_transmittance(double lambda, const AtmosphericState& state, const OracleConfig& cfg) {
    const double tau = rayleigh_od(lambda, cfg) + aerosol_od(lambda, state);
    return std::exp(-tau * air_mass(state, cfg)) * water_transmittance(lambda, state, cfg);
}

inline double spherical_albedo(double lambda, const AtmosphericState& state, const OracleConfig& cfg) {
    const double e = 0.92 * rayleigh_od(lambda, cfg) + 0.48 * aerosol_od(lambda, state);
    return e / (1.0 + e);
}

inline double path_reflectance(double lambda, const AtmosphericState& state, const OracleConfig& cfg) {
    return (0.75 * rayleigh_od(lambda, cfg) + 0.54 * aerosol_od(lambda, state)) / (4.0 * state.mu0 * cfg.mu_v);
}

namespace detail {

// Burns `depth` full transmittance evaluations. The inputs are re-read through
// volatiles so the loop cannot be hoisted or folded; the result is discarded.
inline void amplify(int depth, double lambda, const AtmosphericState& state, const OracleConfig& cfg) {
    volatile double lam = lambda;
    volatile double sink = 0.0;
    for (int i = 0; i < depth; ++i) sink = total_transmittance(lam, state, cfg);
    (void)sink;
}

}  // namespace detail

/// Top-of-atmosphere reflectance at one wavelength.
inline double toa_reflectance(const AtmosphericState& state, double rho_s, double lambda, const OracleConfig& cfg) {
    if (cfg.quadrature_depth > 0) detail::amplify(cfg.quadrature_depth, lambda, state, cfg);
    const double t = total_transmittance(lambda, state, cfg);
    const double s = spherical_albedo(lambda, state, cfg);
    return path_reflectance(lambda, state, cfg) + t * rho_s / (1.0 - s * rho_s);
}

/// Analytic d(rho_obs)/d(rho_s) = T / (1 - s rho_s)^2.
inline double toa_reflectance_drho_s(const AtmosphericState& state, double rho_s, double lambda,
                                     const OracleConfig& cfg) {
    const double t = total_transmittance(lambda, state, cfg);
    const double s = spherical_albedo(lambda, state, cfg);
    const double d = 1.0 - s * rho_s;
    return t / (d * d);
}

/// Sensor radiance recovered from reflectance: y = rho_obs phi0 e0 / pi.
inline double radiance_from_reflectance(double rho_obs, const SolarIllumination& illum, std::size_t channel) {
    if (channel >= illum.e0.size()) throw DimensionError("channel index beyond solar irradiance table");
    return rho_obs * illum.phi0 * illum.e0[channel] / std::numbers::pi;
}

inline void spectrum_into(const AtmosphericState& state, std::span<const double> rho_s, const WavelengthGrid& grid,
                          const OracleConfig& cfg, std::span<double> out) {
    if (rho_s.size() != grid.k() || out.size() != grid.k())
        throw DimensionError("surface spectrum length " + std::to_string(rho_s.size()) +
                             " does not match grid size " + std::to_string(grid.k()));
    for (std::size_t i = 0; i < grid.k(); ++i) out[i] = toa_reflectance(state, rho_s[i], grid[i], cfg);
}

/// Full TOA reflectance spectrum on `grid`.
inline std::vector<double> spectrum(const AtmosphericState& state, const SurfaceSpectrum& surf,
                                    const WavelengthGrid& grid, const OracleConfig& cfg) {
    std::vector<double> out(grid.k());
    spectrum_into(state, surf.rho_s, grid, cfg, out);
    return out;
}

}  // namespace nrtm
