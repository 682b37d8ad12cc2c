#pragma once

// Surface retrieval by inverting the emulator with its analytic Jacobians.
//
// known atmosphere: k independent scalar root finds, one per channel, using
//   the diagonal reflectance derivative. Safeguarded Newton inside a
//   bisection bracket on [0, 0.9].
// joint: Levenberg-Marquardt over [mu0, tau550, alpha, wvap, c_0..c_{P-1}],
//   where rho_s(lambda) = clamp(sum_p c_p P_p(t(lambda)), 0, 0.9) is a
//   Legendre expansion in wavelength normalized to [-1, 1].

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "nrtm/emulator.hpp"
#include "nrtm/errors.hpp"
#include "nrtm/rng.hpp"
#include "nrtm/sampling.hpp"

namespace nrtm {

struct RetrievalConfig {
    std::size_t basis_order = 6;  ///< P, joint mode
    double tol = 1e-8;            ///< residual-norm tolerance
    std::size_t max_iters = 100;
    double lm_lambda = 1e-3;      ///< initial damping
    std::size_t starts_per_axis = 3;  ///< joint-mode multi-start density; 1 = range midpoint only
    std::optional<StateRanges> ranges;  ///< parameter box; defaults to the emulator's training ranges
    double noise_sigma = 0.0;     ///< optional Gaussian noise added to y_obs
    std::uint64_t noise_seed = 0;

    void validate() const {
        if (!(tol > 0.0)) throw ConfigError("retrieval.tol must be > 0");
        if (basis_order == 0) throw ConfigError("retrieval.basis_order must be >= 1");
        if (starts_per_axis == 0) throw ConfigError("retrieval.starts_per_axis must be >= 1");
        if (max_iters == 0) throw ConfigError("retrieval.max_iters must be >= 1");
        if (!(lm_lambda > 0.0)) throw ConfigError("retrieval.lm_lambda must be > 0");
        if (!(noise_sigma >= 0.0)) throw ConfigError("retrieval.noise_sigma must be >= 0");
        if (ranges) ranges->validate();
    }

    const StateRanges& box(const EmulatorModel& F) const { return ranges ? *ranges : F.ranges; }
};

enum class ChannelStatus { ok, clamped_low, clamped_high, failed };

inline std::string_view to_string(ChannelStatus s) {
    switch (s) {
        case ChannelStatus::ok: return "ok";
        case ChannelStatus::clamped_low: return "clamped_low";
        case ChannelStatus::clamped_high: return "clamped_high";
        case ChannelStatus::failed: return "failed";
    }
    return "?";
}

struct RetrievalResult {
    std::vector<double> rho_s_hat;
    std::optional<AtmosphericState> state_hat;  ///< joint mode only
    std::vector<double> coefficients;           ///< joint mode only
    std::size_t iterations = 0;
    double residual_norm = 0.0;
    bool converged = false;
    std::vector<double> residual_history;
    std::vector<ChannelStatus> channel_status;  ///< known-atmosphere mode
};

/// y_obs plus seeded N(0, sigma^2) noise (Box-Muller).
inline std::vector<double> add_noise(std::vector<double> y, double sigma, std::uint64_t seed) {
    if (sigma <= 0.0) return y;
    Rng rng(seed);
    for (auto& v : y) {
        const double u1 = 1.0 - uniform01(rng);
        const double u2 = uniform01(rng);
        v += sigma * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }
    return y;
}

namespace detail {

inline void check_observation(const std::vector<double>& y, std::size_t k) {
    if (y.size() != k) throw DimensionError("observed spectrum has " + std::to_string(y.size()) + " channels, expected " +
                                            std::to_string(k));
    for (double v : y)
        if (!std::isfinite(v)) throw NumericalError("observed spectrum contains non-finite values");
}

}  // namespace detail

/// Known-atmosphere inversion: channel i solves yhat_i(rho) = y_obs_i alone.
inline RetrievalResult invert_reflectance(std::vector<double> y_obs, const AtmosphericState& state,
                                          const EmulatorModel& F, const RetrievalConfig& cfg) {
    const std::size_t k = F.k();
    detail::check_observation(y_obs, k);
    cfg.validate();
    y_obs = add_noise(std::move(y_obs), cfg.noise_sigma, cfg.noise_seed);
    constexpr double lo = 0.0, hi = kMaxSurfaceReflectance;

    RetrievalResult res;
    res.rho_s_hat.assign(k, 0.0);
    res.channel_status.assign(k, ChannelStatus::ok);
    std::vector<double> resid(k, 0.0);
    std::size_t max_iters_used = 0;

    for (std::size_t i = 0; i < k; ++i) {
        const MlpModel& net = F.subnets[i];
        const double dscale = 1.0 / F.scaler.stddev[kAtmParams + i];
        const auto g = [&](double rho) { return forward(net, emulator_input(F, i, state, rho)) - y_obs[i]; };
        const auto dg = [&](double rho) {
            return input_jacobian(net, emulator_input(F, i, state, rho))(kAtmParams) * dscale;
        };

        double a = lo, b = hi;
        double ga = g(a), gb = g(b);
        // The emulated reflectance should increase with rho_s, making the root
        // bracketed iff ga <= 0 <= gb. An imperfect fit can wiggle, so before
        // clamping look for any sign change on a coarse scan.
        if (ga >= 0.0 || gb <= 0.0) {
            constexpr int kScan = 90;
            double xa = a, fa = ga;
            for (int s = 1; s <= kScan; ++s) {
                const double xb = lo + (hi - lo) * s / kScan;
                const double fb = s == kScan ? gb : g(xb);
                if (fa < 0.0 && fb > 0.0) {
                    a = xa, ga = fa, b = xb, gb = fb;
                    break;
                }
                xa = xb, fa = fb;
            }
        }
        if (ga >= 0.0) {
            res.rho_s_hat[i] = lo;
            resid[i] = ga;
            if (ga > cfg.tol) res.channel_status[i] = ChannelStatus::clamped_low;
            continue;
        }
        if (gb <= 0.0) {
            res.rho_s_hat[i] = hi;
            resid[i] = gb;
            if (-gb > cfg.tol) res.channel_status[i] = ChannelStatus::clamped_high;
            continue;
        }
        double x = 0.5 * (a + b);
        double gx = g(x);
        std::size_t it = 0;
        while (std::abs(gx) > cfg.tol && it < cfg.max_iters && b - a > 1e-15) {
            ++it;
            if (gx < 0.0) {
                a = x;
                ga = gx;
            } else {
                b = x;
                gb = gx;
            }
            const double d = dg(x);
            double next = d != 0.0 ? x - gx / d : std::numeric_limits<double>::quiet_NaN();
            if (!(next > a && next < b)) next = 0.5 * (a + b);  // zero slope or step out of bracket
            x = next;
            gx = g(x);
        }
        max_iters_used = std::max(max_iters_used, it);
        res.rho_s_hat[i] = x;
        resid[i] = gx;
        if (std::abs(gx) > cfg.tol && b - a > 1e-15) res.channel_status[i] = ChannelStatus::failed;
    }

    double r2 = 0.0;
    for (double r : resid) r2 += r * r;
    res.residual_norm = std::sqrt(r2);
    res.residual_history.push_back(res.residual_norm);
    res.iterations = max_iters_used;
    res.converged = std::none_of(res.channel_status.begin(), res.channel_status.end(),
                                 [](ChannelStatus s) { return s == ChannelStatus::failed; });
    return res;
}

/// Legendre polynomials P_0..P_{P-1} evaluated at each channel's normalized
/// wavelength; k x P.
class LegendreBasis {
public:
    LegendreBasis(const WavelengthGrid& grid, std::size_t order) : values_(grid.k(), order) {
        if (order == 0) throw ConfigError("basis order must be >= 1");
        const auto& l = grid.lambdas();
        const double lmin = *std::min_element(l.begin(), l.end());
        const double lmax = *std::max_element(l.begin(), l.end());
        for (std::size_t i = 0; i < grid.k(); ++i) {
            const double t = lmax > lmin ? 2.0 * (l[i] - lmin) / (lmax - lmin) - 1.0 : 0.0;
            const auto r = static_cast<Eigen::Index>(i);
            values_(r, 0) = 1.0;
            if (order > 1) values_(r, 1) = t;
            for (std::size_t n = 1; n + 1 < order; ++n) {
                const auto c = static_cast<Eigen::Index>(n);
                const double nn = static_cast<double>(n);
                values_(r, c + 1) = ((2.0 * nn + 1.0) * t * values_(r, c) - nn * values_(r, c - 1)) / (nn + 1.0);
            }
        }
    }

    std::size_t order() const { return static_cast<std::size_t>(values_.cols()); }
    const Eigen::MatrixXd& values() const { return values_; }

    /// Unclamped expansion.
    Eigen::VectorXd expand(const Eigen::Ref<const Eigen::VectorXd>& c) const { return values_ * c; }

    /// Least-squares coefficients of a reflectance spectrum.
    Eigen::VectorXd fit(const Eigen::Ref<const Eigen::VectorXd>& rho) const {
        return values_.colPivHouseholderQr().solve(rho);
    }

private:
    Eigen::MatrixXd values_;
};

struct ResidualTerms {
    Eigen::VectorXd residual;  ///< F(x) - y_obs, length k
    Eigen::MatrixXd jacobian;  ///< d residual / d x, k x (4 + P)
    Eigen::VectorXd gradient;  ///< J^T r
    Eigen::MatrixXd gauss_newton;  ///< J^T J
};

/// Gradient J^T r and Gauss-Newton matrix J^T J of 0.5 |r|^2.
inline ResidualTerms gauss_newton_terms(Eigen::VectorXd r, Eigen::MatrixXd J) {
    if (J.rows() != r.size()) throw DimensionError("Jacobian rows must match residual length");
    ResidualTerms t;
    t.gradient = J.transpose() * r;
    t.gauss_newton = J.transpose() * J;
    t.residual = std::move(r);
    t.jacobian = std::move(J);
    return t;
}

/// Reflectance implied by packed coefficients, clamped to [0, 0.9].
inline SurfaceSpectrum basis_reflectance(const Eigen::Ref<const Eigen::VectorXd>& x_packed, const LegendreBasis& basis) {
    const Eigen::VectorXd rho = basis.expand(x_packed.tail(static_cast<Eigen::Index>(basis.order())));
    SurfaceSpectrum s;
    s.rho_s.resize(static_cast<std::size_t>(rho.size()));
    for (Eigen::Index i = 0; i < rho.size(); ++i)
        s.rho_s[static_cast<std::size_t>(i)] = std::clamp(rho(i), 0.0, kMaxSurfaceReflectance);
    return s;
}

/// Residual, Jacobian, gradient and Gauss-Newton matrix at packed
/// x = [mu0, tau550, alpha, wvap, c_0..c_{P-1}]. Clamped reflectance channels
/// contribute zero derivative with respect to the coefficients.
inline ResidualTerms residual_and_gradient(const Eigen::Ref<const Eigen::VectorXd>& x_packed,
                                           const std::vector<double>& y_obs, const EmulatorModel& F,
                                           const LegendreBasis& basis) {
    const std::size_t k = F.k();
    const std::size_t P = basis.order();
    if (static_cast<std::size_t>(x_packed.size()) != kAtmParams + P)
        throw DimensionError("packed parameter vector must have 4 + P entries");
    if (y_obs.size() != k) throw DimensionError("observed spectrum length does not match k");
    const AtmosphericState st = AtmosphericState::from_array(std::span<const double>(x_packed.data(), kAtmParams));
    const Eigen::VectorXd raw = basis.expand(x_packed.tail(static_cast<Eigen::Index>(P)));
    const SurfaceSpectrum surf = basis_reflectance(x_packed, basis);

    const std::vector<double> pred = predict_spectrum(F, st, surf);
    const Eigen::MatrixXd JF = jacobian(F, st, surf);
    Eigen::VectorXd r(static_cast<Eigen::Index>(k));
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(kAtmParams + P));
    for (std::size_t i = 0; i < k; ++i) {
        const auto row = static_cast<Eigen::Index>(i);
        r(row) = pred[i] - y_obs[i];
        J.row(row).head(kAtmParams) = JF.row(row).head(kAtmParams);
        const bool clamped = raw(row) < 0.0 || raw(row) > kMaxSurfaceReflectance;
        if (!clamped)
            J.row(row).tail(static_cast<Eigen::Index>(P)) =
                JF(row, static_cast<Eigen::Index>(kAtmParams + i)) * basis.values().row(row);
    }
    return gauss_newton_terms(std::move(r), std::move(J));
}

/// Projects the atmospheric block of x onto the retrieval box.
inline void project_state(Eigen::Ref<Eigen::VectorXd> x, const StateRanges& ranges) {
    for (std::size_t a = 0; a < kAtmParams; ++a) {
        const Range& rg = ranges.axis(a);
        x(static_cast<Eigen::Index>(a)) = std::clamp(x(static_cast<Eigen::Index>(a)), rg.low, rg.high);
    }
}

/// Atmospheric start states: `per_axis` evenly spread interior points on
/// mu0, tau550 and wvap (alpha at its midpoint). One per axis is the plain
/// range midpoint.
inline std::vector<AtmosphericState> joint_starts(const StateRanges& box, std::size_t per_axis) {
    if (per_axis == 0) throw ConfigError("retrieval.starts_per_axis must be >= 1");
    std::vector<double> f(per_axis);
    for (std::size_t i = 0; i < per_axis; ++i)
        f[i] = per_axis == 1 ? 0.5 : 0.2 + 0.6 * static_cast<double>(i) / static_cast<double>(per_axis - 1);
    const auto at = [](const Range& r, double t) { return r.low + t * r.width(); };
    std::vector<AtmosphericState> out;
    // midpoint first so ties resolve to it
    out.push_back({at(box.mu0, 0.5), at(box.tau550, 0.5), at(box.alpha, 0.5), at(box.wvap, 0.5)});
    for (double fm : f)
        for (double ft : f)
            for (double fw : f) {
                const AtmosphericState s{at(box.mu0, fm), at(box.tau550, ft), at(box.alpha, 0.5), at(box.wvap, fw)};
                if (!(s == out.front())) out.push_back(s);
            }
    return out;
}

/// Packed start vector: the given atmosphere and the Legendre least-squares
/// fit to the known-atmosphere reflectance retrieved at that atmosphere.
inline Eigen::VectorXd joint_start_vector(const AtmosphericState& atm, const std::vector<double>& y_obs,
                                          const EmulatorModel& F, const RetrievalConfig& cfg,
                                          const LegendreBasis& basis) {
    RetrievalConfig known = cfg;
    known.noise_sigma = 0.0;
    const RetrievalResult r = invert_reflectance(y_obs, atm, F, known);
    Eigen::VectorXd x(static_cast<Eigen::Index>(kAtmParams + basis.order()));
    const auto a = atm.to_array();
    for (std::size_t i = 0; i < kAtmParams; ++i) x(static_cast<Eigen::Index>(i)) = a[i];
    x.tail(static_cast<Eigen::Index>(basis.order())) =
        basis.fit(Eigen::Map<const Eigen::VectorXd>(r.rho_s_hat.data(), static_cast<Eigen::Index>(r.rho_s_hat.size())));
    return x;
}

namespace detail {

/// One Levenberg-Marquardt descent from `x`.
inline RetrievalResult lm_solve(const std::vector<double>& y_obs, const EmulatorModel& F, const RetrievalConfig& cfg,
                                const LegendreBasis& basis, const StateRanges& box, Eigen::VectorXd x) {
    project_state(x, box);
    RetrievalResult res;
    ResidualTerms terms = residual_and_gradient(x, y_obs, F, basis);
    double rnorm = terms.residual.norm();
    if (!std::isfinite(rnorm)) throw NumericalError("non-finite residual at the initial guess");
    res.residual_history.push_back(rnorm);
    double lambda = cfg.lm_lambda;
    constexpr double kMaxLambda = 1e12;

    while (rnorm > cfg.tol && res.iterations < cfg.max_iters) {
        ++res.iterations;
        bool accepted = false;
        while (!accepted && lambda <= kMaxLambda) {
            Eigen::MatrixXd A = terms.gauss_newton;
            for (Eigen::Index d = 0; d < A.rows(); ++d) A(d, d) += lambda * std::max(A(d, d), 1e-12);
            Eigen::VectorXd trial = x + A.ldlt().solve(-terms.gradient);
            project_state(trial, box);
            ResidualTerms t = residual_and_gradient(trial, y_obs, F, basis);
            const double tn = t.residual.norm();
            if (!std::isfinite(tn)) throw NumericalError("non-finite residual during joint retrieval");
            if (tn < rnorm) {
                const double prev = rnorm;
                x = std::move(trial);
                terms = std::move(t);
                rnorm = tn;
                lambda = std::max(lambda / 10.0, 1e-12);
                accepted = true;
                res.residual_history.push_back(rnorm);
                if (prev - tn <= 1e-12 * prev) res.converged = true;  // decrease at roundoff
            } else {
                lambda *= 10.0;
            }
        }
        if (!accepted) {
            res.converged = true;  // no descent left from here
            break;
        }
        if (res.converged) break;
    }
    if (rnorm <= cfg.tol) res.converged = true;

    res.residual_norm = rnorm;
    res.state_hat = AtmosphericState::from_array(std::span<const double>(x.data(), kAtmParams));
    res.coefficients.assign(x.data() + kAtmParams, x.data() + x.size());
    res.rho_s_hat = basis_reflectance(x, basis).rho_s;
    return res;
}

}  // namespace detail

/// Joint atmosphere + smooth-reflectance fit by Levenberg-Marquardt.
/// Accepted steps strictly decrease |r|; damping is divided by 10 on accept
/// and multiplied by 10 on reject. Converged when |r| <= tol or no further
/// descent is possible (damping saturates or the decrease is at roundoff).
///
/// With `init` a single descent runs from it. Otherwise one descent runs from
/// each of `joint_starts` and the lowest final residual wins.
inline RetrievalResult invert_joint(std::vector<double> y_obs, const EmulatorModel& F, const RetrievalConfig& cfg,
                                    std::optional<Eigen::VectorXd> init = std::nullopt) {
    const std::size_t k = F.k();
    detail::check_observation(y_obs, k);
    cfg.validate();
    if (k <= kAtmParams + cfg.basis_order)
        throw ConfigError("joint retrieval needs k > 4 + basis_order channels");
    y_obs = add_noise(std::move(y_obs), cfg.noise_sigma, cfg.noise_seed);
    const LegendreBasis basis(F.grid, cfg.basis_order);
    const StateRanges& box = cfg.box(F);

    if (init) {
        if (static_cast<std::size_t>(init->size()) != kAtmParams + cfg.basis_order)
            throw DimensionError("initial guess must have 4 + P entries");
        return detail::lm_solve(y_obs, F, cfg, basis, box, *init);
    }
    std::optional<RetrievalResult> best;
    for (const auto& atm : joint_starts(box, cfg.starts_per_axis)) {
        RetrievalResult r = detail::lm_solve(y_obs, F, cfg, basis, box, joint_start_vector(atm, y_obs, F, cfg, basis));
        if (!best || r.residual_norm < best->residual_norm) best = std::move(r);
    }
    return std::move(*best);
}

}  // namespace nrtm
