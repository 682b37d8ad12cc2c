#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <numeric>

#include "gradcheck.hpp"
#include "nrtm/retrieval.hpp"
#include "support.hpp"

using namespace nrtm;

namespace {

constexpr std::size_t kK = 12;

const EmulatorModel& model() {
    static const EmulatorModel F = [] {
        auto opts = testkit::quick_options(150, 32, 11);
        return train_emulator(testkit::small_dataset(3000, kK, 31), opts);
    }();
    return F;
}

RetrievalConfig small_basis() {
    RetrievalConfig c;
    c.basis_order = 3;
    return c;
}

Eigen::VectorXd packed(const AtmosphericState& st, const std::vector<double>& c) {
    Eigen::VectorXd x(static_cast<Eigen::Index>(kAtmParams + c.size()));
    const auto a = st.to_array();
    for (std::size_t i = 0; i < kAtmParams; ++i) x(static_cast<Eigen::Index>(i)) = a[i];
    for (std::size_t i = 0; i < c.size(); ++i) x(static_cast<Eigen::Index>(kAtmParams + i)) = c[i];
    return x;
}

// Per-channel activation patterns and clamp flags at packed x.
std::vector<std::int8_t> packed_pattern(const EmulatorModel& F, const LegendreBasis& basis, const Eigen::VectorXd& x) {
    const auto st = AtmosphericState::from_array(std::span<const double>(x.data(), kAtmParams));
    const Eigen::VectorXd raw = basis.expand(x.tail(static_cast<Eigen::Index>(basis.order())));
    const auto surf = basis_reflectance(x, basis);
    std::vector<std::int8_t> p;
    for (std::size_t i = 0; i < F.k(); ++i) {
        const auto a = testkit::activation_pattern(F.subnets[i], emulator_input(F, i, st, surf.rho_s[i]));
        p.insert(p.end(), a.begin(), a.end());
        const double v = raw(static_cast<Eigen::Index>(i));
        p.push_back(v < 0.0 ? -1 : (v > kMaxSurfaceReflectance ? 1 : 0));
    }
    return p;
}

}  // namespace

TEST(KnownAtmosphere, RecoversEmulatorGeneratedReflectance) {
    // The fixed point is unique only where the channel response is strictly
    // increasing on [0, 0.9]; other (state, channel) pairs are skipped.
    const auto& F = model();
    Rng rng(1);
    std::size_t checked = 0, skipped = 0;
    for (int trial = 0; trial < 40; ++trial) {
        const AtmosphericState st{uniform(rng, 0.4, 1.0), uniform(rng, 0.02, 0.45), uniform(rng, 0.6, 1.9),
                                  uniform(rng, 0.3, 4.7)};
        SurfaceSpectrum s;
        for (std::size_t i = 0; i < kK; ++i) s.rho_s.push_back(uniform(rng, 0.05, 0.85));
        const auto y = predict_spectrum(F, st, s);
        RetrievalConfig cfg;
        cfg.tol = 1e-12;
        const RetrievalResult r = invert_reflectance(y, st, F, cfg);
        for (std::size_t i = 0; i < kK; ++i) {
            bool monotone = true;
            double prev = forward(F.subnets[i], emulator_input(F, i, st, 0.0));
            for (int q = 1; q <= 900 && monotone; ++q) {
                const double v = forward(F.subnets[i], emulator_input(F, i, st, 0.001 * q));
                monotone = v > prev;
                prev = v;
            }
            if (!monotone) {
                ++skipped;
                continue;
            }
            ++checked;
            EXPECT_EQ(r.channel_status[i], ChannelStatus::ok);
            EXPECT_NEAR(r.rho_s_hat[i], s.rho_s[i], 1e-6) << "trial " << trial << " channel " << i;
        }
    }
    EXPECT_GT(checked, 9 * skipped);
}

TEST(KnownAtmosphere, FindsInteriorRootWhenEndpointsDoNotBracket) {
    // One channel, identity scaler, f(rho) = 2 relu(rho - 0.2) + 0.5 relu(0.2 - rho):
    // f(0) = 0.1 lies above y = 0.05, but f crosses y upward at rho = 0.225.
    EmulatorModel F;
    F.grid = WavelengthGrid({0.5});
    F.scaler.mean.assign(5, 0.0);
    F.scaler.stddev.assign(5, 1.0);
    MlpModel m = glorot_init({5, 2, 1}, 1);
    m.weights[0].setZero();
    m.weights[0](0, 4) = 1.0;
    m.weights[0](1, 4) = -1.0;
    m.biases[0] << -0.2, 0.2;
    m.weights[1] << 2.0, 0.5;
    m.biases[1].setZero();
    F.subnets = {m};
    const AtmosphericState st;
    const RetrievalResult r = invert_reflectance({0.05}, st, F, RetrievalConfig{});
    EXPECT_EQ(r.channel_status[0], ChannelStatus::ok);
    EXPECT_NEAR(r.rho_s_hat[0], 0.225, 1e-9);
    const RetrievalResult below = invert_reflectance({-0.1}, st, F, RetrievalConfig{});
    EXPECT_EQ(below.channel_status[0], ChannelStatus::clamped_low);
    EXPECT_EQ(below.rho_s_hat[0], 0.0);
}

TEST(KnownAtmosphere, ClampsAndFlagsOutOfRangeChannels) {
    const auto& F = model();
    const AtmosphericState st{0.6, 0.3, 1.2, 2.0};
    SurfaceSpectrum s{std::vector<double>(kK, 0.3)};
    auto y = predict_spectrum(F, st, s);
    SurfaceSpectrum zero{std::vector<double>(kK, 0.0)}, top{std::vector<double>(kK, kMaxSurfaceReflectance)};
    y[2] = predict_spectrum(F, st, zero)[2] - 0.05;  // below the path-reflectance floor
    y[5] = predict_spectrum(F, st, top)[5] + 0.05;
    const RetrievalResult r = invert_reflectance(y, st, F, RetrievalConfig{});
    EXPECT_EQ(r.rho_s_hat[2], 0.0);
    EXPECT_EQ(r.channel_status[2], ChannelStatus::clamped_low);
    EXPECT_EQ(r.rho_s_hat[5], kMaxSurfaceReflectance);
    EXPECT_EQ(r.channel_status[5], ChannelStatus::clamped_high);
    EXPECT_EQ(r.channel_status[0], ChannelStatus::ok);
    for (double v : r.rho_s_hat) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, kMaxSurfaceReflectance);
    }
}

TEST(KnownAtmosphere, ChannelsAreIndependent) {
    const auto& F = model();
    const AtmosphericState st{0.8, 0.1, 1.5, 1.0};
    Rng rng(2);
    std::vector<double> y(kK);
    for (auto& v : y) v = uniform(rng, 0.1, 0.5);
    const RetrievalResult base = invert_reflectance(y, st, F, RetrievalConfig{});
    for (std::size_t j = 0; j < kK; ++j) {
        auto y2 = y;
        y2[j] += 0.07;
        const RetrievalResult r = invert_reflectance(y2, st, F, RetrievalConfig{});
        for (std::size_t i = 0; i < kK; ++i)
            if (i != j) ASSERT_EQ(std::memcmp(&r.rho_s_hat[i], &base.rho_s_hat[i], sizeof(double)), 0);
    }
}

TEST(KnownAtmosphere, InputErrors) {
    const auto& F = model();
    EXPECT_THROW(invert_reflectance(std::vector<double>(3, 0.1), AtmosphericState{}, F, RetrievalConfig{}),
                 DimensionError);
    auto y = std::vector<double>(kK, 0.1);
    y[0] = std::nan("");
    EXPECT_THROW(invert_reflectance(y, AtmosphericState{}, F, RetrievalConfig{}), NumericalError);
    RetrievalConfig bad;
    bad.tol = 0.0;
    EXPECT_THROW(invert_reflectance(std::vector<double>(kK, 0.1), AtmosphericState{}, F, bad), ConfigError);
}

TEST(Noise, SeededAndOptional) {
    const std::vector<double> y(50, 0.2);
    EXPECT_EQ(add_noise(y, 0.0, 1), y);
    EXPECT_EQ(add_noise(y, 0.01, 7), add_noise(y, 0.01, 7));
    EXPECT_NE(add_noise(y, 0.01, 7), add_noise(y, 0.01, 8));
    const auto n = add_noise(y, 0.01, 7);
    double s2 = 0.0;
    for (std::size_t i = 0; i < n.size(); ++i) s2 += (n[i] - 0.2) * (n[i] - 0.2);
    EXPECT_NEAR(std::sqrt(s2 / 50.0), 0.01, 0.005);
}

TEST(Legendre, BasisValues) {
    const LegendreBasis b(WavelengthGrid({0.4, 0.7, 1.0}), 3);
    // t = -1, 0, 1; P2(t) = (3t^2 - 1) / 2
    const Eigen::MatrixXd& v = b.values();
    EXPECT_DOUBLE_EQ(v(0, 1), -1.0);
    EXPECT_NEAR(v(1, 1), 0.0, 1e-15);
    EXPECT_DOUBLE_EQ(v(2, 1), 1.0);
    EXPECT_DOUBLE_EQ(v(0, 2), 1.0);
    EXPECT_NEAR(v(1, 2), -0.5, 1e-15);
    EXPECT_DOUBLE_EQ(v(2, 2), 1.0);
    const Eigen::Vector3d c(0.3, 0.05, -0.02);
    EXPECT_TRUE(b.fit(b.expand(c)).isApprox(c, 1e-12));
}

TEST(ResidualGradient, ZeroResidualGivesZeroGradient) {
    const Eigen::MatrixXd J = Eigen::MatrixXd::Random(6, 4);
    EXPECT_TRUE(gauss_newton_terms(Eigen::VectorXd::Zero(6), J).gradient.isZero(0.0));
}

TEST(ResidualGradient, IdentityJacobianGivesResidual) {
    const Eigen::VectorXd r = Eigen::VectorXd::Random(5);
    const ResidualTerms t = gauss_newton_terms(r, Eigen::MatrixXd::Identity(5, 5));
    EXPECT_EQ(t.gradient, r);
    EXPECT_EQ(t.gauss_newton, Eigen::MatrixXd::Identity(5, 5));
}

TEST(ResidualGradient, MatchesFiniteDifferences) {
    const auto& F = model();
    const LegendreBasis basis(F.grid, 3);
    Rng rng(3);
    double worst = 0.0;
    std::size_t checked = 0, excluded = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const AtmosphericState st{uniform(rng, 0.4, 1.0), uniform(rng, 0.05, 0.45), uniform(rng, 0.6, 1.9),
                                  uniform(rng, 0.3, 4.7)};
        const Eigen::VectorXd x = packed(st, {uniform(rng, 0.2, 0.5), uniform(rng, -0.1, 0.1), uniform(rng, -0.05, 0.05)});
        std::vector<double> y(kK);
        for (auto& v : y) v = uniform(rng, 0.1, 0.4);
        const ResidualTerms t = residual_and_gradient(x, y, F, basis);
        const auto p0 = packed_pattern(F, basis, x);
        const auto half_sq = [&](const Eigen::VectorXd& v) { return 0.5 * residual_and_gradient(v, y, F, basis).residual.squaredNorm(); };
        for (Eigen::Index c = 0; c < x.size(); ++c) {
            const double h = 1e-6 * std::max(1.0, std::abs(x(c)));
            Eigen::VectorXd xp = x, xm = x;
            xp(c) += h;
            xm(c) -= h;
            if (packed_pattern(F, basis, xp) != p0 || packed_pattern(F, basis, xm) != p0) {
                ++excluded;
                continue;
            }
            const double fd = (half_sq(xp) - half_sq(xm)) / (2.0 * h);
            worst = std::max(worst, testkit::relative_error(fd, t.gradient(c)));
            ++checked;
        }
        EXPECT_TRUE(t.gauss_newton.isApprox(t.jacobian.transpose() * t.jacobian));
    }
    EXPECT_GT(checked, 100u);
    EXPECT_LE(worst, 1e-4);
}

TEST(Joint, InitAtTruthStaysPut) {
    const auto& F = model();
    const LegendreBasis basis(F.grid, 3);
    const AtmosphericState st{0.7, 0.25, 1.1, 2.5};
    const Eigen::VectorXd x = packed(st, {0.35, 0.04, -0.02});
    const auto y = predict_spectrum(F, st, basis_reflectance(x, basis));
    const RetrievalResult r = invert_joint(y, F, small_basis(), x);
    EXPECT_LE(r.iterations, 2u);
    EXPECT_LE(r.residual_norm, 1e-10);
    EXPECT_TRUE(r.converged);
    EXPECT_NEAR(r.state_hat->tau550, 0.25, 1e-10);
    EXPECT_NEAR(r.state_hat->wvap, 2.5, 1e-10);
}

TEST(Joint, AcceptedStepsStrictlyDecrease) {
    const auto& F = model();
    const LegendreBasis basis(F.grid, 3);
    const AtmosphericState st{0.55, 0.3, 1.4, 3.1};
    const Eigen::VectorXd x = packed(st, {0.3, -0.05, 0.03});
    const auto y = predict_spectrum(F, st, basis_reflectance(x, basis));
    const RetrievalResult r = invert_joint(y, F, small_basis());
    ASSERT_GE(r.residual_history.size(), 2u);
    for (std::size_t i = 1; i < r.residual_history.size(); ++i)
        EXPECT_LT(r.residual_history[i], r.residual_history[i - 1]);
    EXPECT_EQ(r.residual_history.back(), r.residual_norm);
    for (double v : r.residual_history) EXPECT_TRUE(std::isfinite(v));
}

TEST(Joint, RespectsTheBox) {
    const auto& F = model();
    RetrievalConfig cfg = small_basis();
    StateRanges box;
    box.tau550 = {0.1, 0.2};
    box.wvap = {1.0, 2.0};
    cfg.ranges = box;
    const AtmosphericState st{0.7, 0.4, 1.2, 4.0};  // outside the box on purpose
    SurfaceSpectrum s{std::vector<double>(kK, 0.95 * kMaxSurfaceReflectance)};
    const RetrievalResult r = invert_joint(predict_spectrum(F, st, s), F, cfg);
    ASSERT_TRUE(r.state_hat);
    EXPECT_TRUE(box.contains(*r.state_hat));
    for (double v : r.rho_s_hat) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, kMaxSurfaceReflectance);
    }
}

TEST(Joint, IterationCapIsNotAnError) {
    const auto& F = model();
    RetrievalConfig cfg = small_basis();
    cfg.max_iters = 1;
    cfg.tol = 1e-300;
    const LegendreBasis basis(F.grid, 3);
    const AtmosphericState st{0.5, 0.4, 1.8, 4.0};
    const Eigen::VectorXd truth = packed(st, {0.4, 0.1, 0.0});
    const auto y = predict_spectrum(F, st, basis_reflectance(truth, basis));
    const RetrievalResult r = invert_joint(y, F, cfg, packed(AtmosphericState{0.9, 0.05, 0.8, 0.5}, {0.2, 0.0, 0.0}));
    EXPECT_EQ(r.iterations, 1u);
    EXPECT_FALSE(r.converged);
    EXPECT_EQ(r.residual_history.size(), 2u);
}

TEST(Joint, NeedsMoreChannelsThanUnknowns) {
    RetrievalConfig cfg;
    cfg.basis_order = kK - 4;
    EXPECT_THROW(invert_joint(std::vector<double>(kK, 0.2), model(), cfg), ConfigError);
}

TEST(Joint, RelabelingChannelsChangesNothing) {
    const auto& F = model();
    const LegendreBasis basis(F.grid, 3);
    const AtmosphericState st{0.65, 0.2, 1.3, 1.7};
    const Eigen::VectorXd truth = packed(st, {0.3, 0.06, -0.03});
    const auto y = predict_spectrum(F, st, basis_reflectance(truth, basis));

    std::vector<std::size_t> perm(kK);
    std::iota(perm.begin(), perm.end(), 0u);
    Rng rng(5);
    shuffle(std::span<std::size_t>(perm), rng);
    EmulatorModel G = F;
    std::vector<double> lam(kK), yp(kK);
    for (std::size_t i = 0; i < kK; ++i) {
        G.subnets[i] = F.subnets[perm[i]];
        lam[i] = F.grid[perm[i]];
        yp[i] = y[perm[i]];
        G.scaler.mean[kAtmParams + i] = F.scaler.mean[kAtmParams + perm[i]];
        G.scaler.stddev[kAtmParams + i] = F.scaler.stddev[kAtmParams + perm[i]];
    }
    G.grid = WavelengthGrid::unchecked(lam);

    const Eigen::VectorXd start = packed(AtmosphericState{0.6, 0.25, 1.25, 2.0}, {0.28, 0.0, 0.0});
    const RetrievalResult a = invert_joint(y, F, small_basis(), start);
    const RetrievalResult b = invert_joint(yp, G, small_basis(), start);
    EXPECT_NEAR(a.state_hat->tau550, b.state_hat->tau550, 1e-9);
    EXPECT_NEAR(a.state_hat->wvap, b.state_hat->wvap, 1e-9);
    for (std::size_t p = 0; p < 3; ++p) EXPECT_NEAR(a.coefficients[p], b.coefficients[p], 1e-9);
    for (std::size_t i = 0; i < kK; ++i) EXPECT_NEAR(b.rho_s_hat[i], a.rho_s_hat[perm[i]], 1e-9);

    const RetrievalResult ka = invert_reflectance(y, st, F, RetrievalConfig{});
    const RetrievalResult kb = invert_reflectance(yp, st, G, RetrievalConfig{});
    for (std::size_t i = 0; i < kK; ++i) EXPECT_EQ(kb.rho_s_hat[i], ka.rho_s_hat[perm[i]]);
}

TEST(Joint, StartsIncludeTheMidpointFirst) {
    const StateRanges box;
    const auto s = joint_starts(box, 3);
    ASSERT_EQ(s.size(), 27u);  // the grid already contains the midpoint
    EXPECT_DOUBLE_EQ(s[0].mu0, 0.5 * (box.mu0.low + box.mu0.high));
    EXPECT_EQ(joint_starts(box, 1).size(), 1u);
    for (const auto& st : s) EXPECT_TRUE(box.contains(st));
}
