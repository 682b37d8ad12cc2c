#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "nrtm/lut.hpp"
#include "nrtm/rng.hpp"

using namespace nrtm;

namespace {

std::array<std::size_t, kLutAxes> knots(std::size_t q) { return {q, q, q, q, q}; }

const LutBuild& small_lut() {
    static const LutBuild b = build_lut(StateRanges{}, {3, 4, 3, 5, 4}, WavelengthGrid::uniform(6), OracleConfig{});
    return b;
}

std::array<double, kLutAxes> random_query(Rng& rng, const StateRanges& r) {
    std::array<double, kLutAxes> q{};
    for (std::size_t a = 0; a < kLutAxes; ++a) q[a] = uniform(rng, r.axis(a).low, r.axis(a).high);
    return q;
}

}  // namespace

TEST(Lut, CountsAndFootprint) {
    const LutBuild b = build_lut(StateRanges{}, knots(2), WavelengthGrid::uniform(32), OracleConfig{});
    EXPECT_EQ(b.table.values.size(), 1024u);
    EXPECT_EQ(b.oracle_spectra, 32u);
    EXPECT_EQ(b.bytes, (1024u + 10u + 32u) * sizeof(double));
    EXPECT_EQ(lut_footprint(lut_axes(StateRanges{}, knots(5)), 32), (3125u * 32u + 25u + 32u) * sizeof(double));
    EXPECT_EQ(build_lut(StateRanges{}, knots(5), WavelengthGrid::uniform(2), OracleConfig{}).oracle_spectra, 3125u);
}

TEST(Lut, KnotsSpanRanges) {
    const StateRanges r;
    const auto axes = lut_axes(r, {2, 3, 4, 5, 6});
    for (std::size_t a = 0; a < kLutAxes; ++a) {
        EXPECT_EQ(axes[a].front(), r.axis(a).low);
        EXPECT_EQ(axes[a].back(), r.axis(a).high);
        EXPECT_TRUE(std::is_sorted(axes[a].begin(), axes[a].end()));
    }
    EXPECT_THROW(lut_axes(r, {1, 3, 3, 3, 3}), ConfigError);
}

TEST(Lut, ExactAtKnots) {
    const LookupTable& t = small_lut().table;
    const OracleConfig cfg;
    for (std::size_t f = 0; f < t.knot_combinations(); ++f) {
        std::array<std::size_t, kLutAxes> idx{};
        std::size_t rem = f;
        for (std::size_t a = kLutAxes; a-- > 0;) {
            idx[a] = rem % t.axes[a].size();
            rem /= t.axes[a].size();
        }
        const AtmosphericState st{t.axes[0][idx[0]], t.axes[1][idx[1]], t.axes[2][idx[2]], t.axes[3][idx[3]]};
        const double rho = t.axes[4][idx[4]];
        for (std::size_t c = 0; c < t.k(); ++c) {
            const double direct = toa_reflectance(st, rho, t.grid[c], cfg);
            ASSERT_EQ(t.at(idx, c), direct);
            ASSERT_EQ(interpolate(t, st, rho, c), direct);
        }
    }
}

TEST(Lut, MidpointIsMeanOfNeighbours) {
    const LookupTable& t = small_lut().table;
    const AtmosphericState st{t.axes[0][1], t.axes[1][2], t.axes[2][0], t.axes[3][3]};
    const double rho = 0.5 * (t.axes[4][1] + t.axes[4][2]);
    for (std::size_t c = 0; c < t.k(); ++c) {
        const double lo = t.at({1, 2, 0, 3, 1}, c), hi = t.at({1, 2, 0, 3, 2}, c);
        EXPECT_NEAR(interpolate(t, st, rho, c), 0.5 * (lo + hi), 1e-16);
    }
}

TEST(Lut, ConvexBounded) {
    const LookupTable& t = small_lut().table;
    Rng rng(3);
    for (int i = 0; i < 2000; ++i) {
        const auto q = random_query(rng, StateRanges{});
        const LutCell cell = locate(t, q);
        for (std::size_t c = 0; c < t.k(); ++c) {
            double lo = INFINITY, hi = -INFINITY;
            for (unsigned mask = 0; mask < 32; ++mask) {
                std::array<std::size_t, kLutAxes> idx{};
                for (std::size_t a = 0; a < kLutAxes; ++a) idx[a] = cell.lower[a] + ((mask >> a) & 1u);
                lo = std::min(lo, t.at(idx, c));
                hi = std::max(hi, t.at(idx, c));
            }
            const double v = interpolate(t, AtmosphericState{q[0], q[1], q[2], q[3]}, q[4], c);
            ASSERT_GE(v, lo - 1e-15);
            ASSERT_LE(v, hi + 1e-15);
        }
    }
}

TEST(Lut, ExactOnSeparableAffineFunction) {
    // Affine in each parameter separately (a product of affine factors plus
    // an affine sum), so multilinear interpolation reproduces it.
    const auto fn = [](const AtmosphericState& s, double rho, double lambda) {
        return (1.0 + 2.0 * s.mu0) * (0.5 - s.tau550) * (1.0 + 0.3 * s.alpha) * (2.0 + 0.1 * s.wvap) * (0.2 + rho) +
               lambda * (s.mu0 - 3.0 * s.wvap + rho);
    };
    const WavelengthGrid grid = WavelengthGrid::uniform(3);
    const LookupTable t = tabulate(lut_axes(StateRanges{}, {3, 4, 2, 5, 3}), grid, fn);
    Rng rng(4);
    for (int i = 0; i < 1000; ++i) {
        const auto q = random_query(rng, StateRanges{});
        const AtmosphericState st{q[0], q[1], q[2], q[3]};
        for (std::size_t c = 0; c < 3; ++c) {
            const double expect = fn(st, q[4], grid[c]);
            ASSERT_NEAR(interpolate(t, st, q[4], c), expect, 1e-12 * std::max(1.0, std::abs(expect)));
        }
    }
}

TEST(Lut, RefinementKeepsSharedKnots) {
    const WavelengthGrid grid = WavelengthGrid::uniform(4);
    const LookupTable coarse = build_lut(StateRanges{}, knots(3), grid, OracleConfig{}).table;
    const LookupTable fine = build_lut(StateRanges{}, knots(5), grid, OracleConfig{}).table;
    for (std::size_t a = 0; a < kLutAxes; ++a)
        for (std::size_t i = 0; i < 3; ++i) ASSERT_EQ(coarse.axes[a][i], fine.axes[a][2 * i]);
    for (std::size_t f = 0; f < coarse.knot_combinations(); ++f) {
        std::array<std::size_t, kLutAxes> idx{}, fidx{};
        std::size_t rem = f;
        for (std::size_t a = kLutAxes; a-- > 0;) {
            idx[a] = rem % 3;
            rem /= 3;
            fidx[a] = 2 * idx[a];
        }
        for (std::size_t c = 0; c < 4; ++c) ASSERT_EQ(coarse.at(idx, c), fine.at(fidx, c));
    }
}

TEST(Lut, SpectrumMatchesPerChannel) {
    const LookupTable& t = small_lut().table;
    const AtmosphericState st{0.55, 0.12, 1.7, 3.3};
    const SurfaceSpectrum s{{0.1, 0.2, 0.3, 0.4, 0.5, 0.6}};
    const auto y = interpolate_spectrum(t, st, s);
    for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(y[c], interpolate(t, st, s.rho_s[c], c));
    EXPECT_THROW(interpolate_spectrum(t, st, SurfaceSpectrum{{0.1}}), DimensionError);
}

TEST(Lut, OutOfRangeIsExtrapolationError) {
    const LookupTable& t = small_lut().table;
    EXPECT_THROW(interpolate(t, AtmosphericState{0.2, 0.1, 1.0, 1.0}, 0.3, 0), ExtrapolationError);
    EXPECT_THROW(interpolate(t, AtmosphericState{0.5, 0.1, 1.0, 1.0}, 0.95, 0), ExtrapolationError);
    EXPECT_THROW(interpolate(t, AtmosphericState{0.5, 0.1, 1.0, 1.0}, 0.3, 99), DimensionError);
}

TEST(Lut, RefusesTablesAboveCap) {
    try {
        build_lut(StateRanges{}, knots(9), WavelengthGrid::uniform(32), OracleConfig{}, 1 << 20);
        FAIL() << "expected LutTooLarge";
    } catch (const LutTooLarge& e) {
        EXPECT_EQ(e.bytes(), lut_footprint(lut_axes(StateRanges{}, knots(9)), 32));
    }
}

TEST(Lut, BinaryRoundTripIsBitwise) {
    const LookupTable& t = small_lut().table;
    std::stringstream ss;
    write_lut(ss, t);
    const std::string bytes = ss.str();
    EXPECT_EQ(bytes.size(), 8u + 4 + 4 + 8 + 5 * 8 + (3 + 4 + 3 + 5 + 4) * 8 + 6 * 8 + t.values.size() * 8);
    EXPECT_EQ(bytes.substr(0, 8), "NRTMLUT1");
    std::istringstream in(bytes);
    const LookupTable back = read_lut(in);
    EXPECT_EQ(back.axes, t.axes);
    EXPECT_EQ(back.grid.lambdas(), t.grid.lambdas());
    ASSERT_EQ(back.values.size(), t.values.size());
    EXPECT_EQ(std::memcmp(back.values.data(), t.values.data(), t.values.size() * sizeof(double)), 0);
}

TEST(Lut, TruncatedOrForeignFileIsParseError) {
    std::stringstream ss;
    write_lut(ss, small_lut().table);
    const std::string bytes = ss.str();
    for (std::size_t cut : {4ul, 20ul, 100ul, bytes.size() - 1}) {
        std::istringstream in(bytes.substr(0, cut));
        EXPECT_THROW(read_lut(in), ParseError) << cut;
    }
    std::string bad = bytes;
    bad[0] = 'X';
    std::istringstream in(bad);
    EXPECT_THROW(read_lut(in), ParseError);
}
