#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "qpi/coherence.hpp"

using namespace qpi;
using namespace qpi::coherence;

namespace {
const double kTheta = std::asin(0.4);
}

TEST(LongitudinalFrequency, RedOnAxis) { EXPECT_NEAR(longitudinal_frequency(0.632, 0.0), 9.941748903765168, 1e-12); }

TEST(LongitudinalFrequency, BlueAtApertureAngle) {
    EXPECT_NEAR(longitudinal_frequency(0.460, kTheta), 12.518770554602092, 1e-12);
}

TEST(LongitudinalFrequency, TimesWavelengthIsTwoPi) {
    for (double lam : {0.46, 0.532, 0.632, 1.3})
        EXPECT_NEAR(longitudinal_frequency(lam, 0.0) * lam, 2 * std::numbers::pi, 1e-12);
}

TEST(LongitudinalFrequency, VanishesTowardGrazing) {
    EXPECT_LT(longitudinal_frequency(0.632, std::numbers::pi / 2 - 1e-9), 1e-7);
}

TEST(LongitudinalFrequency, RejectsBadWavelength) {
    EXPECT_THROW(longitudinal_frequency(0.0, 0.1), DomainError);
    EXPECT_THROW(longitudinal_frequency(-1.0, 0.1), DomainError);
    EXPECT_THROW(longitudinal_frequency(NAN, 0.1), DomainError);
}

TEST(MonochromaticCoherence, ThreeWavelengths) {
    EXPECT_NEAR(monochromatic_coherence_length(0.632, kTheta), 7.570234799015111, 1e-12);
    EXPECT_NEAR(monochromatic_coherence_length(0.532, kTheta), 6.372412837145632, 1e-12);
    EXPECT_NEAR(monochromatic_coherence_length(0.460, kTheta), 5.509981024599607, 1e-12);
}

TEST(MonochromaticCoherence, LinearInWavelength) {
    EXPECT_NEAR(monochromatic_coherence_length(1.264, kTheta), 2 * monochromatic_coherence_length(0.632, kTheta), 1e-12);
}

TEST(MonochromaticCoherence, DecreasingInAngle) {
    double prev = INFINITY;
    for (double t = 0.05; t < 1.5; t += 0.05) {
        const double v = monochromatic_coherence_length(0.632, t);
        EXPECT_LT(v, prev);
        prev = v;
    }
}

TEST(MonochromaticCoherence, ZeroAngleIsInfinite) {
    EXPECT_THROW(monochromatic_coherence_length(0.632, 0.0), InfiniteCoherenceError);
}

TEST(CoherenceLength, NarrowBandMatchesMonochromatic) {
    for (double lam : {0.46, 0.532, 0.632}) {
        const double a = coherence_length({lam, 0.0, kTheta});
        const double b = monochromatic_coherence_length(lam, kTheta);
        EXPECT_LE(std::abs(a - b) / b, 1e-12);
    }
}

TEST(CoherenceLength, NoAngleNoBandwidthIsInfinite) {
    EXPECT_THROW(coherence_length({0.632, 0.0, 0.0}), InfiniteCoherenceError);
}

TEST(CoherenceLength, BandwidthOnlyGivesTemporalLimit) {
    // lambda^2 / dlambda when the angular spectrum is a delta
    EXPECT_NEAR(coherence_length({0.632, 0.01, 0.0}), 0.632 * 0.632 / 0.01, 1e-12);
}

TEST(CoherenceLength, NonIncreasingInBandwidthAndAngle) {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> lam(0.4, 0.8), dl(0.0, 0.05), th(0.01, 1.4), step(0.0, 0.1);
    for (int i = 0; i < 500; ++i) {
        SourceSpec s{lam(rng), dl(rng), th(rng)};
        const double base = coherence_length(s);
        SourceSpec wider = s;
        wider.spectral_width_um += step(rng);
        EXPECT_LE(coherence_length(wider), base * (1 + 1e-15));
        SourceSpec steeper = s;
        steeper.half_angle_rad = std::min(1.5, s.half_angle_rad + step(rng));
        EXPECT_LE(coherence_length(steeper), base * (1 + 1e-15));
    }
}

TEST(CoherenceLength, ValidatesSource) {
    EXPECT_THROW(coherence_length({0.632, -0.1, 0.3}), DomainError);
    EXPECT_THROW(coherence_length({0.632, 0.0, 1.6}), DomainError);
    EXPECT_THROW(coherence_length({0.0, 0.0, 0.3}), DomainError);
}

TEST(LateralResolution, RedAndBlue) {
    EXPECT_NEAR(lateral_resolution(0.632, 0.4), 0.9638, 1e-12);
    EXPECT_NEAR(lateral_resolution(0.460, 0.4), 0.7015, 1e-12);
}

TEST(LateralResolution, CollapsesToWavelengthAtNa061) { EXPECT_NEAR(lateral_resolution(0.61, 0.61), 0.61, 1e-15); }

TEST(LateralResolution, LinearInWavelengthInverseInNa) {
    EXPECT_NEAR(lateral_resolution(1.2, 0.4) / lateral_resolution(0.6, 0.4), 2.0, 1e-12);
    EXPECT_NEAR(lateral_resolution(0.6, 0.2) / lateral_resolution(0.6, 0.4), 2.0, 1e-12);
}

TEST(LateralResolution, RejectsBadNa) {
    EXPECT_THROW(lateral_resolution(0.632, 0.0), DomainError);
    EXPECT_THROW(lateral_resolution(0.632, -0.2), DomainError);
    EXPECT_THROW(lateral_resolution(0.632, 1.2), DomainError);
}

TEST(Report, AllFieldsPositive) {
    const auto r = report(0.632, 0.4, 0.0);
    EXPECT_GT(r.coherence_length_um, 0);
    EXPECT_GT(r.lateral_resolution_um, 0);
    EXPECT_GT(r.longitudinal_frequency_rad_per_um, 0);
    EXPECT_NEAR(r.coherence_length_um, 7.570234799015111, 1e-12);
}

TEST(Units, NanometreHelpers) {
    EXPECT_DOUBLE_EQ(nm_to_um(632), 0.632);
    EXPECT_DOUBLE_EQ(um_to_nm(0.46), 460);
}
