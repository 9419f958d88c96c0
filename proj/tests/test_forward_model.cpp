#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "qpi/fft.hpp"
#include "qpi/forward_model.hpp"
#include "qpi/patch_extraction.hpp"

using namespace qpi;
using namespace qpi::forward;

namespace {

PhantomSpec centred(ClassLabel c, double peak = 2.0) {
    PhantomSpec s;
    s.class_label = c;
    s.center_row = 64;
    s.center_col = 64;
    s.peak_phase_rad = {peak, peak, peak};
    s.rng_seed = 11;
    if (c == ClassLabel::EarlyTrophozoite) s.inclusion_count = 2;
    if (c == ClassLabel::LateTrophozoite) s.pigment_fraction = 0.2;
    return s;
}

}  // namespace

TEST(Phantom, HealthyPeakAndZeroBackground) {
    const auto spec = centred(ClassLabel::Healthy, 2.5);
    const auto m = make_phantom_field(spec, 128, 128);
    const double mx = *std::max_element(m.values_rad.storage().begin(), m.values_rad.storage().end());
    EXPECT_NEAR(mx, 2.5, 2.5e-3);
    EXPECT_FALSE(m.wrapped);
    for (std::size_t r = 0; r < 128; ++r)
        for (std::size_t c = 0; c < 128; ++c)
            if (std::hypot(r - 64.0, c - 64.0) >= spec.radius_px()) ASSERT_EQ(m.values_rad(r, c), 0.0);
}

TEST(Phantom, Deterministic) {
    for (auto c : kAllClasses) {
        const auto a = make_phantom_field(centred(c), 128, 128);
        const auto b = make_phantom_field(centred(c), 128, 128);
        EXPECT_EQ(a.values_rad, b.values_rad);
    }
}

TEST(Phantom, EarlyStageHasTwoChromatinDots) {
    const auto spec = centred(ClassLabel::EarlyTrophozoite, 2.0);
    const auto m = make_phantom_field(spec, 128, 128);
    MaskGrid above(128, 128, 0);
    for (std::size_t r = 0; r < 128; ++r)
        for (std::size_t c = 0; c < 128; ++c) {
            const double base = 2.0 * biconcave_profile(std::hypot(r - 64.0, c - 64.0) / spec.radius_px());
            above(r, c) = base > 0 && m.values_rad(r, c) > 1.2 * base;
        }
    EXPECT_EQ(patches::label_components(above).size(), 2u);
}

TEST(Phantom, LateStageRaisesPigmentRegion) {
    const auto healthy = make_phantom_field(centred(ClassLabel::Healthy), 128, 128);
    const auto late = make_phantom_field(centred(ClassLabel::LateTrophozoite), 128, 128);
    std::size_t raised = 0;
    for (std::size_t i = 0; i < late.values_rad.size(); ++i)
        if (late.values_rad[i] > healthy.values_rad[i] + 1e-9) ++raised;
    EXPECT_GT(raised, 100u);
}

TEST(Phantom, Validation) {
    auto early = centred(ClassLabel::EarlyTrophozoite);
    early.inclusion_count = 1;
    EXPECT_THROW(make_phantom_field(early, 128, 128), DomainError);
    auto late = centred(ClassLabel::LateTrophozoite);
    late.pigment_fraction = 0;
    EXPECT_THROW(make_phantom_field(late, 128, 128), DomainError);
    auto big = centred(ClassLabel::Healthy);
    big.peak_phase_rad[0] = 30.0;
    EXPECT_THROW(make_phantom_field(big, 128, 128), DomainError);
}

TEST(Phantom, OutOfBoundsIsGeometryError) {
    auto s = centred(ClassLabel::Healthy);
    s.center_row = 10;
    EXPECT_THROW(make_phantom_field(s, 128, 128), GeometryError);
}

TEST(Fringes, ZeroPhaseIsPureCosine) {
    PhaseMap zero{RealGrid(32, 40, 0.0), false, 0.632};
    FringeParams p;
    p.carrier = {0.25, 0.0};
    const auto f = synthesize_interferogram(zero, p);
    for (std::size_t r = 0; r < 32; ++r)
        for (std::size_t c = 0; c < 40; ++c) {
            EXPECT_NEAR(f.pixels(r, c), 100.0 * (1 + 0.8 * std::cos(2 * std::numbers::pi * 0.25 * c)), 1e-9);
            if (c >= 4) EXPECT_NEAR(f.pixels(r, c), f.pixels(r, c - 4), 1e-9);  // period 1/0.25 px
        }
}

TEST(Fringes, PiShiftIsHalfPeriod) {
    PhaseMap zero{RealGrid(16, 16, 0.0), false, 0.632};
    PhaseMap pi{RealGrid(16, 16, std::numbers::pi), false, 0.632};
    FringeParams p;
    const auto a = synthesize_interferogram(zero, p);
    const auto b = synthesize_interferogram(pi, p);
    for (std::size_t i = 0; i < a.pixels.size(); ++i) EXPECT_NEAR(a.pixels[i] + b.pixels[i], 200.0, 1e-9);
}

TEST(Fringes, EnergyBound) {
    const auto truth = make_phantom_field(centred(ClassLabel::LateTrophozoite, 3.0), 128, 128);
    FringeParams p;
    p.noise_sigma = 5.0;
    p.seed = 3;
    const auto f = synthesize_interferogram(truth, p);
    for (double v : f.pixels.storage()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 100.0 * 1.8 + 6 * 5.0);
    }
}

TEST(Fringes, SpectrumPeaksAtCarrierBins) {
    const std::size_t n = 128;
    PhaseMap zero{RealGrid(n, n, 0.0), false, 0.632};
    FringeParams p;
    p.carrier = kDefaultCarrier;  // 25.6 and 6.4 bins: nearest bins 26 and 6
    const auto spec = fft2d(synthesize_interferogram(zero, p).pixels);
    double best = -1;
    std::size_t br = 0, bc = 0;
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c) {
            if (r == 0 && c == 0) continue;
            const double a = std::abs(spec(r, c));
            if (a > best) best = a, br = r, bc = c;
        }
    const auto sr = static_cast<long>(br > n / 2 ? static_cast<long>(br) - static_cast<long>(n) : static_cast<long>(br));
    const auto sc = static_cast<long>(bc > n / 2 ? static_cast<long>(bc) - static_cast<long>(n) : static_cast<long>(bc));
    EXPECT_TRUE((sr == 6 && sc == 26) || (sr == -6 && sc == -26)) << sr << "," << sc;
}

TEST(Fringes, AliasingRejected) {
    PhaseMap zero{RealGrid(8, 8, 0.0), false, 0.632};
    FringeParams p;
    p.carrier = {0.5, 0.0};
    EXPECT_THROW(synthesize_interferogram(zero, p), AliasingError);
    p.carrier = {0.0, 0.0};
    EXPECT_THROW(synthesize_interferogram(zero, p), AliasingError);
}

TEST(Fringes, SnapCarrierToBins) {
    const auto k = snap_carrier(kDefaultCarrier, 512, 512);
    EXPECT_DOUBLE_EQ(k.fx, 102.0 / 512);
    EXPECT_DOUBLE_EQ(k.fy, 26.0 / 512);
}

TEST(Subject, EmptyScene) {
    SubjectSpec s;
    s.cell_count = 0;
    s.rows = s.cols = 128;
    const auto sc = make_subject(s);
    EXPECT_TRUE(sc.cells.empty());
    for (const auto& f : sc.frames) EXPECT_EQ(f.pixels.rows(), 128u);
}

TEST(Subject, FiveDisjointBoxes) {
    SubjectSpec s;
    s.cell_count = 5;
    s.seed = 99;
    const auto sc = make_subject(s);
    ASSERT_EQ(sc.cells.size(), 5u);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = i + 1; j < 5; ++j) EXPECT_FALSE(sc.cells[i].box.intersects(sc.cells[j].box));
}

TEST(Subject, BoxesAreExact) {
    SubjectSpec s;
    s.cell_count = 3;
    s.seed = 5;
    const auto sc = make_subject(s);
    const auto& t = sc.truths[0].values_rad;
    for (const auto& cell : sc.cells) {
        int r0 = 1 << 30, r1 = -1, c0 = 1 << 30, c1 = -1;
        for (int r = 0; r < static_cast<int>(t.rows()); ++r)
            for (int c = 0; c < static_cast<int>(t.cols()); ++c)
                if (t(r, c) > 0 && std::hypot(r - cell.center_row, c - cell.center_col) < cell.radius_px) {
                    r0 = std::min(r0, r), r1 = std::max(r1, r), c0 = std::min(c0, c), c1 = std::max(c1, c);
                }
        EXPECT_EQ(cell.box, (Box{r0, c0, r1 - r0 + 1, c1 - c0 + 1}));
    }
}

TEST(Subject, Deterministic) {
    SubjectSpec s;
    s.cell_count = 4;
    s.seed = 1234;
    s.fringe.noise_sigma = 1.0;
    const auto a = make_subject(s);
    const auto b = make_subject(s);
    for (std::size_t ch = 0; ch < 3; ++ch) {
        EXPECT_EQ(a.frames[ch].pixels, b.frames[ch].pixels);
        EXPECT_EQ(a.truths[ch].values_rad, b.truths[ch].values_rad);
    }
}

TEST(Subject, RedBlueRatioIsExact) {
    for (auto cls : kAllClasses) {
        SubjectSpec s;
        s.class_label = cls;
        s.cell_count = 2;
        s.seed = 8;
        const auto sc = make_subject(s);
        const double want = dispersion_ratio_red_blue(cls);
        std::size_t n = 0;
        for (std::size_t i = 0; i < sc.truths[0].values_rad.size(); ++i) {
            const double red = sc.truths[0].values_rad[i], blue = sc.truths[2].values_rad[i];
            if (blue == 0) continue;
            ASSERT_NEAR(red / blue, want, 1e-12 * want);
            ++n;
        }
        EXPECT_GT(n, 1000u);
    }
}

TEST(Subject, ImpossiblePlacement) {
    SubjectSpec s;
    s.rows = s.cols = 128;
    s.cell_count = 20;
    EXPECT_THROW(make_subject(s), PlacementError);
}

TEST(Subject, WavelengthsAndSubjectId) {
    SubjectSpec s;
    s.subject_id = "E07";
    s.cell_count = 1;
    s.rows = s.cols = 128;
    const auto sc = make_subject(s);
    EXPECT_DOUBLE_EQ(sc.frames[0].wavelength_um, 0.632);
    EXPECT_DOUBLE_EQ(sc.frames[1].wavelength_um, 0.532);
    EXPECT_DOUBLE_EQ(sc.frames[2].wavelength_um, 0.460);
    EXPECT_EQ(sc.frames[2].subject_id, "E07");
}
