#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "qpi/forward_model.hpp"
#include "qpi/patch_extraction.hpp"
#include "qpi/phase_retrieval.hpp"

using namespace qpi;
using namespace qpi::patches;

namespace {

MaskGrid disks(std::size_t rows, std::size_t cols, const std::vector<std::array<double, 3>>& d) {
    MaskGrid m(rows, cols, 0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            for (const auto& [cr, cc, rad] : d)
                if (std::hypot(r - cr, c - cc) <= rad) m(r, c) = 1;
    return m;
}

Component only_component(const MaskGrid& m) {
    auto comps = label_components(m);
    EXPECT_EQ(comps.size(), 1u);
    return comps.at(0);
}

bool holds(const Component& comp, std::size_t cols, double r, double c) {
    const std::size_t p = static_cast<std::size_t>(std::lround(r)) * cols + static_cast<std::size_t>(std::lround(c));
    return std::binary_search(comp.pixels.begin(), comp.pixels.end(), p);
}

Component sized(std::size_t area) {
    Component c;
    for (std::size_t i = 0; i < area; ++i) c.pixels.push_back(i);
    return c;
}

// brute force entropy with edge replication
double naive_entropy(const RealGrid& g, int r, int c, int n, int bins) {
    const auto [lo, hi] = std::minmax_element(g.storage().begin(), g.storage().end());
    std::vector<int> h(bins, 0);
    const int rows = static_cast<int>(g.rows()), cols = static_cast<int>(g.cols());
    for (int dr = -n / 2; dr <= n / 2; ++dr)
        for (int dc = -n / 2; dc <= n / 2; ++dc) {
            const double v = g(std::clamp(r + dr, 0, rows - 1), std::clamp(c + dc, 0, cols - 1));
            ++h[std::min(bins - 1, static_cast<int>((v - *lo) * bins / (*hi - *lo)))];
        }
    return histogram_entropy(h, n * n);
}

}  // namespace

TEST(Entropy, HistogramArithmetic) {
    EXPECT_NEAR(histogram_entropy({5, 5}, 10), 0.6931471805599453, 1e-15);
    EXPECT_NEAR(histogram_entropy({3, 3, 3, 3}, 12), 1.3862943611198906, 1e-15);
    EXPECT_GT(histogram_entropy({3, 3, 3, 3}, 12), 1.0);
    EXPECT_EQ(histogram_entropy({7, 0, 0}, 7), 0.0);
    EXPECT_NEAR(histogram_entropy({1, 1}, 2, 2.0), 1.0, 1e-15);
}

TEST(Entropy, ConstantRegionIsZero) {
    RealGrid g(40, 40, 0.0);
    for (std::size_t r = 0; r < 40; ++r) g(r, 39) = 1.0;  // non-degenerate range
    const auto em = entropy_map(PhaseMap{g, false, 0.632}, 9, 256);
    for (std::size_t r = 0; r < 40; ++r)
        for (std::size_t c = 0; c < 30; ++c) EXPECT_EQ(em.values(r, c), 0.0);
}

TEST(Entropy, DegenerateRangeIsAllZero) {
    const auto em = entropy_map(PhaseMap{RealGrid(20, 20, 3.0), false, 0.632});
    for (double v : em.values.storage()) EXPECT_EQ(v, 0.0);
}

TEST(Entropy, MatchesBruteForceAndStaysBounded) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd(0, 1);
    RealGrid g(37, 41);
    for (double& v : g.storage()) v = nd(rng);
    for (int bins : {2, 16, 256}) {
        const auto em = entropy_map(PhaseMap{g, false, 0.632}, 7, bins);
        for (int r = 0; r < 37; ++r)
            for (int c = 0; c < 41; ++c) {
                const double v = em.values(r, c);
                ASSERT_NEAR(v, naive_entropy(g, r, c, 7, bins), 1e-12);
                ASSERT_GE(v, 0.0);
                ASSERT_LE(v, std::log(bins) + 1e-12);
            }
    }
}

TEST(Entropy, RejectsBadWindowOrBins) {
    const PhaseMap p{RealGrid(20, 20, 0.0), false, 0.632};
    EXPECT_THROW(entropy_map(p, 8), DomainError);
    EXPECT_THROW(entropy_map(p, 1), DomainError);
    EXPECT_THROW(entropy_map(p, 21), DomainError);
    EXPECT_THROW(entropy_map(p, 9, 1), DomainError);
}

TEST(Segment, EmptyMapHasNoComponents) {
    EntropyMap em{RealGrid(30, 30, 0.0)};
    EXPECT_TRUE(segment_cells(em).components.empty());
    EXPECT_THROW(segment_cells(em, 0.0), DomainError);
}

TEST(Segment, EightConnectivity) {
    MaskGrid m(5, 5, 0);
    m(0, 0) = m(1, 1) = m(2, 2) = 1;
    m(4, 0) = 1;
    const auto comps = label_components(m);
    ASSERT_EQ(comps.size(), 2u);
    EXPECT_EQ(comps[0].area(), 3u);
    EXPECT_EQ(comps[0].bbox, (Box{0, 0, 3, 3}));
}

TEST(Artifacts, AreaBoundary) {
    auto out = reject_artifacts({sized(1599), sized(1600), sized(5000)});
    ASSERT_EQ(out.size(), 2u);
    EXPECT_EQ(out[0].area(), 1600u);
    EXPECT_TRUE(reject_artifacts({}).empty());
}

TEST(Artifacts, Monotone) {
    std::vector<Component> comps;
    for (std::size_t a : {10, 900, 1599, 1600, 1601, 2500, 4000}) comps.push_back(sized(a));
    std::size_t prev = comps.size();
    for (std::size_t t = 0; t < 5000; t += 100) {
        const auto n = reject_artifacts(comps, t).size();
        EXPECT_LE(n, prev);
        prev = n;
    }
}

TEST(Split, SingleDiskUnchanged) {
    const auto comp = only_component(disks(100, 100, {{50, 50, 28}}));
    const auto parts = split_touching(comp, 100, 100);
    ASSERT_EQ(parts.size(), 1u);
    EXPECT_EQ(parts[0].pixels, comp.pixels);
    EXPECT_EQ(classify_overlap(parts, 2463), OverlapClass::Separable);
}

TEST(Split, TwoOverlappingDisks) {
    const double R = 28;
    const auto comp = only_component(disks(120, 160, {{60, 50, R}, {60, 50 + 1.5 * R, R}}));
    const auto parts = split_touching(comp, 120, 160);
    ASSERT_EQ(parts.size(), 2u);
    for (const auto& centre : {std::array<double, 2>{60, 50}, std::array<double, 2>{60, 50 + 1.5 * R}}) {
        int n = 0;
        for (const auto& p : parts) n += holds(p, 160, centre[0], centre[1]);
        EXPECT_EQ(n, 1);
    }
}

TEST(Split, ThreeDiskDumbbell) {
    const double R = 25;
    const auto comp = only_component(disks(100, 220, {{50, 40, R}, {50, 40 + 1.6 * R, R}, {50, 40 + 3.2 * R, R}}));
    EXPECT_EQ(split_touching(comp, 100, 220).size(), 3u);
}

TEST(Split, PartsPartitionTheInput) {
    const auto comp = only_component(disks(120, 200, {{60, 45, 30}, {55, 95, 26}, {70, 140, 28}}));
    const auto parts = split_touching(comp, 120, 200);
    std::vector<std::size_t> all;
    for (const auto& p : parts) all.insert(all.end(), p.pixels.begin(), p.pixels.end());
    std::sort(all.begin(), all.end());
    EXPECT_EQ(all, comp.pixels);
}

TEST(Overlap, BarelyTouchingDisksAreSeparable) {
    const double R = 28;
    const auto comp = only_component(disks(100, 180, {{50, 40, R}, {50, 40 + 2 * R, R}}));
    const auto parts = split_touching(comp, 100, 180);
    EXPECT_EQ(parts.size(), 2u);
    EXPECT_EQ(classify_overlap(parts, std::numbers::pi * R * R), OverlapClass::Separable);
}

TEST(Overlap, TinyFragmentMarksParentOverlapping) {
    EXPECT_EQ(classify_overlap({sized(2400), sized(500)}, 2400), OverlapClass::Overlapping);
    EXPECT_EQ(classify_overlap({sized(2400), sized(1200)}, 2400), OverlapClass::Separable);
    EXPECT_EQ(classify_overlap({sized(100)}, 2400), OverlapClass::Separable);
}

TEST(Crop, ShapeAndBoxMargin) {
    RealGrid g(100, 100, 0.5);
    const PhaseMap p{g, false, 0.632};
    const auto comp = only_component(disks(100, 100, {{40, 50, 20}}));
    std::size_t skipped = 7;
    const auto out = crop_patches({comp, Component{}}, {&p, &p, &p}, &skipped);
    EXPECT_EQ(skipped, 1u);
    ASSERT_EQ(out.size(), 1u);
    EXPECT_TRUE(out[0].normalized);
    EXPECT_EQ(out[0].bbox, (Box{18, 28, 45, 45}));
    for (const auto& ch : out[0].channels) {
        EXPECT_EQ(ch.rows(), 60u);
        EXPECT_EQ(ch.cols(), 60u);
        for (double v : ch.storage()) EXPECT_DOUBLE_EQ(v, 0.5);
    }
}

TEST(Crop, MarginClampedAtImageEdge) {
    RealGrid g(50, 50, 0.0);
    const PhaseMap p{g, false, 0.632};
    MaskGrid m(50, 50, 0);
    for (std::size_t r = 0; r < 10; ++r)
        for (std::size_t c = 0; c < 10; ++c) m(r, c) = 1;
    const auto out = crop_patches(label_components(m), {&p, &p, &p});
    EXPECT_EQ(out[0].bbox, (Box{0, 0, 12, 12}));
}

TEST(Crop, ChannelShapesMustAgree) {
    const PhaseMap a{RealGrid(20, 20, 0.0), false, 0.632}, b{RealGrid(20, 21, 0.0), false, 0.46};
    EXPECT_THROW(crop_patches({}, {&a, &a, &b}), ShapeError);
}

TEST(Extract, FiveCellScenes) {
    retrieval::RetrievalConfig rc;
    rc.radius_fraction = 0.75;
    for (std::uint64_t seed : {1, 2, 3, 4}) {
        forward::SubjectSpec s;
        s.class_label = kAllClasses[seed % 3];
        s.cell_count = 5;
        s.seed = seed;
        s.fringe.carrier = forward::snap_carrier(forward::kDefaultCarrier, s.rows, s.cols);
        s.fringe.noise_sigma = forward::noise_sigma_for_snr(100, 0.8, 40);
        const auto sc = forward::make_subject(s);
        std::array<PhaseMap, 3> ph;
        for (std::size_t c = 0; c < 3; ++c) ph[c] = retrieval::retrieve(sc.frames[c], rc).phase;
        ExtractionStats st;
        const auto out = extract_patches({&ph[0], &ph[1], &ph[2]}, ExtractionConfig{}, &st);
        ASSERT_EQ(out.size(), 5u) << "seed " << seed;
        for (const auto& cell : sc.cells) {
            int n = 0;
            for (const auto& p : out) n += p.bbox.contains(cell.center_row, cell.center_col);
            EXPECT_EQ(n, 1);
            // bbox tracks the true disc within the margin plus the entropy halo
            bool near = false;
            for (const auto& p : out)
                near |= p.bbox.contains(cell.box) && p.bbox.height <= cell.box.height + 2 * 2 + 10;
            EXPECT_TRUE(near);
        }
    }
}
