#ifndef QPI_PATCH_EXTRACTION_HPP
#define QPI_PATCH_EXTRACTION_HPP

// Single-cell patch extraction from unwrapped phase maps: local-entropy map,
// threshold, small-artifact rejection, touching-cell separation, overlap
// exclusion, and bounding-box cropping to fixed-size 3-channel patches.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <queue>
#include <string>
#include <vector>

#include "qpi/error.hpp"
#include "qpi/forward_model.hpp"
#include "qpi/grid.hpp"

namespace qpi::patches {

inline constexpr std::size_t kPatchSide = 60;
inline constexpr double kDefaultEntropyThreshold = 1.0;
inline constexpr std::size_t kDefaultMinArea = 40 * 40;
inline constexpr int kDefaultWindow = 9;
// At 256 bins retrieval noise alone pushes flat background to ~1.0 on healthy scenes.
inline constexpr int kDefaultBins = 64;

struct EntropyMap {
    RealGrid values;
    int window_px = kDefaultWindow;
    int bin_count = kDefaultBins;
};

/// -sum p_i log p_i over non-empty bins, p_i = count_i / total. `log_base` 0 means natural log.
inline double histogram_entropy(const std::vector<int>& counts, int total, double log_base = 0.0) {
    double h = 0.0;
    for (int f : counts) {
        if (f <= 0) continue;
        const double p = static_cast<double>(f) / static_cast<double>(total);
        h -= p * std::log(p);
    }
    if (log_base > 0.0) h /= std::log(log_base);
    return h == 0.0 ? 0.0 : h;
}

/// Local Shannon entropy of an n x n neighbourhood. Values are quantised into
/// `bins` uniform bins spanning the global phase range; borders replicate edges.
inline EntropyMap entropy_map(const PhaseMap& phase, int window = kDefaultWindow, int bins = kDefaultBins,
                              double log_base = 0.0) {
    const RealGrid& g = phase.values_rad;
    const auto rows = static_cast<int>(g.rows()), cols = static_cast<int>(g.cols());
    if (window < 3 || window % 2 == 0 || window > std::min(rows, cols))
        throw DomainError("entropy window must be odd and within [3, min(rows, cols)]");
    if (bins < 2) throw DomainError("entropy bin count must be >= 2");

    EntropyMap em{RealGrid(g.rows(), g.cols(), 0.0), window, bins};
    const auto [lo_it, hi_it] = std::minmax_element(g.storage().begin(), g.storage().end());
    const double lo = *lo_it, hi = *hi_it;
    if (!(hi > lo)) return em;

    Grid<int> bin(g.rows(), g.cols());
    const double scale = static_cast<double>(bins) / (hi - lo);
    for (std::size_t i = 0; i < g.size(); ++i)
        bin[i] = std::min(bins - 1, static_cast<int>((g[i] - lo) * scale));

    // p log p for every possible count, shared by all windows.
    const int total = window * window;
    std::vector<double> plogp(static_cast<std::size_t>(total) + 1, 0.0);
    for (int f = 1; f <= total; ++f) {
        const double p = static_cast<double>(f) / total;
        plogp[static_cast<std::size_t>(f)] = p * std::log(p);
    }
    const double base_div = log_base > 0.0 ? std::log(log_base) : 1.0;

    // Sliding histogram along each row.
    const int half = window / 2;
    std::vector<int> hist(static_cast<std::size_t>(bins), 0);
    auto clamp_r = [&](int r) { return std::clamp(r, 0, rows - 1); };
    auto clamp_c = [&](int c) { return std::clamp(c, 0, cols - 1); };
    for (int r = 0; r < rows; ++r) {
        std::fill(hist.begin(), hist.end(), 0);
        double acc = 0.0;  // sum of f log(f/n^2)/n^2 over bins
        auto bump = [&](int b, int delta) {
            auto& f = hist[static_cast<std::size_t>(b)];
            acc -= plogp[static_cast<std::size_t>(f)];
            f += delta;
            acc += plogp[static_cast<std::size_t>(f)];
        };
        for (int dr = -half; dr <= half; ++dr)
            for (int dc = -half; dc <= half; ++dc)
                bump(bin(static_cast<std::size_t>(clamp_r(r + dr)), static_cast<std::size_t>(clamp_c(dc))), 1);
        for (int c = 0; c < cols; ++c) {
            if (c > 0) {
                const int out_c = clamp_c(c - half - 1), in_c = clamp_c(c + half);
                for (int dr = -half; dr <= half; ++dr) {
                    const auto rr = static_cast<std::size_t>(clamp_r(r + dr));
                    bump(bin(rr, static_cast<std::size_t>(out_c)), -1);
                    bump(bin(rr, static_cast<std::size_t>(in_c)), 1);
                }
            }
            const double h = -acc / base_div;
            em.values(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = h > 0.0 ? h : 0.0;
        }
    }
    return em;
}

struct Component {
    std::vector<std::size_t> pixels;  // flat indices, ascending
    Box bbox;
    std::size_t area() const noexcept { return pixels.size(); }
};

struct Segmentation {
    MaskGrid mask;
    std::vector<Component> components;
};

namespace detail {

inline Box bbox_of(const std::vector<std::size_t>& px, std::size_t cols) {
    if (px.empty()) return {};
    int r0 = std::numeric_limits<int>::max(), r1 = -1, c0 = std::numeric_limits<int>::max(), c1 = -1;
    for (std::size_t p : px) {
        const int r = static_cast<int>(p / cols), c = static_cast<int>(p % cols);
        r0 = std::min(r0, r);
        r1 = std::max(r1, r);
        c0 = std::min(c0, c);
        c1 = std::max(c1, c);
    }
    return Box{r0, c0, r1 - r0 + 1, c1 - c0 + 1};
}

}  // namespace detail

/// 8-connected component labelling of a binary mask, in raster order of first pixel.
inline std::vector<Component> label_components(const MaskGrid& mask) {
    const std::size_t rows = mask.rows(), cols = mask.cols();
    Grid<int> label(rows, cols, -1);
    std::vector<Component> out;
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < mask.size(); ++start) {
        if (!mask[start] || label[start] >= 0) continue;
        const int id = static_cast<int>(out.size());
        Component comp;
        stack.assign(1, start);
        label[start] = id;
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            comp.pixels.push_back(p);
            const long r = static_cast<long>(p / cols), c = static_cast<long>(p % cols);
            for (long dr = -1; dr <= 1; ++dr)
                for (long dc = -1; dc <= 1; ++dc) {
                    const long rr = r + dr, cc = c + dc;
                    if (rr < 0 || cc < 0 || rr >= static_cast<long>(rows) || cc >= static_cast<long>(cols)) continue;
                    const std::size_t q = static_cast<std::size_t>(rr) * cols + static_cast<std::size_t>(cc);
                    if (mask[q] && label[q] < 0) {
                        label[q] = id;
                        stack.push_back(q);
                    }
                }
        }
        std::sort(comp.pixels.begin(), comp.pixels.end());
        comp.bbox = detail::bbox_of(comp.pixels, cols);
        out.push_back(std::move(comp));
    }
    return out;
}

/// mask = entropy >= threshold, then 8-connected components.
inline Segmentation segment_cells(const EntropyMap& em, double threshold = kDefaultEntropyThreshold) {
    if (!(threshold > 0.0)) throw DomainError("entropy threshold must be > 0");
    Segmentation seg;
    seg.mask = MaskGrid(em.values.rows(), em.values.cols(), 0);
    for (std::size_t i = 0; i < em.values.size(); ++i) seg.mask[i] = em.values[i] >= threshold ? 1 : 0;
    seg.components = label_components(seg.mask);
    return seg;
}

/// Drops components smaller than `min_area` pixels.
inline std::vector<Component> reject_artifacts(std::vector<Component> comps, std::size_t min_area = kDefaultMinArea) {
    std::erase_if(comps, [&](const Component& c) { return c.area() < min_area; });
    return comps;
}

/// Exact squared Euclidean distance transform (Felzenszwalb-Huttenlocher) of
/// `inside`: distance from each inside pixel to the nearest outside pixel,
/// where everything beyond the grid counts as outside.
inline RealGrid distance_transform(const MaskGrid& inside) {
    const std::size_t rows = inside.rows() + 2, cols = inside.cols() + 2;
    constexpr double inf = 1e20;
    RealGrid f(rows, cols, 0.0);
    for (std::size_t r = 0; r < inside.rows(); ++r)
        for (std::size_t c = 0; c < inside.cols(); ++c) f(r + 1, c + 1) = inside(r, c) ? inf : 0.0;

    auto pass = [](std::vector<double>& v) {
        const std::size_t n = v.size();
        std::vector<double> d(n), z(n + 1);
        std::vector<std::size_t> hull(n);
        std::size_t k = 0;
        hull[0] = 0;
        z[0] = -inf;
        z[1] = inf;
        for (std::size_t q = 1; q < n; ++q) {
            const auto fq = static_cast<double>(q);
            double s;
            while (true) {
                const auto fv = static_cast<double>(hull[k]);
                s = ((v[q] + fq * fq) - (v[hull[k]] + fv * fv)) / (2.0 * fq - 2.0 * fv);
                if (s <= z[k] && k > 0) {
                    --k;
                    continue;
                }
                break;
            }
            ++k;
            hull[k] = q;
            z[k] = s;
            z[k + 1] = inf;
        }
        k = 0;
        for (std::size_t q = 0; q < n; ++q) {
            while (z[k + 1] < static_cast<double>(q)) ++k;
            const double dq = static_cast<double>(q) - static_cast<double>(hull[k]);
            d[q] = dq * dq + v[hull[k]];
        }
        v = std::move(d);
    };

    std::vector<double> buf;
    for (std::size_t c = 0; c < cols; ++c) {
        buf.resize(rows);
        for (std::size_t r = 0; r < rows; ++r) buf[r] = f(r, c);
        pass(buf);
        for (std::size_t r = 0; r < rows; ++r) f(r, c) = buf[r];
    }
    for (std::size_t r = 0; r < rows; ++r) {
        buf.assign(f.storage().begin() + static_cast<long>(r * cols), f.storage().begin() + static_cast<long>((r + 1) * cols));
        pass(buf);
        std::copy(buf.begin(), buf.end(), f.storage().begin() + static_cast<long>(r * cols));
    }
    RealGrid out(inside.rows(), inside.cols(), 0.0);
    for (std::size_t r = 0; r < inside.rows(); ++r)
        for (std::size_t c = 0; c < inside.cols(); ++c) out(r, c) = std::sqrt(f(r + 1, c + 1));
    return out;
}

/// Fills background holes of a mask (background regions not touching the border).
inline MaskGrid fill_holes(const MaskGrid& mask) {
    const std::size_t rows = mask.rows(), cols = mask.cols();
    MaskGrid outside(rows, cols, 0);
    std::vector<std::size_t> stack;
    auto push = [&](std::size_t r, std::size_t c) {
        const std::size_t i = r * cols + c;
        if (!mask[i] && !outside[i]) {
            outside[i] = 1;
            stack.push_back(i);
        }
    };
    for (std::size_t r = 0; r < rows; ++r) {
        push(r, 0);
        push(r, cols - 1);
    }
    for (std::size_t c = 0; c < cols; ++c) {
        push(0, c);
        push(rows - 1, c);
    }
    while (!stack.empty()) {
        const std::size_t p = stack.back();
        stack.pop_back();
        const std::size_t r = p / cols, c = p % cols;
        if (r > 0) push(r - 1, c);
        if (r + 1 < rows) push(r + 1, c);
        if (c > 0) push(r, c - 1);
        if (c + 1 < cols) push(r, c + 1);
    }
    MaskGrid out(rows, cols, 0);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = outside[i] ? 0 : 1;
    return out;
}

struct SplitOptions {
    double min_seed_separation_px = 10.0;
    double min_seed_distance_px = 8.0;  // seeds must lie at least this deep inside the mask
};

/// Separates touching cells. Seeds are 3x3 maxima of the distance transform at
/// least `min_seed_separation_px` apart; with two or more seeds every pixel is
/// assigned by a priority flood that descends the distance transform from the
/// seeds (marker-based region growing). Outputs partition the input exactly.
inline std::vector<Component> split_touching(const Component& comp, std::size_t /*image_rows*/, std::size_t image_cols,
                                             const SplitOptions& opt = {}) {
    if (comp.pixels.empty()) return {};
    const Box b = comp.bbox;
    // Local frame with a 1-px background margin.
    const std::size_t lr = static_cast<std::size_t>(b.height) + 2, lc = static_cast<std::size_t>(b.width) + 2;
    MaskGrid local(lr, lc, 0);
    auto to_local = [&](std::size_t p) {
        const std::size_t r = p / image_cols - static_cast<std::size_t>(b.row) + 1;
        const std::size_t c = p % image_cols - static_cast<std::size_t>(b.col) + 1;
        return r * lc + c;
    };
    for (std::size_t p : comp.pixels) local[to_local(p)] = 1;
    const RealGrid dist = distance_transform(fill_holes(local));

    struct Candidate {
        double d;
        std::size_t idx;
    };
    std::vector<Candidate> cands;
    for (std::size_t r = 1; r + 1 < lr; ++r)
        for (std::size_t c = 1; c + 1 < lc; ++c) {
            const double d = dist(r, c);
            if (!local(r, c) || d < opt.min_seed_distance_px) continue;
            bool is_max = true;
            for (int dr = -1; dr <= 1 && is_max; ++dr)
                for (int dc = -1; dc <= 1; ++dc)
                    if (dist(static_cast<std::size_t>(static_cast<long>(r) + dr),
                             static_cast<std::size_t>(static_cast<long>(c) + dc)) > d) {
                        is_max = false;
                        break;
                    }
            if (is_max) cands.push_back({d, r * lc + c});
        }
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& bb) { return a.d > bb.d; });
    std::vector<std::size_t> seeds;
    for (const auto& cand : cands) {
        const double r = static_cast<double>(cand.idx / lc), c = static_cast<double>(cand.idx % lc);
        const bool far = std::all_of(seeds.begin(), seeds.end(), [&](std::size_t s) {
            return std::hypot(static_cast<double>(s / lc) - r, static_cast<double>(s % lc) - c) >=
                   opt.min_seed_separation_px;
        });
        if (far) seeds.push_back(cand.idx);
    }
    if (seeds.size() < 2) return {comp};

    // Priority flood: deepest pixels first, FIFO among equal depths.
    Grid<int> owner(lr, lc, -1);
    struct Item {
        double d;
        std::uint64_t order;
        std::size_t idx;
        bool operator<(const Item& o) const { return d != o.d ? d < o.d : order > o.order; }
    };
    std::priority_queue<Item> pq;
    std::uint64_t counter = 0;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
        owner[seeds[s]] = static_cast<int>(s);
        pq.push({dist[seeds[s]], counter++, seeds[s]});
    }
    while (!pq.empty()) {
        const Item it = pq.top();
        pq.pop();
        const long r = static_cast<long>(it.idx / lc), c = static_cast<long>(it.idx % lc);
        for (long dr = -1; dr <= 1; ++dr)
            for (long dc = -1; dc <= 1; ++dc) {
                const std::size_t q = static_cast<std::size_t>(r + dr) * lc + static_cast<std::size_t>(c + dc);
                if (!local[q] || owner[q] >= 0) continue;
                owner[q] = owner[it.idx];
                pq.push({dist[q], counter++, q});
            }
    }

    std::vector<Component> parts(seeds.size());
    for (std::size_t p : comp.pixels) parts[static_cast<std::size_t>(owner[to_local(p)])].pixels.push_back(p);
    for (auto& part : parts) part.bbox = detail::bbox_of(part.pixels, image_cols);
    std::erase_if(parts, [](const Component& c) { return c.pixels.empty(); });
    return parts;
}

enum class OverlapClass { Separable, Overlapping };

/// A parent is Overlapping when it split and some fragment is smaller than
/// `fragment_fraction` of the median single-cell area.
inline OverlapClass classify_overlap(const std::vector<Component>& parts, double median_cell_area,
                                     double fragment_fraction = 0.5) {
    if (parts.size() < 2) return OverlapClass::Separable;
    for (const auto& p : parts)
        if (static_cast<double>(p.area()) < fragment_fraction * median_cell_area) return OverlapClass::Overlapping;
    return OverlapClass::Separable;
}

struct RbcPatch {
    std::array<RealGrid, 3> channels;  // red, green, blue phase (rad)
    ClassLabel label = ClassLabel::Unlabeled;
    std::string subject_id;
    Box bbox;
    bool normalized = false;
};

/// Tight bounding box, 2-px margin clamped to the image, identical crop of all
/// three channels, bilinear resample to side x side.
inline std::vector<RbcPatch> crop_patches(const std::vector<Component>& comps, const std::array<const PhaseMap*, 3>& phases,
                                          std::size_t* skipped = nullptr, int margin = 2,
                                          std::size_t side = kPatchSide) {
    for (const auto* p : phases)
        if (p == nullptr || !p->values_rad.same_shape(phases[0]->values_rad))
            throw ShapeError("channel phase maps must share one shape");
    const int rows = static_cast<int>(phases[0]->values_rad.rows());
    const int cols = static_cast<int>(phases[0]->values_rad.cols());
    std::vector<RbcPatch> out;
    std::size_t skip = 0;
    for (const auto& comp : comps) {
        if (comp.pixels.empty()) {
            ++skip;
            continue;
        }
        const Box tight = detail::bbox_of(comp.pixels, static_cast<std::size_t>(cols));
        const int r0 = std::max(0, tight.row - margin), c0 = std::max(0, tight.col - margin);
        const int r1 = std::min(rows, tight.bottom() + margin), c1 = std::min(cols, tight.right() + margin);
        RbcPatch patch;
        patch.bbox = Box{r0, c0, r1 - r0, c1 - c0};
        for (std::size_t ch = 0; ch < 3; ++ch)
            patch.channels[ch] = resize_bilinear(crop(phases[ch]->values_rad, patch.bbox), side, side);
        patch.normalized = side == kPatchSide;
        out.push_back(std::move(patch));
    }
    if (skipped) *skipped = skip;
    return out;
}

struct ExtractionConfig {
    int window_px = kDefaultWindow;
    int bins = kDefaultBins;
    double log_base = 0.0;
    double entropy_threshold = kDefaultEntropyThreshold;
    std::size_t min_area = kDefaultMinArea;
    double median_cell_area = std::numbers::pi * std::pow(4.0 / forward::kSamplePixelUm, 2);
    SplitOptions split{};
    Channel segmentation_channel = Channel::Red;
};

struct ExtractionStats {
    std::size_t components = 0;
    std::size_t rejected_small = 0;
    std::size_t overlapping = 0;
    std::size_t skipped_empty = 0;
};

/// Entropy map on one channel -> threshold -> area filter -> split -> overlap
/// exclusion -> crop. Splitting precedes exclusion.
inline std::vector<RbcPatch> extract_patches(const std::array<const PhaseMap*, 3>& phases, const ExtractionConfig& cfg,
                                             ExtractionStats* stats = nullptr) {
    const PhaseMap& seg_phase = *phases[static_cast<std::size_t>(cfg.segmentation_channel)];
    const auto em = entropy_map(seg_phase, cfg.window_px, cfg.bins, cfg.log_base);
    const auto seg = segment_cells(em, cfg.entropy_threshold);
    ExtractionStats st;
    st.components = seg.components.size();
    auto kept = reject_artifacts(seg.components, cfg.min_area);
    st.rejected_small = st.components - kept.size();
    std::vector<Component> cells;
    const std::size_t rows = seg_phase.values_rad.rows(), cols = seg_phase.values_rad.cols();
    for (const auto& comp : kept) {
        auto parts = split_touching(comp, rows, cols, cfg.split);
        if (classify_overlap(parts, cfg.median_cell_area) == OverlapClass::Overlapping) {
            ++st.overlapping;
            continue;
        }
        for (auto& p : parts) cells.push_back(std::move(p));
    }
    auto out = crop_patches(cells, phases, &st.skipped_empty);
    if (stats) *stats = st;
    return out;
}

}  // namespace qpi::patches

#endif  // QPI_PATCH_EXTRACTION_HPP
