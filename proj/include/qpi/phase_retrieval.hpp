#ifndef QPI_PHASE_RETRIEVAL_HPP
#define QPI_PHASE_RETRIEVAL_HPP

// Single-shot phase retrieval: Fourier fringe analysis of an off-axis
// interferogram followed by Goldstein branch-cut unwrapping.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <numbers>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "qpi/error.hpp"
#include "qpi/fft.hpp"
#include "qpi/forward_model.hpp"
#include "qpi/grid.hpp"

namespace qpi::retrieval {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// Wraps into (-pi, pi].
inline double wrap(double x) {
    double w = std::remainder(x, kTwoPi);
    if (w <= -kPi) w += kTwoPi;
    return w;
}

struct ComplexField {
    RealGrid re;
    RealGrid im;
};

/// Circular band-pass around one first order; bins are signed (row, col).
struct FilterSpec {
    long center_row_bin = 0;
    long center_col_bin = 0;
    double radius_bins = 0.0;
};

/// Locates the strongest non-DC spectral peak. Of the conjugate pair the one
/// pointing along `hint` (or with positive column frequency) is returned.
inline std::array<long, 2> detect_carrier_bin(const ComplexGrid& spectrum, std::optional<Carrier> hint = {}) {
    const std::size_t rows = spectrum.rows(), cols = spectrum.cols();
    const double dc_exclusion = std::max(3.0, 0.02 * static_cast<double>(std::min(rows, cols)));
    double best = -1.0;
    long br = 0, bc = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        const long sr = signed_bin(r, rows);
        for (std::size_t c = 0; c < cols; ++c) {
            const long sc = signed_bin(c, cols);
            if (std::hypot(static_cast<double>(sr), static_cast<double>(sc)) <= dc_exclusion) continue;
            const double mag = std::norm(spectrum(r, c));
            if (mag > best) {
                best = mag;
                br = sr;
                bc = sc;
            }
        }
    }
    bool flip;
    if (hint && (hint->fx != 0.0 || hint->fy != 0.0)) {
        flip = (static_cast<double>(bc) * hint->fx + static_cast<double>(br) * hint->fy) < 0.0;
    } else {
        flip = bc < 0 || (bc == 0 && br < 0);
    }
    if (flip) {
        br = -br;
        bc = -bc;
    }
    return {br, bc};
}

/// Default filter: centred on the detected +1 order, radius a fraction (default half) of its distance to DC.
inline FilterSpec auto_filter(const ComplexGrid& spectrum, std::optional<Carrier> hint = {},
                              double radius_fraction = 0.5) {
    if (!(radius_fraction > 0.0 && radius_fraction < 1.0)) throw DomainError("radius fraction must be in (0,1)");
    const auto [r, c] = detect_carrier_bin(spectrum, hint);
    return FilterSpec{r, c, radius_fraction * std::hypot(static_cast<double>(r), static_cast<double>(c))};
}

inline void validate_filter(const FilterSpec& f, std::size_t rows, std::size_t cols) {
    if (!(f.radius_bins >= 2.0)) throw DomainError("filter radius must be >= 2 bins");
    const double dist = std::hypot(static_cast<double>(f.center_row_bin), static_cast<double>(f.center_col_bin));
    if (dist <= f.radius_bins)
        throw OrderOverlapError("filter circle reaches the DC bin (centre distance " + std::to_string(dist) +
                                ", radius " + std::to_string(f.radius_bins) + ")");
    const double half_r = static_cast<double>(rows) / 2.0;
    const double half_c = static_cast<double>(cols) / 2.0;
    if (std::abs(static_cast<double>(f.center_row_bin)) + f.radius_bins > half_r ||
        std::abs(static_cast<double>(f.center_col_bin)) + f.radius_bins > half_c)
        throw BoundsError("filter circle extends past the Nyquist limit");
}

inline void apply_hann(RealGrid& g) {
    const double nr = static_cast<double>(g.rows()), nc = static_cast<double>(g.cols());
    for (std::size_t r = 0; r < g.rows(); ++r) {
        const double wr = 0.5 - 0.5 * std::cos(kTwoPi * (static_cast<double>(r) + 0.5) / nr);
        for (std::size_t c = 0; c < g.cols(); ++c)
            g(r, c) *= wr * (0.5 - 0.5 * std::cos(kTwoPi * (static_cast<double>(c) + 0.5) / nc));
    }
}

/// Isolates one first order from a spectrum and shifts it to DC.
inline ComplexField filter_order(const ComplexGrid& spectrum, const FilterSpec& filter) {
    const std::size_t rows = spectrum.rows(), cols = spectrum.cols();
    validate_filter(filter, rows, cols);
    ComplexGrid shifted(rows, cols, std::complex<double>{});
    const double r2 = filter.radius_bins * filter.radius_bins;
    const long reach = static_cast<long>(std::ceil(filter.radius_bins));
    for (long dr = -reach; dr <= reach; ++dr) {
        for (long dc = -reach; dc <= reach; ++dc) {
            if (static_cast<double>(dr * dr + dc * dc) > r2) continue;
            const std::size_t src_r = storage_bin(filter.center_row_bin + dr, rows);
            const std::size_t src_c = storage_bin(filter.center_col_bin + dc, cols);
            shifted(storage_bin(dr, rows), storage_bin(dc, cols)) = spectrum(src_r, src_c);
        }
    }
    ifft2d_inplace(shifted);
    ComplexField out{RealGrid(rows, cols), RealGrid(rows, cols)};
    for (std::size_t i = 0; i < shifted.size(); ++i) {
        out.re[i] = shifted[i].real();
        out.im[i] = shifted[i].imag();
    }
    return out;
}

/// 2D FFT, circular mask on one first order, shift to DC, inverse FFT.
inline ComplexField extract_complex_field(const Interferogram& frame, const FilterSpec& filter,
                                          bool hann_window = false) {
    RealGrid px = frame.pixels;
    if (hann_window) apply_hann(px);
    return filter_order(fft2d(px), filter);
}

inline RealGrid amplitude(const ComplexField& f) {
    RealGrid a(f.re.rows(), f.re.cols());
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::hypot(f.re[i], f.im[i]);
    return a;
}

/// Per-pixel atan2(im, re) in (-pi, pi].
inline PhaseMap wrapped_phase(const ComplexField& f, double wavelength_um = coherence::kRedWavelengthUm) {
    if (!f.re.same_shape(f.im)) throw ShapeError("re/im shape mismatch");
    const bool degenerate = std::all_of(f.re.storage().begin(), f.re.storage().end(), [](double v) { return v == 0.0; }) &&
                            std::all_of(f.im.storage().begin(), f.im.storage().end(), [](double v) { return v == 0.0; });
    if (degenerate || f.re.empty()) throw DegenerateFieldError("complex field is identically zero");
    RealGrid phase(f.re.rows(), f.re.cols());
    for (std::size_t i = 0; i < phase.size(); ++i) {
        double p = std::atan2(f.im[i], f.re[i]);
        if (p <= -kPi) p = kPi;
        phase[i] = p;
    }
    return PhaseMap{std::move(phase), true, wavelength_um};
}

struct Residue {
    int row = 0;  // top-left pixel of the 2x2 plaquette
    int col = 0;
    int charge = 0;  // +1 or -1
    bool operator==(const Residue&) const = default;
};

/// Residue charge of the plaquette with top-left corner (r, c); the loop runs
/// (r,c) -> (r,c+1) -> (r+1,c+1) -> (r+1,c) -> (r,c).
inline int plaquette_charge(const RealGrid& w, std::size_t r, std::size_t c) {
    const double s = wrap(w(r, c + 1) - w(r, c)) + wrap(w(r + 1, c + 1) - w(r, c + 1)) +
                     wrap(w(r + 1, c) - w(r + 1, c + 1)) + wrap(w(r, c) - w(r + 1, c));
    return static_cast<int>(std::lround(s / kTwoPi));
}

inline std::vector<Residue> find_residues(const PhaseMap& wrapped) {
    if (!wrapped.wrapped) throw ContractError("find_residues expects a wrapped phase map");
    const RealGrid& w = wrapped.values_rad;
    std::vector<Residue> out;
    if (w.rows() < 2 || w.cols() < 2) return out;
    for (std::size_t r = 0; r + 1 < w.rows(); ++r)
        for (std::size_t c = 0; c + 1 < w.cols(); ++c)
            if (const int q = plaquette_charge(w, r, c); q != 0)
                out.push_back({static_cast<int>(r), static_cast<int>(c), q > 0 ? 1 : -1});
    return out;
}

struct UnwrapResult {
    PhaseMap phase;
    MaskGrid cuts;     // 1 on branch-cut pixels
    MaskGrid quality;  // 1 where reached by the cut-respecting flood fill
    std::size_t residue_count = 0;
    std::array<int, 2> seed{0, 0};
};

namespace detail {

inline void draw_cut(MaskGrid& cuts, int r0, int c0, int r1, int c1) {
    const int dr = std::abs(r1 - r0), dc = std::abs(c1 - c0);
    const int sr = r0 < r1 ? 1 : -1, sc = c0 < c1 ? 1 : -1;
    int err = dc - dr;
    int r = r0, c = c0;
    while (true) {
        cuts(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = 1;
        if (r == r1 && c == c1) break;
        const int e2 = 2 * err;
        if (e2 > -dr) {
            err -= dr;
            c += sc;
        }
        if (e2 < dc) {
            err += dc;
            r += sr;
        }
    }
}

inline void cut_to_border(MaskGrid& cuts, int r, int c) {
    const int rows = static_cast<int>(cuts.rows()), cols = static_cast<int>(cuts.cols());
    const int up = r, down = rows - 1 - r, left = c, right = cols - 1 - c;
    const int m = std::min({up, down, left, right});
    if (m == up) draw_cut(cuts, r, c, 0, c);
    else if (m == down) draw_cut(cuts, r, c, rows - 1, c);
    else if (m == left) draw_cut(cuts, r, c, r, 0);
    else draw_cut(cuts, r, c, r, cols - 1);
}

}  // namespace detail

/// Goldstein branch cuts: residues are joined into charge-neutral trees, or to
/// the border, by a box search whose size grows 3, 5, 7, ...; scanning is in
/// raster order so ties resolve lexicographically.
inline MaskGrid goldstein_branch_cuts(const std::vector<Residue>& residues, std::size_t rows, std::size_t cols) {
    MaskGrid cuts(rows, cols, 0);
    if (residues.empty()) return cuts;
    Grid<std::int8_t> charge(rows, cols, 0);
    for (const auto& r : residues) charge(static_cast<std::size_t>(r.row), static_cast<std::size_t>(r.col)) = static_cast<std::int8_t>(r.charge);
    MaskGrid balanced(rows, cols, 0), active(rows, cols, 0);
    const int nr = static_cast<int>(rows), nc = static_cast<int>(cols);
    const int max_box = 2 * std::max(nr, nc) + 1;

    for (const auto& start : residues) {
        const auto si = static_cast<std::size_t>(start.row), sj = static_cast<std::size_t>(start.col);
        if (balanced(si, sj)) continue;
        balanced(si, sj) = 1;
        active(si, sj) = 1;
        int net = start.charge;
        std::vector<std::array<int, 2>> tree{{start.row, start.col}};
        for (int box = 3; box <= max_box && net != 0; box += 2) {
            const int half = box / 2;
            for (std::size_t k = 0; k < tree.size() && net != 0; ++k) {
                const auto [ri, ci] = tree[k];
                for (int m = ri - half; m <= ri + half && net != 0; ++m) {
                    for (int n = ci - half; n <= ci + half && net != 0; ++n) {
                        if (m <= 0 || m >= nr - 1 || n <= 0 || n >= nc - 1) {
                            detail::cut_to_border(cuts, ri, ci);
                            net = 0;
                            break;
                        }
                        const auto um = static_cast<std::size_t>(m), un = static_cast<std::size_t>(n);
                        if (charge(um, un) != 0 && !active(um, un)) {
                            if (!balanced(um, un)) {
                                net += charge(um, un);
                                balanced(um, un) = 1;
                            }
                            active(um, un) = 1;
                            tree.push_back({m, n});
                            detail::draw_cut(cuts, ri, ci, m, n);
                        }
                    }
                }
            }
        }
        if (net != 0) detail::cut_to_border(cuts, start.row, start.col);
        for (const auto& [r, c] : tree) active(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = 0;
    }
    return cuts;
}

/// Goldstein unwrapping. The result is defined up to a global constant; on
/// residue-free inputs it equals the true phase plus a multiple of 2 pi.
/// `amplitude`, when given, picks the integration seed.
inline UnwrapResult goldstein_unwrap(const PhaseMap& wrapped, const RealGrid* amplitude_map = nullptr) {
    if (!wrapped.wrapped) throw ContractError("goldstein_unwrap expects a wrapped phase map");
    const RealGrid& w = wrapped.values_rad;
    const std::size_t rows = w.rows(), cols = w.cols();
    if (rows == 0 || cols == 0) throw ShapeError("empty phase map");
    if (amplitude_map && !amplitude_map->same_shape(w)) throw ShapeError("amplitude/phase shape mismatch");

    const auto residues = find_residues(wrapped);
    UnwrapResult res;
    res.residue_count = residues.size();
    res.cuts = goldstein_branch_cuts(residues, rows, cols);
    const MaskGrid& cuts = res.cuts;

    auto near_cut = [&](std::size_t r, std::size_t c) {
        for (long dr = -1; dr <= 1; ++dr)
            for (long dc = -1; dc <= 1; ++dc) {
                const long rr = static_cast<long>(r) + dr, cc = static_cast<long>(c) + dc;
                if (rr < 0 || cc < 0 || rr >= static_cast<long>(rows) || cc >= static_cast<long>(cols)) continue;
                if (cuts(static_cast<std::size_t>(rr), static_cast<std::size_t>(cc))) return true;
            }
        return false;
    };

    std::optional<std::size_t> seed;
    double best = -1.0;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
            if (near_cut(r, c)) continue;
            const double a = amplitude_map ? (*amplitude_map)(r, c) : 1.0;
            if (a > best) {
                best = a;
                seed = r * cols + c;
            }
        }
    if (!seed) {
        for (std::size_t i = 0; i < rows * cols && !seed; ++i)
            if (!cuts[i]) seed = i;
        if (!seed) seed = 0;
    }
    res.seed = {static_cast<int>(*seed / cols), static_cast<int>(*seed % cols)};

    RealGrid out(rows, cols, 0.0);
    MaskGrid done(rows, cols, 0);
    res.quality = MaskGrid(rows, cols, 0);
    out[*seed] = w[*seed];
    done[*seed] = 1;

    auto visit = [&](std::deque<std::size_t>& queue, bool respect_cuts) {
        while (!queue.empty()) {
            const std::size_t p = queue.front();
            queue.pop_front();
            const std::size_t r = p / cols, c = p % cols;
            const std::array<std::pair<long, long>, 4> nb{{{-1, 0}, {1, 0}, {0, -1}, {0, 1}}};
            for (const auto& [dr, dc] : nb) {
                const long rr = static_cast<long>(r) + dr, cc = static_cast<long>(c) + dc;
                if (rr < 0 || cc < 0 || rr >= static_cast<long>(rows) || cc >= static_cast<long>(cols)) continue;
                const std::size_t q = static_cast<std::size_t>(rr) * cols + static_cast<std::size_t>(cc);
                if (done[q] || (respect_cuts && cuts[q])) continue;
                out[q] = out[p] + wrap(w[q] - w[p]);
                done[q] = 1;
                queue.push_back(q);
            }
        }
    };

    std::deque<std::size_t> queue{*seed};
    if (!cuts[*seed]) visit(queue, true);
    for (std::size_t i = 0; i < done.size(); ++i) res.quality[i] = done[i];

    // Cut pixels and regions sealed off by cuts: continue from any unwrapped neighbour.
    for (std::size_t i = 0; i < done.size(); ++i)
        if (done[i]) queue.push_back(i);
    visit(queue, false);

    res.phase = PhaseMap{std::move(out), false, wrapped.wavelength_um};
    return res;
}

/// Least-squares plane a + b*row + c*col fitted to the pixels where `use` is set.
inline std::array<double, 3> fit_plane(const RealGrid& g, const MaskGrid& use) {
    Eigen::Matrix3d ata = Eigen::Matrix3d::Zero();
    Eigen::Vector3d atb = Eigen::Vector3d::Zero();
    const double sr = 1.0 / static_cast<double>(std::max<std::size_t>(1, g.rows()));
    const double sc = 1.0 / static_cast<double>(std::max<std::size_t>(1, g.cols()));
    for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) {
            if (!use(r, c)) continue;
            const Eigen::Vector3d a(1.0, static_cast<double>(r) * sr, static_cast<double>(c) * sc);
            ata += a * a.transpose();
            atb += a * g(r, c);
        }
    const Eigen::Vector3d x = ata.ldlt().solve(atb);
    return {x(0), x(1) * sr, x(2) * sc};
}

/// Removes background tilt and offset. The plane is refitted on the half of
/// the pixels closest to the current plane, which converges onto the
/// background whenever cells cover less than half of the field.
inline void remove_background_plane(RealGrid& phase, int iterations = 4) {
    MaskGrid use(phase.rows(), phase.cols(), 1);
    std::array<double, 3> plane{};
    std::vector<double> resid(phase.size());
    for (int it = 0; it < iterations; ++it) {
        plane = fit_plane(phase, use);
        for (std::size_t r = 0; r < phase.rows(); ++r)
            for (std::size_t c = 0; c < phase.cols(); ++c)
                resid[r * phase.cols() + c] = std::abs(phase(r, c) - plane[0] - plane[1] * static_cast<double>(r) -
                                                       plane[2] * static_cast<double>(c));
        std::vector<double> sorted = resid;
        const auto mid = sorted.begin() + static_cast<long>(sorted.size() / 2);
        std::nth_element(sorted.begin(), mid, sorted.end());
        const double cutoff = *mid;
        for (std::size_t i = 0; i < resid.size(); ++i) use[i] = resid[i] <= cutoff ? 1 : 0;
    }
    plane = fit_plane(phase, use);
    for (std::size_t r = 0; r < phase.rows(); ++r)
        for (std::size_t c = 0; c < phase.cols(); ++c)
            phase(r, c) -= plane[0] + plane[1] * static_cast<double>(r) + plane[2] * static_cast<double>(c);
}

struct RetrievalConfig {
    std::optional<FilterSpec> filter;          // auto-detected when empty
    std::optional<double> filter_radius_bins;  // overrides the auto radius only
    double radius_fraction = 0.5;              // auto radius / carrier distance
    bool hann_window = false;
    bool plane_fit = true;
};

struct RetrievalResult {
    PhaseMap phase;  // unwrapped, background removed
    RealGrid amplitude;
    FilterSpec filter;
    std::size_t residue_count = 0;
    MaskGrid quality;
};

inline RetrievalResult retrieve(const Interferogram& frame, const RetrievalConfig& cfg = {}) {
    if (frame.pixels.rows() < 4 || frame.pixels.cols() < 4) throw ShapeError("interferogram too small");
    RealGrid px = frame.pixels;
    if (cfg.hann_window) apply_hann(px);
    const ComplexGrid spectrum = fft2d(px);
    FilterSpec filter = cfg.filter ? *cfg.filter : auto_filter(spectrum, frame.carrier, cfg.radius_fraction);
    if (cfg.filter_radius_bins) filter.radius_bins = *cfg.filter_radius_bins;

    const ComplexField field = filter_order(spectrum, filter);
    RetrievalResult out;
    out.filter = filter;
    out.amplitude = amplitude(field);
    const PhaseMap wrapped = wrapped_phase(field, frame.wavelength_um);
    UnwrapResult unwrapped = goldstein_unwrap(wrapped, &out.amplitude);
    out.residue_count = unwrapped.residue_count;
    out.quality = std::move(unwrapped.quality);
    out.phase = std::move(unwrapped.phase);
    if (cfg.plane_fit) remove_background_plane(out.phase.values_rad);
    return out;
}

}  // namespace qpi::retrieval

#endif  // QPI_PHASE_RETRIEVAL_HPP
