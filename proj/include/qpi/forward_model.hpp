#ifndef QPI_FORWARD_MODEL_HPP
#define QPI_FORWARD_MODEL_HPP

// Synthetic stand-in for the acquisition hardware: RBC phase phantoms for the
// three classes and slightly off-axis interferograms at three wavelengths.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "qpi/coherence.hpp"
#include "qpi/error.hpp"
#include "qpi/grid.hpp"
#include "qpi/random.hpp"

namespace qpi {

enum class ClassLabel : std::uint8_t { Healthy = 0, EarlyTrophozoite = 1, LateTrophozoite = 2, Unlabeled = 255 };

inline constexpr std::array<ClassLabel, 3> kAllClasses{
    ClassLabel::Healthy, ClassLabel::EarlyTrophozoite, ClassLabel::LateTrophozoite};

inline std::string_view to_string(ClassLabel c) {
    switch (c) {
        case ClassLabel::Healthy: return "healthy";
        case ClassLabel::EarlyTrophozoite: return "early";
        case ClassLabel::LateTrophozoite: return "late";
        case ClassLabel::Unlabeled: return "unlabeled";
    }
    return "unlabeled";
}

inline ClassLabel parse_class(std::string_view s) {
    if (s == "healthy" || s == "0") return ClassLabel::Healthy;
    if (s == "early" || s == "1") return ClassLabel::EarlyTrophozoite;
    if (s == "late" || s == "2") return ClassLabel::LateTrophozoite;
    if (s == "unlabeled" || s == "255") return ClassLabel::Unlabeled;
    throw FormatError("unknown class label '" + std::string(s) + "'");
}

enum class Channel : std::uint8_t { Red = 0, Green = 1, Blue = 2 };
inline constexpr std::array<Channel, 3> kAllChannels{Channel::Red, Channel::Green, Channel::Blue};

inline std::string_view to_string(Channel ch) {
    switch (ch) {
        case Channel::Red: return "red";
        case Channel::Green: return "green";
        case Channel::Blue: return "blue";
    }
    return "red";
}

inline constexpr double wavelength_um(Channel ch) {
    switch (ch) {
        case Channel::Red: return coherence::kRedWavelengthUm;
        case Channel::Green: return coherence::kGreenWavelengthUm;
        case Channel::Blue: return coherence::kBlueWavelengthUm;
    }
    return coherence::kRedWavelengthUm;
}

struct PhaseMap {
    RealGrid values_rad;
    bool wrapped = false;
    double wavelength_um = coherence::kRedWavelengthUm;
};

struct Carrier {
    double fx = 0.2;   // cycles per pixel along columns
    double fy = 0.05;  // cycles per pixel along rows
    bool operator==(const Carrier&) const = default;
};

struct Interferogram {
    RealGrid pixels;
    double wavelength_um = coherence::kRedWavelengthUm;
    Carrier carrier;
    double pixel_pitch_um = 4.65;
    std::string subject_id;
};

namespace forward {

// Acquisition geometry of the reference system. The synthetic canvas is a
// desk-scale crop; kSamplePixelUm is the object-plane sampling of that crop.
inline constexpr double kCameraPixelUm = 4.65;
inline constexpr int kSensorCols = 1392;
inline constexpr int kSensorRows = 1040;
inline constexpr double kFieldOfViewUm = 400.0;
inline constexpr double kSamplePixelUm = 0.14;
inline constexpr std::size_t kDefaultCanvas = 512;
inline constexpr Carrier kDefaultCarrier{0.2, 0.05};

/// Relative refractive-index contrast per class and channel (red, green, blue).
/// Hemozoin-bearing late stages are the most dispersive.
inline constexpr std::array<double, 3> dispersion_factors(ClassLabel c) {
    switch (c) {
        case ClassLabel::Healthy: return {1.00, 1.02, 1.04};
        case ClassLabel::EarlyTrophozoite: return {1.00, 1.03, 1.06};
        case ClassLabel::LateTrophozoite: return {1.00, 1.05, 1.10};
        case ClassLabel::Unlabeled: break;
    }
    return {1.0, 1.0, 1.0};
}

/// Peak phase for an optical path difference, phi = (2 pi / lambda) * OPD * n_factor.
inline std::array<double, 3> peak_phases_for_opd(double opd_um, ClassLabel c) {
    const auto n = dispersion_factors(c);
    std::array<double, 3> out{};
    for (std::size_t i = 0; i < 3; ++i)
        out[i] = 2.0 * std::numbers::pi / wavelength_um(kAllChannels[i]) * opd_um * n[i];
    return out;
}

/// Configured red/blue phase ratio for a class.
inline double dispersion_ratio_red_blue(ClassLabel c) {
    const auto n = dispersion_factors(c);
    return (wavelength_um(Channel::Blue) / wavelength_um(Channel::Red)) * (n[0] / n[2]);
}

/// Biconcave disc thickness, normalised to a maximum of 1:
///   h(rho) = (1 - rho^2)^2 (1 + 8 rho^2) / 1.6875   for rho < 1, else 0.
/// The rim maximum sits at rho = 0.5, the centre dips to 0.593, and both the
/// value and slope vanish at rho = 1.
inline double biconcave_profile(double rho) {
    if (rho >= 1.0) return 0.0;
    const double u = rho * rho;
    return (1.0 - u) * (1.0 - u) * (1.0 + 8.0 * u) / 1.6875;
}

/// Raised-cosine bump of unit height and radius `radius` (C1 at the edge).
inline double raised_cosine(double dist, double radius) {
    if (dist >= radius) return 0.0;
    return 0.5 * (1.0 + std::cos(std::numbers::pi * dist / radius));
}

struct PhantomSpec {
    ClassLabel class_label = ClassLabel::Healthy;
    double cell_radius_um = 4.0;
    std::array<double, 3> peak_phase_rad{1.5, 1.8, 2.1};  // red, green, blue
    int inclusion_count = 0;
    double pigment_fraction = 0.0;
    double center_row = 0.0;
    double center_col = 0.0;
    std::uint64_t rng_seed = 0;

    double radius_px() const { return cell_radius_um / kSamplePixelUm; }

    void validate() const {
        for (double p : peak_phase_rad)
            if (!(p > 0.0 && p <= 8.0 * std::numbers::pi))
                throw DomainError("peak phase must lie in (0, 8 pi]");
        if (!(cell_radius_um > 0.0)) throw DomainError("cell radius must be > 0");
        if (inclusion_count < 0) throw DomainError("inclusion count must be >= 0");
        if (class_label == ClassLabel::EarlyTrophozoite && inclusion_count < 2)
            throw DomainError("early trophozoite needs at least two chromatin dots");
        if (class_label == ClassLabel::LateTrophozoite && !(pigment_fraction > 0.0))
            throw DomainError("late trophozoite needs a positive pigment fraction");
        if (pigment_fraction < 0.0 || pigment_fraction > 1.0)
            throw DomainError("pigment fraction must lie in [0, 1]");
    }
};

inline constexpr double kInclusionRadiusPx = 4.0;
inline constexpr double kInclusionHeight = 0.45;  // relative to the base peak
inline constexpr double kPigmentHeight = 0.35;
inline constexpr double kPigmentEdgePx = 4.0;

/// Normalised (peak-1 base) cell shape; channels differ only by a scale factor.
inline void add_cell_shape(RealGrid& shape, const PhantomSpec& spec) {
    spec.validate();
    const double radius = spec.radius_px();
    const double cr = spec.center_row;
    const double cc = spec.center_col;
    if (cr - radius < 2.0 || cc - radius < 2.0 ||
        cr + radius > static_cast<double>(shape.rows()) - 2.0 ||
        cc + radius > static_cast<double>(shape.cols()) - 2.0)
        throw GeometryError("cell does not fit inside the canvas with a 2 px margin");

    Rng rng(spec.rng_seed);

    struct Dot {
        double r, c;
    };
    std::vector<Dot> dots;
    const double min_dot_gap = 3.0 * kInclusionRadiusPx;
    for (int k = 0; k < spec.inclusion_count; ++k) {
        for (int attempt = 0; attempt < 10000; ++attempt) {
            const double rho = 0.6 * radius * std::sqrt(uniform(rng, 0.0, 1.0));
            const double ang = uniform(rng, 0.0, 2.0 * std::numbers::pi);
            const Dot d{cr + rho * std::sin(ang), cc + rho * std::cos(ang)};
            const bool clear = std::all_of(dots.begin(), dots.end(), [&](const Dot& o) {
                return std::hypot(o.r - d.r, o.c - d.c) >= min_dot_gap;
            });
            if (clear) {
                dots.push_back(d);
                break;
            }
            if (attempt == 9999) throw GeometryError("cannot place chromatin dots");
        }
    }

    // Pigment: a raised disc whose core area is pigment_fraction of the cell.
    double pig_r = 0.0, pig_row = cr, pig_col = cc;
    if (spec.pigment_fraction > 0.0) {
        pig_r = radius * std::sqrt(spec.pigment_fraction);
        const double room = std::max(0.0, 0.85 * radius - pig_r - kPigmentEdgePx);
        const double rho = room * std::sqrt(uniform(rng, 0.0, 1.0));
        const double ang = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        pig_row = cr + rho * std::sin(ang);
        pig_col = cc + rho * std::cos(ang);
    }

    const auto r_lo = static_cast<std::size_t>(std::max(0.0, std::floor(cr - radius)));
    const auto r_hi = static_cast<std::size_t>(std::min<double>(shape.rows() - 1, std::ceil(cr + radius)));
    const auto c_lo = static_cast<std::size_t>(std::max(0.0, std::floor(cc - radius)));
    const auto c_hi = static_cast<std::size_t>(std::min<double>(shape.cols() - 1, std::ceil(cc + radius)));
    for (std::size_t r = r_lo; r <= r_hi; ++r) {
        for (std::size_t c = c_lo; c <= c_hi; ++c) {
            const double dr = static_cast<double>(r) - cr;
            const double dc = static_cast<double>(c) - cc;
            const double rho = std::hypot(dr, dc) / radius;
            if (rho >= 1.0) continue;
            double v = biconcave_profile(rho);
            for (const Dot& d : dots)
                v += kInclusionHeight *
                     raised_cosine(std::hypot(static_cast<double>(r) - d.r, static_cast<double>(c) - d.c),
                                   kInclusionRadiusPx);
            if (pig_r > 0.0) {
                const double dist = std::hypot(static_cast<double>(r) - pig_row, static_cast<double>(c) - pig_col);
                double w = 0.0;
                if (dist <= pig_r) w = 1.0;
                else if (dist < pig_r + kPigmentEdgePx)
                    w = 0.5 * (1.0 + std::cos(std::numbers::pi * (dist - pig_r) / kPigmentEdgePx));
                v += kPigmentHeight * w * std::sqrt(biconcave_profile(rho));
            }
            shape(r, c) += v;
        }
    }
}

/// Ground-truth phase of one cell on an otherwise zero canvas, for one channel.
inline PhaseMap make_phantom_field(const PhantomSpec& spec, std::size_t rows, std::size_t cols,
                                   Channel channel = Channel::Red) {
    RealGrid shape(rows, cols, 0.0);
    add_cell_shape(shape, spec);
    const double peak = spec.peak_phase_rad[static_cast<std::size_t>(channel)];
    for (double& v : shape.storage()) v *= peak;
    return PhaseMap{std::move(shape), false, wavelength_um(channel)};
}

struct FringeParams {
    Carrier carrier = kDefaultCarrier;
    double background = 100.0;
    double modulation = 0.8;
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;
};

/// Nyquist and non-zero checks on a carrier.
/// Nearest carrier that completes an integer number of cycles across the canvas.
inline Carrier snap_carrier(const Carrier& k, std::size_t rows, std::size_t cols) {
    if (rows == 0 || cols == 0) throw ShapeError("empty canvas");
    const auto snap = [](double f, std::size_t n) { return std::round(f * static_cast<double>(n)) / static_cast<double>(n); };
    return Carrier{snap(k.fx, cols), snap(k.fy, rows)};
}

inline void check_carrier(const Carrier& k) {
    if (!std::isfinite(k.fx) || !std::isfinite(k.fy) || std::abs(k.fx) >= 0.5 || std::abs(k.fy) >= 0.5)
        throw AliasingError("carrier must be below 0.5 cycles/px on both axes");
    if (k.fx == 0.0 && k.fy == 0.0) throw AliasingError("carrier must be non-zero");
}

/// I = B (1 + m cos(2 pi (fx x + fy y) + phi)) + n, clamped at zero.
inline Interferogram synthesize_interferogram(const PhaseMap& truth, const FringeParams& p) {
    check_carrier(p.carrier);
    if (!(p.background > 0.0)) throw DomainError("background must be > 0");
    if (!(p.modulation > 0.0 && p.modulation <= 1.0)) throw DomainError("modulation must lie in (0, 1]");
    if (!(p.noise_sigma >= 0.0)) throw DomainError("noise sigma must be >= 0");

    const RealGrid& phi = truth.values_rad;
    Interferogram out;
    out.pixels = RealGrid(phi.rows(), phi.cols());
    out.wavelength_um = truth.wavelength_um;
    out.carrier = p.carrier;
    out.pixel_pitch_um = kCameraPixelUm;
    Rng rng(p.seed);
    constexpr double two_pi = 2.0 * std::numbers::pi;
    for (std::size_t r = 0; r < phi.rows(); ++r) {
        for (std::size_t c = 0; c < phi.cols(); ++c) {
            const double carrier_phase =
                two_pi * (p.carrier.fx * static_cast<double>(c) + p.carrier.fy * static_cast<double>(r));
            double v = p.background * (1.0 + p.modulation * std::cos(carrier_phase + phi(r, c)));
            if (p.noise_sigma > 0.0) v += gaussian(rng, 0.0, p.noise_sigma);
            out.pixels(r, c) = std::max(0.0, v);
        }
    }
    return out;
}

/// Noise sigma that yields the requested SNR, SNR_dB = 20 log10(B m / sigma).
inline double noise_sigma_for_snr(double background, double modulation, double snr_db) {
    return background * modulation / std::pow(10.0, snr_db / 20.0);
}

struct CellTruth {
    Box box;
    ClassLabel label = ClassLabel::Healthy;
    double center_row = 0.0;
    double center_col = 0.0;
    double radius_px = 0.0;
};

struct SubjectSpec {
    std::string subject_id = "s0";
    ClassLabel class_label = ClassLabel::Healthy;
    int cell_count = 5;
    std::size_t rows = kDefaultCanvas;
    std::size_t cols = kDefaultCanvas;
    std::uint64_t seed = 0;
    bool allow_overlap = false;
    double min_gap_px = 12.0;
    double radius_min_um = 3.7;
    double radius_max_um = 4.3;
    double opd_min_um = 0.12;
    double opd_max_um = 0.17;
    FringeParams fringe{};
};

/// One field of view: three co-registered frames, their truths and the cells.
struct SubjectScene {
    std::array<Interferogram, 3> frames;
    std::array<PhaseMap, 3> truths;
    std::vector<CellTruth> cells;
};

/// Randomised phantom of a class at a given centre; drawn from `rng`.
inline PhantomSpec random_phantom(ClassLabel label, double center_row, double center_col,
                                  double radius_um, double opd_um, Rng& rng) {
    PhantomSpec spec;
    spec.class_label = label;
    spec.cell_radius_um = radius_um;
    spec.center_row = center_row;
    spec.center_col = center_col;
    spec.peak_phase_rad = peak_phases_for_opd(opd_um, label);
    spec.rng_seed = rng();
    if (label == ClassLabel::EarlyTrophozoite) spec.inclusion_count = 2 + static_cast<int>(uniform_index(rng, 3));
    if (label == ClassLabel::LateTrophozoite) spec.pigment_fraction = uniform(rng, 0.12, 0.25);
    return spec;
}

/// Exact bounding box of pixels strictly inside the disc.
inline Box disc_box(double cr, double cc, double radius, std::size_t rows, std::size_t cols) {
    int r0 = static_cast<int>(rows), r1 = -1, c0 = static_cast<int>(cols), c1 = -1;
    const int lo_r = std::max(0, static_cast<int>(std::floor(cr - radius)));
    const int hi_r = std::min(static_cast<int>(rows) - 1, static_cast<int>(std::ceil(cr + radius)));
    const int lo_c = std::max(0, static_cast<int>(std::floor(cc - radius)));
    const int hi_c = std::min(static_cast<int>(cols) - 1, static_cast<int>(std::ceil(cc + radius)));
    for (int r = lo_r; r <= hi_r; ++r)
        for (int c = lo_c; c <= hi_c; ++c)
            if (std::hypot(r - cr, c - cc) < radius) {
                r0 = std::min(r0, r);
                r1 = std::max(r1, r);
                c0 = std::min(c0, c);
                c1 = std::max(c1, c);
            }
    if (r1 < 0) return Box{};
    return Box{r0, c0, r1 - r0 + 1, c1 - c0 + 1};
}

/// Generates one field of view of a subject. Cells of a subject share its class.
inline SubjectScene make_subject(const SubjectSpec& spec) {
    if (spec.cell_count < 0) throw DomainError("cell count must be >= 0");
    Rng rng(spec.seed);
    SubjectScene scene;
    RealGrid shape(spec.rows, spec.cols, 0.0);
    std::vector<PhantomSpec> phantoms;

    const double max_radius_px = spec.radius_max_um / kSamplePixelUm;
    const double area_needed = static_cast<double>(spec.cell_count) * std::numbers::pi *
                               std::pow(max_radius_px + spec.min_gap_px / 2.0, 2);
    if (!spec.allow_overlap && area_needed > 0.9 * static_cast<double>(spec.rows * spec.cols))
        throw PlacementError("cannot place " + std::to_string(spec.cell_count) + " cells without overlap");

    for (int k = 0; k < spec.cell_count; ++k) {
        const double radius_um = uniform(rng, spec.radius_min_um, spec.radius_max_um);
        const double radius_px = radius_um / kSamplePixelUm;
        const double opd = uniform(rng, spec.opd_min_um, spec.opd_max_um);
        const double margin = radius_px + 3.0;
        if (2.0 * margin >= static_cast<double>(std::min(spec.rows, spec.cols)))
            throw PlacementError("canvas too small for the cell radius");
        bool placed = false;
        for (int attempt = 0; attempt < 20000 && !placed; ++attempt) {
            const double r = uniform(rng, margin, static_cast<double>(spec.rows) - margin);
            const double c = uniform(rng, margin, static_cast<double>(spec.cols) - margin);
            const bool clear = spec.allow_overlap ||
                               std::all_of(phantoms.begin(), phantoms.end(), [&](const PhantomSpec& o) {
                                   return std::hypot(o.center_row - r, o.center_col - c) >=
                                          o.radius_px() + radius_px + spec.min_gap_px;
                               });
            if (!clear) continue;
            phantoms.push_back(random_phantom(spec.class_label, r, c, radius_um, opd, rng));
            placed = true;
        }
        if (!placed)
            throw PlacementError("cannot place " + std::to_string(spec.cell_count) + " cells without overlap");
    }

    // Channels share one shape map, so per-pixel channel ratios are exact
    // within a cell; each cell carries its own per-channel peak.
    std::array<RealGrid, 3> truth_grids{RealGrid(spec.rows, spec.cols, 0.0), RealGrid(spec.rows, spec.cols, 0.0),
                                        RealGrid(spec.rows, spec.cols, 0.0)};
    for (const PhantomSpec& ph : phantoms) {
        RealGrid cell(spec.rows, spec.cols, 0.0);
        add_cell_shape(cell, ph);
        for (std::size_t ch = 0; ch < 3; ++ch) {
            auto& dst = truth_grids[ch].storage();
            const auto& src = cell.storage();
            for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i] * ph.peak_phase_rad[ch];
        }
        CellTruth t;
        t.label = ph.class_label;
        t.center_row = ph.center_row;
        t.center_col = ph.center_col;
        t.radius_px = ph.radius_px();
        t.box = disc_box(ph.center_row, ph.center_col, ph.radius_px(), spec.rows, spec.cols);
        scene.cells.push_back(t);
    }

    for (std::size_t ch = 0; ch < 3; ++ch) {
        const Channel channel = kAllChannels[ch];
        scene.truths[ch] = PhaseMap{std::move(truth_grids[ch]), false, wavelength_um(channel)};
        FringeParams fp = spec.fringe;
        fp.seed = derive_seed(spec.seed, std::string("noise:") + std::string(to_string(channel)));
        scene.frames[ch] = synthesize_interferogram(scene.truths[ch], fp);
        scene.frames[ch].subject_id = spec.subject_id;
    }
    return scene;
}

}  // namespace forward
}  // namespace qpi

#endif  // QPI_FORWARD_MODEL_HPP
