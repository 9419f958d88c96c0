#ifndef QPI_COHERENCE_HPP
#define QPI_COHERENCE_HPP

// Longitudinal spatial coherence and resolution of an extended source viewed
// through a microscope objective. All lengths are micrometres.
//
// Measured values for the reference system (20x Mirau, NA 0.4) were an axial
// resolution of 4.5 / 4 / 3.8 um and a lateral resolution of 1.9 / 1.1 / 1.0 um
// for 632 / 532 / 460 nm. The functions here return formula values only; the
// measurements are context, not targets.

#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "qpi/error.hpp"

namespace qpi::coherence {

inline constexpr double kRedWavelengthUm = 0.632;
inline constexpr double kGreenWavelengthUm = 0.532;
inline constexpr double kBlueWavelengthUm = 0.460;
inline constexpr double kObjectiveNa = 0.4;

constexpr double nm_to_um(double nm) noexcept { return nm * 1e-3; }
constexpr double um_to_nm(double um) noexcept { return um * 1e3; }

struct SourceSpec {
    double central_wavelength_um = kRedWavelengthUm;
    double spectral_width_um = 0.0;
    double half_angle_rad = 0.0;  // half width of the angular spectrum

    void validate() const {
        if (!std::isfinite(central_wavelength_um) || central_wavelength_um <= 0.0)
            throw DomainError("central wavelength must be finite and > 0");
        if (!std::isfinite(spectral_width_um) || spectral_width_um < 0.0)
            throw DomainError("spectral width must be finite and >= 0");
        if (!std::isfinite(half_angle_rad) || half_angle_rad < 0.0 ||
            half_angle_rad >= std::numbers::pi / 2)
            throw DomainError("half angle must lie in [0, pi/2)");
    }
};

struct CoherenceReport {
    double coherence_length_um = 0.0;
    double lateral_resolution_um = 0.0;
    double longitudinal_frequency_rad_per_um = 0.0;
};

/// Aperture half-angle of an objective, theta = asin(NA).
inline double half_angle_from_na(double numerical_aperture) {
    if (!(numerical_aperture > 0.0 && numerical_aperture <= 1.0))
        throw DomainError("numerical aperture must lie in (0, 1]");
    return std::asin(numerical_aperture);
}

/// k_z = (2 pi / lambda) cos(theta).
inline double longitudinal_frequency(double wavelength_um, double angle_rad) {
    if (!std::isfinite(wavelength_um) || wavelength_um <= 0.0)
        throw DomainError("wavelength must be finite and > 0");
    if (!std::isfinite(angle_rad) || angle_rad < 0.0 || angle_rad >= std::numbers::pi / 2)
        throw DomainError("angle must lie in [0, pi/2)");
    return 2.0 * std::numbers::pi / wavelength_um * std::cos(angle_rad);
}

/// lambda0 / (2 sin^2(theta/2)); the narrow-band limit of coherence_length.
inline double monochromatic_coherence_length(double wavelength_um, double half_angle_rad) {
    if (!std::isfinite(wavelength_um) || wavelength_um <= 0.0)
        throw DomainError("wavelength must be finite and > 0");
    if (half_angle_rad == 0.0)
        throw InfiniteCoherenceError("zero angular spectrum width");
    if (!std::isfinite(half_angle_rad) || half_angle_rad < 0.0 ||
        half_angle_rad >= std::numbers::pi / 2)
        throw DomainError("half angle must lie in (0, pi/2)");
    const double s = std::sin(half_angle_rad / 2.0);
    return wavelength_um / (2.0 * s * s);
}

/// [2 sin^2(theta/2) / lambda0 + (dlambda / lambda0^2) cos^2(theta/2)]^-1
inline double coherence_length(const SourceSpec& source) {
    source.validate();
    const double lambda = source.central_wavelength_um;
    const double s = std::sin(source.half_angle_rad / 2.0);
    const double c = std::cos(source.half_angle_rad / 2.0);
    const double inverse =
        2.0 * s * s / lambda + source.spectral_width_um / (lambda * lambda) * c * c;
    if (inverse == 0.0) throw InfiniteCoherenceError("zero angular and spectral width");
    return 1.0 / inverse;
}

/// 0.61 lambda0 / NA (Rayleigh criterion).
inline double lateral_resolution(double wavelength_um, double numerical_aperture) {
    if (!std::isfinite(wavelength_um) || wavelength_um <= 0.0)
        throw DomainError("wavelength must be finite and > 0");
    if (!(numerical_aperture > 0.0 && numerical_aperture <= 1.0))
        throw DomainError("numerical aperture must lie in (0, 1]");
    return 0.61 * wavelength_um / numerical_aperture;
}

inline CoherenceReport report(double wavelength_um, double numerical_aperture,
                              double bandwidth_um = 0.0) {
    const SourceSpec src{wavelength_um, bandwidth_um, half_angle_from_na(numerical_aperture)};
    CoherenceReport r;
    r.coherence_length_um = coherence_length(src);
    r.lateral_resolution_um = lateral_resolution(wavelength_um, numerical_aperture);
    r.longitudinal_frequency_rad_per_um = longitudinal_frequency(wavelength_um, src.half_angle_rad);
    return r;
}

}  // namespace qpi::coherence

#endif  // QPI_COHERENCE_HPP
