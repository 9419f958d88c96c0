#ifndef QPI_FFT_HPP
#define QPI_FFT_HPP

#include <complex>
#include <mutex>
#include <vector>

#include <fftw3.h>

#include "qpi/error.hpp"
#include "qpi/grid.hpp"

namespace qpi {

using ComplexGrid = Grid<std::complex<double>>;

namespace detail {
inline std::mutex& fftw_planner_mutex() {
    static std::mutex m;
    return m;
}
}  // namespace detail

/// In-place unnormalised 2D DFT. `sign` is FFTW_FORWARD or FFTW_BACKWARD.
/// Plans use FFTW_ESTIMATE so results do not depend on timing.
inline void fft2d_inplace(ComplexGrid& g, int sign) {
    if (g.empty()) throw ShapeError("fft of an empty grid");
    auto* data = reinterpret_cast<fftw_complex*>(g.storage().data());
    fftw_plan plan;
    {
        std::lock_guard lock(detail::fftw_planner_mutex());
        plan = fftw_plan_dft_2d(static_cast<int>(g.rows()), static_cast<int>(g.cols()), data, data, sign,
                                FFTW_ESTIMATE);
    }
    if (plan == nullptr) throw Error("fftw planning failed");
    fftw_execute(plan);
    std::lock_guard lock(detail::fftw_planner_mutex());
    fftw_destroy_plan(plan);
}

inline ComplexGrid fft2d(const RealGrid& g) {
    ComplexGrid out(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.size(); ++i) out[i] = g[i];
    fft2d_inplace(out, FFTW_FORWARD);
    return out;
}

/// Inverse transform including the 1/(rows*cols) normalisation.
inline void ifft2d_inplace(ComplexGrid& g) {
    fft2d_inplace(g, FFTW_BACKWARD);
    const double scale = 1.0 / static_cast<double>(g.size());
    for (auto& v : g.storage()) v *= scale;
}

/// Signed frequency index of storage bin k in a length-n transform.
constexpr long signed_bin(std::size_t k, std::size_t n) noexcept {
    const auto kk = static_cast<long>(k);
    const auto nn = static_cast<long>(n);
    return kk <= (nn - 1) / 2 ? kk : kk - nn;
}

/// Storage index of signed bin b in a length-n transform.
constexpr std::size_t storage_bin(long b, std::size_t n) noexcept {
    const auto nn = static_cast<long>(n);
    return static_cast<std::size_t>(((b % nn) + nn) % nn);
}

}  // namespace qpi

#endif  // QPI_FFT_HPP
