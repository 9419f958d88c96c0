#ifndef QPI_TESTS_SUPPORT_HPP
#define QPI_TESTS_SUPPORT_HPP

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <string>

#include "qpi/grid.hpp"

namespace qpi::test {

/// RMS of (a - b) over pixels at least `border` from the edge, after removing the mean offset.
inline double interior_rms(const RealGrid& a, const RealGrid& b, std::size_t border) {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t r = border; r + border < a.rows(); ++r)
        for (std::size_t c = border; c + border < a.cols(); ++c, ++n) s += a(r, c) - b(r, c);
    const double off = s / static_cast<double>(n);
    double e = 0.0;
    for (std::size_t r = border; r + border < a.rows(); ++r)
        for (std::size_t c = border; c + border < a.cols(); ++c) {
            const double d = a(r, c) - b(r, c) - off;
            e += d * d;
        }
    return std::sqrt(e / static_cast<double>(n));
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("qpi_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace qpi::test

#endif  // QPI_TESTS_SUPPORT_HPP
