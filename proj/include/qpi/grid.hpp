#ifndef QPI_GRID_HPP
#define QPI_GRID_HPP

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "qpi/error.hpp"

namespace qpi {

/// Dense row-major 2D array.
template <typename T>
class Grid {
public:
    Grid() = default;
    Grid(std::size_t rows, std::size_t cols, T fill = T{})
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Grid(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw ShapeError("grid data length " + std::to_string(data_.size()) + " != " +
                             std::to_string(rows_) + "x" + std::to_string(cols_));
        }
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }
    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    bool same_shape(const Grid& other) const noexcept {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    bool operator==(const Grid&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

using RealGrid = Grid<double>;
using MaskGrid = Grid<unsigned char>;

/// Axis-aligned pixel box: top-left corner plus extent.
struct Box {
    int row = 0;
    int col = 0;
    int height = 0;
    int width = 0;

    int bottom() const noexcept { return row + height; }  // exclusive
    int right() const noexcept { return col + width; }    // exclusive
    bool contains(double r, double c) const noexcept {
        return r >= row && r < bottom() && c >= col && c < right();
    }
    bool intersects(const Box& o) const noexcept {
        return row < o.bottom() && o.row < bottom() && col < o.right() && o.col < right();
    }
    bool contains(const Box& o) const noexcept {
        return o.row >= row && o.col >= col && o.bottom() <= bottom() && o.right() <= right();
    }
    bool operator==(const Box&) const = default;
};

/// Bilinear sample at fractional (row, col); coordinates are clamped to the grid.
inline double sample_bilinear(const RealGrid& g, double r, double c) {
    const double rmax = static_cast<double>(g.rows() - 1);
    const double cmax = static_cast<double>(g.cols() - 1);
    r = std::clamp(r, 0.0, rmax);
    c = std::clamp(c, 0.0, cmax);
    const auto r0 = static_cast<std::size_t>(r);
    const auto c0 = static_cast<std::size_t>(c);
    const std::size_t r1 = std::min(r0 + 1, g.rows() - 1);
    const std::size_t c1 = std::min(c0 + 1, g.cols() - 1);
    const double fr = r - static_cast<double>(r0);
    const double fc = c - static_cast<double>(c0);
    const double top = g(r0, c0) * (1.0 - fc) + g(r0, c1) * fc;
    const double bot = g(r1, c0) * (1.0 - fc) + g(r1, c1) * fc;
    return top * (1.0 - fr) + bot * fr;
}

/// Resamples a grid to (rows, cols) with pixel-centre aligned bilinear interpolation.
inline RealGrid resize_bilinear(const RealGrid& src, std::size_t rows, std::size_t cols) {
    RealGrid out(rows, cols);
    const double sr = static_cast<double>(src.rows()) / static_cast<double>(rows);
    const double sc = static_cast<double>(src.cols()) / static_cast<double>(cols);
    for (std::size_t r = 0; r < rows; ++r) {
        const double y = (static_cast<double>(r) + 0.5) * sr - 0.5;
        for (std::size_t c = 0; c < cols; ++c) {
            const double x = (static_cast<double>(c) + 0.5) * sc - 0.5;
            out(r, c) = sample_bilinear(src, y, x);
        }
    }
    return out;
}

inline RealGrid crop(const RealGrid& src, const Box& b) {
    RealGrid out(static_cast<std::size_t>(b.height), static_cast<std::size_t>(b.width));
    for (int r = 0; r < b.height; ++r)
        for (int c = 0; c < b.width; ++c)
            out(r, c) = src(static_cast<std::size_t>(b.row + r), static_cast<std::size_t>(b.col + c));
    return out;
}

}  // namespace qpi

#endif  // QPI_GRID_HPP
