#ifndef QPI_CNN_TENSOR_HPP
#define QPI_CNN_TENSOR_HPP

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "qpi/error.hpp"

namespace qpi::cnn {

using Shape = std::vector<std::size_t>;

// SIMD-aligned so vectorised reductions peel the same way for every buffer;
// with plain 16-byte malloc alignment results differed in the last bits run to run.
template <typename T>
using Storage = std::vector<T, Eigen::aligned_allocator<T>>;

inline std::size_t shape_size(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

/// Row-major dense tensor.
template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
        for (auto d : shape_)
            if (d == 0) throw ShapeError("zero extent in " + shape_string(shape_));
    }
    Tensor(Shape shape, Storage<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_length();
    }
    Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
        check_length();
    }
    Tensor(Shape shape, std::initializer_list<T> data) : shape_(std::move(shape)), data_(data) { check_length(); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    Storage<T>& values() noexcept { return data_; }
    const Storage<T>& values() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    // NCHW access
    T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    void reshape(Shape s) {
        if (shape_size(s) != data_.size())
            throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(s));
        shape_ = std::move(s);
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const noexcept {
        for (const T& v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool operator==(const Tensor&) const = default;

private:
    void check_length() const {
        if (data_.size() != shape_size(shape_))
            throw ShapeError("data length " + std::to_string(data_.size()) + " does not match " +
                             shape_string(shape_));
    }

    Shape shape_;
    Storage<T> data_;
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
    std::vector<To> v(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) v[i] = static_cast<To>(t[i]);
    return Tensor<To>(t.shape(), std::move(v));
}

}  // namespace qpi::cnn

#endif  // QPI_CNN_TENSOR_HPP
