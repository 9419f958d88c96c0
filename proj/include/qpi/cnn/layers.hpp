#ifndef QPI_CNN_LAYERS_HPP
#define QPI_CNN_LAYERS_HPP

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "qpi/cnn/tensor.hpp"
#include "qpi/error.hpp"
#include "qpi/random.hpp"

namespace qpi::cnn {

enum class LayerKind : std::uint8_t { Conv, MaxPool, Dense, ReLU, Tanh, Sigmoid, Dropout, Flatten };
enum class Rounding : std::uint8_t { Floor, Ceil };
enum class Mode { Train, Eval };

inline const char* to_string(LayerKind k) {
    switch (k) {
        case LayerKind::Conv: return "conv";
        case LayerKind::MaxPool: return "maxpool";
        case LayerKind::Dense: return "dense";
        case LayerKind::ReLU: return "relu";
        case LayerKind::Tanh: return "tanh";
        case LayerKind::Sigmoid: return "sigmoid";
        case LayerKind::Dropout: return "dropout";
        case LayerKind::Flatten: return "flatten";
    }
    return "?";
}

struct LayerSpec {
    LayerKind kind = LayerKind::ReLU;
    std::string name;
    std::size_t kh = 0, kw = 0;
    std::size_t filters = 0;  // conv output channels, dense output units
    std::size_t stride = 1;
    std::size_t pad = 0;
    double dropout_rate = 0.0;
    Rounding rounding = Rounding::Floor;

    void validate() const {
        if (kind == LayerKind::Conv || kind == LayerKind::MaxPool) {
            if (kh == 0 || kw == 0) throw DomainError(name + ": kernel must be positive");
            if (stride == 0) throw DomainError(name + ": stride must be >= 1");
        }
        if ((kind == LayerKind::Conv || kind == LayerKind::Dense) && filters == 0)
            throw DomainError(name + ": needs at least one output unit");
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw DomainError(name + ": dropout rate outside [0,1)");
    }

    bool operator==(const LayerSpec&) const = default;
};

inline LayerSpec conv_spec(std::string name, std::size_t k, std::size_t filters, std::size_t stride, std::size_t pad,
                           Rounding r = Rounding::Floor) {
    return {LayerKind::Conv, std::move(name), k, k, filters, stride, pad, 0.0, r};
}
inline LayerSpec pool_spec(std::string name, std::size_t k, std::size_t stride) {
    return {LayerKind::MaxPool, std::move(name), k, k, 0, stride, 0, 0.0, Rounding::Floor};
}
inline LayerSpec dense_spec(std::string name, std::size_t units) {
    return {LayerKind::Dense, std::move(name), 0, 0, units, 1, 0, 0.0, Rounding::Floor};
}
inline LayerSpec simple_spec(LayerKind kind, std::string name) {
    return {kind, std::move(name), 0, 0, 0, 1, 0, 0.0, Rounding::Floor};
}
inline LayerSpec dropout_spec(std::string name, double rate) {
    return {LayerKind::Dropout, std::move(name), 0, 0, 0, 1, 0, rate, Rounding::Floor};
}

/// Output extent of a strided window along one axis; 0 when the kernel does not fit.
inline std::size_t window_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad, Rounding r) {
    const std::size_t span = in + 2 * pad;
    if (k > span) return 0;
    const std::size_t rem = span - k;
    return (r == Rounding::Ceil ? (rem + stride - 1) / stride : rem / stride) + 1;
}

template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    Tensor<T> velocity;
    bool decay = true;  // weights take L2, biases do not

    Parameter(std::string n, Shape s, bool d)
        : name(std::move(n)), value(s), grad(s), velocity(s), decay(d) {}
};

template <typename T>
class Layer {
public:
    explicit Layer(LayerSpec spec) : spec_(std::move(spec)) { spec_.validate(); }
    virtual ~Layer() = default;

    virtual Tensor<T> forward(const Tensor<T>& x, Mode mode) = 0;
    virtual Tensor<T> backward(const Tensor<T>& dy) = 0;
    virtual Shape output_shape(const Shape& in) const = 0;
    virtual std::vector<Parameter<T>*> parameters() { return {}; }
    virtual void reseed(std::uint64_t) {}

    const LayerSpec& spec() const noexcept { return spec_; }
    const std::string& name() const noexcept { return spec_.name; }

protected:
    void require_cache(bool have) const {
        if (!have) throw StateError(spec_.name + ": backward called without a cached forward pass");
    }
    void require_rank(const Shape& s, std::size_t rank) const {
        if (s.size() != rank)
            throw ShapeError(spec_.name + ": expected rank " + std::to_string(rank) + " input, got " +
                             shape_string(s));
    }

    LayerSpec spec_;
};

template <typename T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatrixRM<T>>;
template <typename T>
using ConstMapRM = Eigen::Map<const MatrixRM<T>>;

// ---------------------------------------------------------------------------

template <typename T>
class Conv2d final : public Layer<T> {
public:
    Conv2d(LayerSpec spec, std::size_t in_channels)
        : Layer<T>(std::move(spec)), cin_(in_channels),
          weight_(this->spec_.name + ".weight", {this->spec_.filters, cin_, this->spec_.kh, this->spec_.kw}, true),
          bias_(this->spec_.name + ".bias", {this->spec_.filters}, false) {
        if (cin_ == 0) throw DomainError(this->spec_.name + ": zero input channels");
    }

    Shape output_shape(const Shape& in) const override {
        this->require_rank(in, 4);
        if (in[1] != cin_)
            throw ShapeError(this->spec_.name + ": input " + shape_string(in) + " incompatible with weights " +
                             shape_string(weight_.value.shape()));
        const auto& s = this->spec_;
        const std::size_t ho = window_out(in[2], s.kh, s.stride, s.pad, s.rounding);
        const std::size_t wo = window_out(in[3], s.kw, s.stride, s.pad, s.rounding);
        if (ho == 0 || wo == 0)
            throw ShapeError(s.name + ": kernel " + std::to_string(s.kh) + "x" + std::to_string(s.kw) +
                             " does not fit padded input " + shape_string(in));
        return {in[0], s.filters, ho, wo};
    }

    Tensor<T> forward(const Tensor<T>& x, Mode) override {
        const Shape os = output_shape(x.shape());
        input_ = x;
        cached_ = true;
        Tensor<T> y(os);
        const std::size_t k = cin_ * this->spec_.kh * this->spec_.kw;
        const std::size_t n = os[2] * os[3];
        cols_.resize(k * n);
        const ConstMapRM<T> w(weight_.value.data(), static_cast<Eigen::Index>(this->spec_.filters),
                              static_cast<Eigen::Index>(k));
        const Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(bias_.value.data(),
                                                                       static_cast<Eigen::Index>(this->spec_.filters));
        for (std::size_t i = 0; i < os[0]; ++i) {
            im2col(x, i, os[2], os[3]);
            MapRM<T> out(y.data() + i * this->spec_.filters * n, static_cast<Eigen::Index>(this->spec_.filters),
                         static_cast<Eigen::Index>(n));
            const ConstMapRM<T> c(cols_.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
            out.noalias() = w * c;
            out.colwise() += b;
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) override {
        this->require_cache(cached_);
        const Shape os = output_shape(input_.shape());
        if (dy.shape() != os)
            throw ShapeError(this->spec_.name + ": gradient " + shape_string(dy.shape()) + " vs output " +
                             shape_string(os));
        const auto f = static_cast<Eigen::Index>(this->spec_.filters);
        const std::size_t k = cin_ * this->spec_.kh * this->spec_.kw;
        const std::size_t n = os[2] * os[3];
        const auto ki = static_cast<Eigen::Index>(k);
        const auto ni = static_cast<Eigen::Index>(n);
        Tensor<T> dx(input_.shape());
        const ConstMapRM<T> w(weight_.value.data(), f, ki);
        MapRM<T> dw(weight_.grad.data(), f, ki);
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> db(bias_.grad.data(), f);
        cols_.resize(k * n);
        dcols_.resize(k * n);
        for (std::size_t i = 0; i < os[0]; ++i) {
            im2col(input_, i, os[2], os[3]);
            const ConstMapRM<T> g(dy.data() + i * this->spec_.filters * n, f, ni);
            const ConstMapRM<T> c(cols_.data(), ki, ni);
            dw.noalias() += g * c.transpose();
            db += g.rowwise().sum();
            MapRM<T> dc(dcols_.data(), ki, ni);
            dc.noalias() = w.transpose() * g;
            col2im(dx, i, os[2], os[3]);
        }
        return dx;
    }

    std::vector<Parameter<T>*> parameters() override { return {&weight_, &bias_}; }
    std::size_t in_channels() const noexcept { return cin_; }

private:
    // Unrolls sample i into a (cin*kh*kw) x (ho*wo) matrix. Taps outside the
    // input (padding, or the extra bottom/right row under ceil rounding) are zero.
    void im2col(const Tensor<T>& x, std::size_t i, std::size_t ho, std::size_t wo) {
        const auto& s = this->spec_;
        const long h = static_cast<long>(x.dim(2)), wdt = static_cast<long>(x.dim(3));
        const long pad = static_cast<long>(s.pad), st = static_cast<long>(s.stride);
        T* dst = cols_.data();
        for (std::size_t c = 0; c < cin_; ++c) {
            const T* src = x.data() + (i * cin_ + c) * x.dim(2) * x.dim(3);
            for (std::size_t a = 0; a < s.kh; ++a)
                for (std::size_t b = 0; b < s.kw; ++b) {
                    for (std::size_t oh = 0; oh < ho; ++oh) {
                        const long ih = static_cast<long>(oh) * st - pad + static_cast<long>(a);
                        if (ih < 0 || ih >= h) {
                            std::fill(dst, dst + wo, T{});
                            dst += wo;
                            continue;
                        }
                        const T* row = src + ih * wdt;
                        for (std::size_t ow = 0; ow < wo; ++ow) {
                            const long iw = static_cast<long>(ow) * st - pad + static_cast<long>(b);
                            *dst++ = (iw < 0 || iw >= wdt) ? T{} : row[iw];
                        }
                    }
                }
        }
    }

    void col2im(Tensor<T>& dx, std::size_t i, std::size_t ho, std::size_t wo) const {
        const auto& s = this->spec_;
        const long h = static_cast<long>(dx.dim(2)), wdt = static_cast<long>(dx.dim(3));
        const long pad = static_cast<long>(s.pad), st = static_cast<long>(s.stride);
        const T* src = dcols_.data();
        for (std::size_t c = 0; c < cin_; ++c) {
            T* dst = dx.data() + (i * cin_ + c) * dx.dim(2) * dx.dim(3);
            for (std::size_t a = 0; a < s.kh; ++a)
                for (std::size_t b = 0; b < s.kw; ++b)
                    for (std::size_t oh = 0; oh < ho; ++oh) {
                        const long ih = static_cast<long>(oh) * st - pad + static_cast<long>(a);
                        if (ih < 0 || ih >= h) {
                            src += wo;
                            continue;
                        }
                        T* row = dst + ih * wdt;
                        for (std::size_t ow = 0; ow < wo; ++ow, ++src) {
                            const long iw = static_cast<long>(ow) * st - pad + static_cast<long>(b);
                            if (iw >= 0 && iw < wdt) row[iw] += *src;
                        }
                    }
        }
    }

    std::size_t cin_;
    Parameter<T> weight_;
    Parameter<T> bias_;
    Tensor<T> input_;
    bool cached_ = false;
    Storage<T> cols_, dcols_;
};

// ---------------------------------------------------------------------------

template <typename T>
class MaxPool2d final : public Layer<T> {
public:
    explicit MaxPool2d(LayerSpec spec) : Layer<T>(std::move(spec)) {}

    Shape output_shape(const Shape& in) const override {
        this->require_rank(in, 4);
        const auto& s = this->spec_;
        const std::size_t ho = window_out(in[2], s.kh, s.stride, s.pad, s.rounding);
        const std::size_t wo = window_out(in[3], s.kw, s.stride, s.pad, s.rounding);
        if (ho == 0 || wo == 0) throw ShapeError(s.name + ": pool window larger than input " + shape_string(in));
        return {in[0], in[1], ho, wo};
    }

    Tensor<T> forward(const Tensor<T>& x, Mode) override {
        const Shape os = output_shape(x.shape());
        const auto& s = this->spec_;
        in_shape_ = x.shape();
        Tensor<T> y(os);
        argmax_.assign(y.size(), 0);
        const long h = static_cast<long>(x.dim(2)), w = static_cast<long>(x.dim(3));
        std::size_t o = 0;
        for (std::size_t p = 0; p < os[0] * os[1]; ++p) {
            const std::size_t base = p * x.dim(2) * x.dim(3);
            for (std::size_t oh = 0; oh < os[2]; ++oh)
                for (std::size_t ow = 0; ow < os[3]; ++ow, ++o) {
                    const long h0 = static_cast<long>(oh * s.stride) - static_cast<long>(s.pad);
                    const long w0 = static_cast<long>(ow * s.stride) - static_cast<long>(s.pad);
                    bool found = false;
                    T best{};
                    std::size_t at = 0;
                    for (long a = std::max(0L, h0); a < std::min(h, h0 + static_cast<long>(s.kh)); ++a)
                        for (long b = std::max(0L, w0); b < std::min(w, w0 + static_cast<long>(s.kw)); ++b) {
                            const std::size_t idx = base + static_cast<std::size_t>(a * w + b);
                            if (!found || x[idx] > best) {
                                best = x[idx];
                                at = idx;
                                found = true;
                            }
                        }
                    y[o] = best;
                    argmax_[o] = at;
                }
        }
        cached_ = true;
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) override {
        this->require_cache(cached_);
        if (dy.size() != argmax_.size()) throw ShapeError(this->spec_.name + ": gradient size mismatch");
        Tensor<T> dx(in_shape_);
        for (std::size_t o = 0; o < dy.size(); ++o) dx[argmax_[o]] += dy[o];
        return dx;
    }

    const std::vector<std::size_t>& argmax() const noexcept { return argmax_; }

private:
    Shape in_shape_;
    std::vector<std::size_t> argmax_;
    bool cached_ = false;
};

// ---------------------------------------------------------------------------

template <typename T>
class Dense final : public Layer<T> {
public:
    Dense(LayerSpec spec, std::size_t in_features)
        : Layer<T>(std::move(spec)), in_(in_features),
          weight_(this->spec_.name + ".weight", {this->spec_.filters, in_}, true),
          bias_(this->spec_.name + ".bias", {this->spec_.filters}, false) {
        if (in_ == 0) throw DomainError(this->spec_.name + ": zero input features");
    }

    Shape output_shape(const Shape& in) const override {
        this->require_rank(in, 2);
        if (in[1] != in_)
            throw ShapeError(this->spec_.name + ": input " + shape_string(in) + " incompatible with weights " +
                             shape_string(weight_.value.shape()));
        return {in[0], this->spec_.filters};
    }

    Tensor<T> forward(const Tensor<T>& x, Mode) override {
        const Shape os = output_shape(x.shape());
        input_ = x;
        cached_ = true;
        Tensor<T> y(os);
        const auto b = static_cast<Eigen::Index>(os[0]);
        const auto o = static_cast<Eigen::Index>(os[1]);
        const auto n = static_cast<Eigen::Index>(in_);
        const ConstMapRM<T> xm(x.data(), b, n);
        const ConstMapRM<T> w(weight_.value.data(), o, n);
        MapRM<T> ym(y.data(), b, o);
        ym.noalias() = xm * w.transpose();
        const Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bias(bias_.value.data(), o);
        ym.rowwise() += bias;
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) override {
        this->require_cache(cached_);
        const Shape os = output_shape(input_.shape());
        if (dy.shape() != os) throw ShapeError(this->spec_.name + ": gradient shape mismatch");
        const auto b = static_cast<Eigen::Index>(os[0]);
        const auto o = static_cast<Eigen::Index>(os[1]);
        const auto n = static_cast<Eigen::Index>(in_);
        const ConstMapRM<T> g(dy.data(), b, o);
        const ConstMapRM<T> xm(input_.data(), b, n);
        const ConstMapRM<T> w(weight_.value.data(), o, n);
        MapRM<T> dw(weight_.grad.data(), o, n);
        dw.noalias() += g.transpose() * xm;
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(bias_.grad.data(), o);
        db += g.colwise().sum();
        Tensor<T> dx(input_.shape());
        MapRM<T> dxm(dx.data(), b, n);
        dxm.noalias() = g * w;
        return dx;
    }

    std::vector<Parameter<T>*> parameters() override { return {&weight_, &bias_}; }

private:
    std::size_t in_;
    Parameter<T> weight_;
    Parameter<T> bias_;
    Tensor<T> input_;
    bool cached_ = false;
};

// ---------------------------------------------------------------------------

/// Pointwise activation; caches its output (ReLU, Tanh, Sigmoid derivatives
/// are all expressible in terms of the output).
template <typename T>
class Activation final : public Layer<T> {
public:
    explicit Activation(LayerSpec spec) : Layer<T>(std::move(spec)) {
        const auto k = this->spec_.kind;
        if (k != LayerKind::ReLU && k != LayerKind::Tanh && k != LayerKind::Sigmoid)
            throw DomainError(this->spec_.name + ": not an activation");
    }

    Shape output_shape(const Shape& in) const override { return in; }

    Tensor<T> forward(const Tensor<T>& x, Mode) override {
        Tensor<T> y = x;
        switch (this->spec_.kind) {
            case LayerKind::ReLU:
                for (auto& v : y.values()) v = v > T{} ? v : T{};
                break;
            case LayerKind::Tanh:
                for (auto& v : y.values()) v = std::tanh(v);
                break;
            default:
                for (auto& v : y.values()) v = v >= T{} ? T{1} / (T{1} + std::exp(-v)) : std::exp(v) / (T{1} + std::exp(v));
        }
        out_ = y;
        cached_ = true;
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) override {
        this->require_cache(cached_);
        if (dy.shape() != out_.shape()) throw ShapeError(this->spec_.name + ": gradient shape mismatch");
        Tensor<T> dx = dy;
        switch (this->spec_.kind) {
            case LayerKind::ReLU:
                for (std::size_t i = 0; i < dx.size(); ++i)
                    if (!(out_[i] > T{})) dx[i] = T{};
                break;
            case LayerKind::Tanh:
                for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= T{1} - out_[i] * out_[i];
                break;
            default:
                for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= out_[i] * (T{1} - out_[i]);
        }
        return dx;
    }

private:
    Tensor<T> out_;
    bool cached_ = false;
};

// ---------------------------------------------------------------------------

/// Inverted dropout: kept units are scaled by 1/(1-rate) in Train mode, Eval is identity.
template <typename T>
class Dropout final : public Layer<T> {
public:
    Dropout(LayerSpec spec, std::uint64_t seed) : Layer<T>(std::move(spec)), rng_(seed) {}

    Shape output_shape(const Shape& in) const override { return in; }

    void reseed(std::uint64_t seed) override { rng_.seed(seed); }

    Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
        const double rate = this->spec_.dropout_rate;
        active_ = mode == Mode::Train && rate > 0.0;
        cached_ = true;
        shape_ = x.shape();
        if (!active_) return x;
        const T scale = static_cast<T>(1.0 / (1.0 - rate));
        mask_.assign(x.size(), T{});
        Tensor<T> y = x;
        for (std::size_t i = 0; i < y.size(); ++i) {
            mask_[i] = uniform(rng_, 0.0, 1.0) >= rate ? scale : T{};
            y[i] *= mask_[i];
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) override {
        this->require_cache(cached_);
        if (dy.shape() != shape_) throw ShapeError(this->spec_.name + ": gradient shape mismatch");
        if (!active_) return dy;
        Tensor<T> dx = dy;
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= mask_[i];
        return dx;
    }

private:
    Rng rng_;
    std::vector<T> mask_;
    Shape shape_;
    bool active_ = false;
    bool cached_ = false;
};

// ---------------------------------------------------------------------------

template <typename T>
class Flatten final : public Layer<T> {
public:
    explicit Flatten(LayerSpec spec) : Layer<T>(std::move(spec)) {}

    Shape output_shape(const Shape& in) const override {
        if (in.empty()) throw ShapeError(this->spec_.name + ": scalar input");
        return {in[0], shape_size(in) / in[0]};
    }

    Tensor<T> forward(const Tensor<T>& x, Mode) override {
        in_shape_ = x.shape();
        cached_ = true;
        Tensor<T> y = x;
        y.reshape(output_shape(x.shape()));
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy) override {
        this->require_cache(cached_);
        Tensor<T> dx = dy;
        dx.reshape(in_shape_);
        return dx;
    }

private:
    Shape in_shape_;
    bool cached_ = false;
};

/// Builds a layer for input shape `in` (without the batch axis being relevant).
template <typename T>
std::unique_ptr<Layer<T>> make_layer(const LayerSpec& spec, const Shape& in, std::uint64_t seed) {
    switch (spec.kind) {
        case LayerKind::Conv:
            if (in.size() != 4) throw ShapeError(spec.name + ": conv needs NCHW input, got " + shape_string(in));
            return std::make_unique<Conv2d<T>>(spec, in[1]);
        case LayerKind::MaxPool: return std::make_unique<MaxPool2d<T>>(spec);
        case LayerKind::Dense:
            if (in.size() != 2) throw ShapeError(spec.name + ": dense needs flattened input, got " + shape_string(in));
            return std::make_unique<Dense<T>>(spec, in[1]);
        case LayerKind::ReLU:
        case LayerKind::Tanh:
        case LayerKind::Sigmoid: return std::make_unique<Activation<T>>(spec);
        case LayerKind::Dropout: return std::make_unique<Dropout<T>>(spec, seed);
        case LayerKind::Flatten: return std::make_unique<Flatten<T>>(spec);
    }
    throw DomainError("unknown layer kind");
}

}  // namespace qpi::cnn

#endif  // QPI_CNN_LAYERS_HPP
