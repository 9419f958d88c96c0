#ifndef QPI_CNN_MODEL_HPP
#define QPI_CNN_MODEL_HPP

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "qpi/cnn/layers.hpp"
#include "qpi/cnn/tensor.hpp"
#include "qpi/error.hpp"
#include "qpi/random.hpp"

namespace qpi::cnn {

inline constexpr std::size_t kInputSide = 120;
inline constexpr std::size_t kInputChannels = 3;

/// The customised network. conv5 uses ceil rounding so that 8x8 -> 5x5;
/// fc6 is a plain dense layer over the flattened 5x5x256 map.
inline std::vector<LayerSpec> table1_specs() {
    return {
        conv_spec("conv1", 3, 64, 1, 1),
        simple_spec(LayerKind::ReLU, "relu1"),
        conv_spec("conv2", 3, 96, 2, 2),
        simple_spec(LayerKind::ReLU, "relu2"),
        pool_spec("pool2", 2, 2),
        conv_spec("conv3", 2, 128, 2, 1),
        simple_spec(LayerKind::ReLU, "relu3"),
        dropout_spec("drop3", 0.2),
        conv_spec("conv4", 3, 256, 1, 1),
        simple_spec(LayerKind::ReLU, "relu4"),
        pool_spec("pool4", 2, 2),
        conv_spec("conv5", 3, 256, 2, 1, Rounding::Ceil),
        simple_spec(LayerKind::ReLU, "relu5"),
        simple_spec(LayerKind::Flatten, "flatten"),
        dense_spec("fc6", 1000),
        simple_spec(LayerKind::Tanh, "tanh6"),
        dropout_spec("drop6", 0.5),
        dense_spec("fc7", 1),
        simple_spec(LayerKind::Sigmoid, "sigmoid7"),
    };
}

enum class InitScheme : std::uint8_t { Gaussian, HeNormal };

inline const char* to_string(InitScheme s) { return s == InitScheme::HeNormal ? "he" : "gaussian"; }

inline InitScheme parse_init_scheme(const std::string& s) {
    if (s == "gaussian") return InitScheme::Gaussian;
    if (s == "he") return InitScheme::HeNormal;
    throw DomainError("unknown init scheme '" + s + "' (expected gaussian or he)");
}

struct TraceRow {
    std::string name;
    LayerKind kind;
    Shape output;
};

template <typename T>
class Model {
public:
    /// `input` is (C, H, W). Weights ~ N(0, init_std) (or N(0, 2/fan_in) for
    /// HeNormal), biases zero.
    Model(std::vector<LayerSpec> specs, Shape input, std::uint64_t seed, double init_std = 0.01,
          double l2_lambda = 0.0, InitScheme init = InitScheme::Gaussian)
        : specs_(std::move(specs)), input_(std::move(input)), l2_(l2_lambda) {
        if (input_.size() != 3) throw ShapeError("model input must be (C,H,W), got " + shape_string(input_));
        if (specs_.empty()) throw DomainError("model needs at least one layer");
        if (!(init_std >= 0.0)) throw DomainError("init std must be non-negative");
        Shape s{1, input_[0], input_[1], input_[2]};
        for (const auto& spec : specs_) {
            auto layer = make_layer<T>(spec, s, derive_seed(seed, "dropout:" + spec.name));
            s = layer->output_shape(s);
            layers_.push_back(std::move(layer));
        }
        for (auto& l : layers_)
            for (auto* p : l->parameters()) {
                if (p->decay) {
                    Rng rng(derive_seed(seed, "init:" + p->name));
                    const double fan_in = static_cast<double>(p->value.size() / p->value.dim(0));
                    const double sd = init == InitScheme::HeNormal ? std::sqrt(2.0 / fan_in) : init_std;
                    for (auto& v : p->value.values()) v = static_cast<T>(gaussian(rng, 0.0, sd));
                }
                params_.push_back(p);
            }
    }

    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;
    // Parameter pointers target heap-owned layers, so they survive a move.
    Model(Model&&) noexcept = default;
    Model& operator=(Model&&) noexcept = default;

    /// Runs every layer; the returned tensor is the network output (sigmoid
    /// probabilities for the binary head). NaN/Inf aborts naming the layer.
    Tensor<T> forward(const Tensor<T>& x, Mode mode) {
        check_input(x.shape());
        Tensor<T> h = x;
        has_logits_ = false;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            if (i + 1 == layers_.size() && layers_[i]->spec().kind == LayerKind::Sigmoid) {
                logits_ = h;
                has_logits_ = true;
            }
            h = layers_[i]->forward(h, mode);
            if (!h.all_finite()) throw NumericFault("non-finite activation after layer '" + layers_[i]->name() + "'");
        }
        if (!has_logits_) logits_ = h;
        cached_ = true;
        return h;
    }

    /// Pre-sigmoid head values of the last forward (equal to the output if no sigmoid head).
    const Tensor<T>& logits() const {
        if (!cached_) throw StateError("no forward pass cached");
        return logits_;
    }

    /// Gradient of the loss with respect to the network output.
    void backward(const Tensor<T>& grad_out) { run_backward(grad_out, layers_.size()); }

    /// Gradient with respect to the pre-sigmoid logits; skips the final sigmoid
    /// (the BCE + sigmoid pair reduces to p - y).
    void backward_from_logits(const Tensor<T>& grad_logits) {
        run_backward(grad_logits, has_logits_ ? layers_.size() - 1 : layers_.size());
    }

    void zero_grad() {
        for (auto* p : params_) p->grad.fill(T{});
    }

    std::vector<Parameter<T>*>& parameters() noexcept { return params_; }
    const std::vector<LayerSpec>& specs() const noexcept { return specs_; }
    const Shape& input_shape() const noexcept { return input_; }
    std::size_t layer_count() const noexcept { return layers_.size(); }
    Layer<T>& layer(std::size_t i) { return *layers_.at(i); }

    double l2_lambda() const noexcept { return l2_; }
    void set_l2_lambda(double l) {
        if (!(l >= 0.0)) throw DomainError("l2 lambda must be non-negative");
        l2_ = l;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto* p : params_) n += p->value.size();
        return n;
    }

    std::vector<TraceRow> trace(std::size_t batch = 1) const {
        std::vector<TraceRow> rows;
        Shape s{batch, input_[0], input_[1], input_[2]};
        for (const auto& l : layers_) {
            s = l->output_shape(s);
            rows.push_back({l->name(), l->spec().kind, s});
        }
        return rows;
    }

    void reseed_dropout(std::uint64_t seed) {
        for (auto& l : layers_) l->reseed(derive_seed(seed, "dropout:" + l->name()));
    }

private:
    void check_input(const Shape& s) const {
        if (s.size() != 4 || s[1] != input_[0] || s[2] != input_[1] || s[3] != input_[2])
            throw ShapeError("batch " + shape_string(s) + " does not match model input (B," +
                             std::to_string(input_[0]) + "," + std::to_string(input_[1]) + "," +
                             std::to_string(input_[2]) + ")");
    }

    void run_backward(const Tensor<T>& grad, std::size_t end) {
        if (!cached_) throw StateError("backward called without a cached forward pass");
        zero_grad();
        Tensor<T> g = grad;
        for (std::size_t i = end; i-- > 0;) g = layers_[i]->backward(g);
        if (l2_ > 0.0) {
            const T lam = static_cast<T>(l2_);
            for (auto* p : params_)
                if (p->decay)
                    for (std::size_t k = 0; k < p->value.size(); ++k) p->grad[k] += lam * p->value[k];
        }
    }

    std::vector<LayerSpec> specs_;
    Shape input_;
    double l2_;
    std::vector<std::unique_ptr<Layer<T>>> layers_;
    std::vector<Parameter<T>*> params_;
    Tensor<T> logits_;
    bool has_logits_ = false;
    bool cached_ = false;
};

/// Mean binary cross-entropy over a (B,1) logit tensor, and its gradient
/// (sigmoid(z) - y) / B with respect to the logits.
template <typename T>
std::pair<double, Tensor<T>> bce_with_logits(const Tensor<T>& logits, const std::vector<int>& targets) {
    if (logits.size() != targets.size() || targets.empty())
        throw ShapeError("logits " + shape_string(logits.shape()) + " vs " + std::to_string(targets.size()) +
                         " targets");
    double loss = 0.0;
    Tensor<T> grad(logits.shape());
    const double inv_b = 1.0 / static_cast<double>(targets.size());
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const double z = static_cast<double>(logits[i]);
        const double y = targets[i] ? 1.0 : 0.0;
        loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
        const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
        grad[i] = static_cast<T>((p - y) * inv_b);
    }
    return {loss * inv_b, grad};
}

}  // namespace qpi::cnn

#endif  // QPI_CNN_MODEL_HPP
