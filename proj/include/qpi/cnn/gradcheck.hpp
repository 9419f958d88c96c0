#ifndef QPI_CNN_GRADCHECK_HPP
#define QPI_CNN_GRADCHECK_HPP

#include <algorithm>
#include <cmath>
#include <string>

#include "qpi/cnn/model.hpp"
#include "qpi/random.hpp"

namespace qpi::cnn {

/// Largest relative disagreement between analytic and central-difference gradients.
struct GradCheck {
    double max_rel_error = 0.0;
    std::string worst;  // "<layer>:<input|param name>[index]"
    std::size_t checked = 0;

    void add(double analytic, double numeric, const std::string& where) {
        const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
        const double e = std::abs(analytic - numeric) / denom;
        ++checked;
        if (e > max_rel_error) {
            max_rel_error = e;
            worst = where;
        }
    }
    void merge(const GradCheck& o) {
        checked += o.checked;
        if (o.max_rel_error > max_rel_error) {
            max_rel_error = o.max_rel_error;
            worst = o.worst;
        }
    }
};

namespace detail {

inline double dot(const Tensor<double>& a, const Tensor<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

/// Up to `limit` indices spread over [0, n).
inline std::vector<std::size_t> probe_indices(std::size_t n, std::size_t limit) {
    std::vector<std::size_t> out;
    if (n <= limit) {
        for (std::size_t i = 0; i < n; ++i) out.push_back(i);
        return out;
    }
    for (std::size_t k = 0; k < limit; ++k) out.push_back(k * n / limit);
    return out;
}

}  // namespace detail

/// Checks one layer on loss = sum(y * r) for a fixed random r. Dropout runs in
/// train mode with its mask pinned by reseeding before every forward.
inline GradCheck check_layer(Layer<double>& layer, const Tensor<double>& x, std::uint64_t seed, double eps = 1e-6,
                             std::size_t probes = 200) {
    Rng rng(seed);
    const auto fwd = [&](const Tensor<double>& in) {
        layer.reseed(seed);
        return layer.forward(in, Mode::Train);
    };
    const Tensor<double> y0 = fwd(x);
    Tensor<double> r(y0.shape());
    for (auto& v : r.values()) v = gaussian(rng, 0.0, 1.0);
    for (auto* p : layer.parameters()) p->grad.fill(0.0);
    fwd(x);
    const Tensor<double> dx = layer.backward(r);

    GradCheck gc;
    Tensor<double> xp = x;
    for (std::size_t i : detail::probe_indices(x.size(), probes)) {
        const double keep = xp[i];
        xp[i] = keep + eps;
        const double up = detail::dot(fwd(xp), r);
        xp[i] = keep - eps;
        const double dn = detail::dot(fwd(xp), r);
        xp[i] = keep;
        gc.add(dx[i], (up - dn) / (2 * eps), layer.name() + ":input[" + std::to_string(i) + "]");
    }
    for (auto* p : layer.parameters()) {
        const Tensor<double> g = p->grad;
        for (std::size_t i : detail::probe_indices(p->value.size(), probes)) {
            const double keep = p->value[i];
            p->value[i] = keep + eps;
            const double up = detail::dot(fwd(x), r);
            p->value[i] = keep - eps;
            const double dn = detail::dot(fwd(x), r);
            p->value[i] = keep;
            gc.add(g[i], (up - dn) / (2 * eps), p->name + "[" + std::to_string(i) + "]");
        }
    }
    return gc;
}

/// Whole-model check on mean BCE (through the sigmoid head) plus the L2 term
/// lambda/2 * |w|^2 that backward adds.
inline GradCheck check_model(Model<double>& model, const Tensor<double>& x, const std::vector<int>& targets,
                             std::uint64_t seed, double eps = 1e-6, std::size_t probes = 60) {
    const auto loss = [&] {
        model.reseed_dropout(seed);
        model.forward(x, Mode::Train);
        double l = bce_with_logits(model.logits(), targets).first;
        for (const auto* p : model.parameters())
            if (p->decay)
                for (double w : p->value.values()) l += 0.5 * model.l2_lambda() * w * w;
        return l;
    };
    model.reseed_dropout(seed);
    model.forward(x, Mode::Train);
    model.backward_from_logits(bce_with_logits(model.logits(), targets).second);

    GradCheck gc;
    for (auto* p : model.parameters()) {
        const Tensor<double> g = p->grad;
        for (std::size_t i : detail::probe_indices(p->value.size(), probes)) {
            const double keep = p->value[i];
            p->value[i] = keep + eps;
            const double up = loss();
            p->value[i] = keep - eps;
            const double dn = loss();
            p->value[i] = keep;
            gc.add(g[i], (up - dn) / (2 * eps), p->name + "[" + std::to_string(i) + "]");
        }
    }
    return gc;
}

}  // namespace qpi::cnn

#endif  // QPI_CNN_GRADCHECK_HPP
