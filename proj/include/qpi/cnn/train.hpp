#ifndef QPI_CNN_TRAIN_HPP
#define QPI_CNN_TRAIN_HPP

#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "qpi/cnn/model.hpp"
#include "qpi/error.hpp"
#include "qpi/random.hpp"

namespace qpi::cnn {

struct TrainConfig {
    double lr0 = 1e-4;
    double momentum = 0.9;
    double l2_lambda = 1e-3;
    std::size_t batch_size = 32;
    std::size_t epochs = 15;
    std::size_t lr_decay_every = 4;
    double lr_decay_gamma = 1.0;
    double init_std = 0.01;
    InitScheme init = InitScheme::Gaussian;
    std::uint64_t seed = 0;

    std::vector<std::string> violations() const {
        std::vector<std::string> v;
        if (!(lr0 > 0.0) || !std::isfinite(lr0)) v.push_back("lr0 must be positive");
        if (!(momentum >= 0.0 && momentum < 1.0)) v.push_back("momentum must be in [0,1)");
        if (!(l2_lambda >= 0.0) || !std::isfinite(l2_lambda)) v.push_back("l2_lambda must be non-negative");
        if (batch_size == 0) v.push_back("batch_size must be positive");
        if (epochs == 0) v.push_back("epochs must be positive");
        if (lr_decay_every == 0) v.push_back("lr_decay_every must be positive");
        if (!(lr_decay_gamma >= 0.0) || !std::isfinite(lr_decay_gamma)) v.push_back("lr_decay_gamma must be non-negative");
        if (!(init_std > 0.0) || !std::isfinite(init_std)) v.push_back("init_std must be positive");
        return v;
    }

    void validate() const {
        const auto v = violations();
        if (!v.empty()) throw DomainError(v.front());
    }

    bool operator==(const TrainConfig&) const = default;
};

/// The customised network initialised from a training config.
template <typename T>
Model<T> make_table1_model(const TrainConfig& cfg) {
    cfg.validate();
    return Model<T>(table1_specs(), {kInputChannels, kInputSide, kInputSide}, derive_seed(cfg.seed, "train:init"),
                    cfg.init_std, cfg.l2_lambda, cfg.init);
}

/// Inverse decay, stepped every `lr_decay_every` epochs.
inline double lr_schedule(std::size_t epoch, const TrainConfig& cfg) {
    const auto steps = static_cast<double>(epoch / cfg.lr_decay_every);
    return cfg.lr0 / (1.0 + cfg.lr_decay_gamma * steps);
}

/// v <- momentum*v - lr*g ; w <- w + v
template <typename T>
void sgd_step(Parameter<T>& p, double lr, double momentum) {
    if (p.grad.size() != p.value.size() || p.velocity.size() != p.value.size())
        throw ShapeError(p.name + ": parameter/gradient/velocity sizes differ");
    const T m = static_cast<T>(momentum);
    const T a = static_cast<T>(lr);
    for (std::size_t i = 0; i < p.value.size(); ++i) {
        p.velocity[i] = m * p.velocity[i] - a * p.grad[i];
        p.value[i] += p.velocity[i];
    }
}

template <typename T>
void sgd_step(Model<T>& model, double lr, double momentum) {
    for (auto* p : model.parameters()) sgd_step(*p, lr, momentum);
}

template <typename T>
struct Minibatch {
    Tensor<T> inputs;          // (B, C, H, W)
    std::vector<int> targets;  // 0/1
};

/// What the trainer needs from a data source.
template <typename S, typename T>
concept BatchSource = requires(S& s, std::uint64_t seed, std::size_t i) {
    { s.start_epoch(seed) };
    { s.batch_count() } -> std::convertible_to<std::size_t>;
    { s.batch(i) } -> std::convertible_to<Minibatch<T>>;
};

struct EpochLog {
    std::size_t epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;
    std::size_t batches = 0;
};

/// Raised when the loss turns non-finite; the model is restored to the last
/// parameters that produced a finite epoch before this is thrown.
class TrainingDiverged : public NumericFault {
public:
    TrainingDiverged(const std::string& what, std::size_t epoch) : NumericFault(what), epoch_(epoch) {}
    std::size_t epoch() const noexcept { return epoch_; }

private:
    std::size_t epoch_;
};

template <typename T>
struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
    std::vector<double> scores;
};

template <typename T, typename Source>
    requires BatchSource<Source, T>
EvalResult<T> evaluate(Model<T>& model, Source& src, double threshold = 0.5) {
    EvalResult<T> r;
    src.start_epoch(0);
    std::size_t n = 0, correct = 0;
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < src.batch_count(); ++b) {
        Minibatch<T> mb = src.batch(b);
        const Tensor<T> p = model.forward(mb.inputs, Mode::Eval);
        const auto [loss, grad] = bce_with_logits(model.logits(), mb.targets);
        (void)grad;
        loss_sum += loss * static_cast<double>(mb.targets.size());
        for (std::size_t i = 0; i < mb.targets.size(); ++i) {
            const double s = static_cast<double>(p[i]);
            r.scores.push_back(s);
            if ((s >= threshold ? 1 : 0) == mb.targets[i]) ++correct;
        }
        n += mb.targets.size();
    }
    if (n == 0) throw EmptyInputError("evaluation split is empty");
    r.loss = loss_sum / static_cast<double>(n);
    r.accuracy = static_cast<double>(correct) / static_cast<double>(n);
    return r;
}

using EpochCallback = std::function<void(const EpochLog&)>;

/// Minibatch SGD with momentum, L2 and the stepped inverse-decay schedule.
/// Per-epoch shuffling and dropout masks derive from cfg.seed.
template <typename T, typename TrainSrc, typename ValSrc>
    requires BatchSource<TrainSrc, T> && BatchSource<ValSrc, T>
std::vector<EpochLog> train(Model<T>& model, TrainSrc& train_src, ValSrc& val_src, const TrainConfig& cfg,
                            const EpochCallback& on_epoch = {}) {
    cfg.validate();
    model.set_l2_lambda(cfg.l2_lambda);
    std::vector<EpochLog> log;
    std::vector<Storage<T>> last_good;
    const auto snapshot = [&] {
        last_good.clear();
        for (auto* p : model.parameters()) last_good.push_back(p->value.values());
    };
    const auto restore = [&] {
        auto& ps = model.parameters();
        for (std::size_t i = 0; i < ps.size() && i < last_good.size(); ++i) ps[i]->value.values() = last_good[i];
    };
    snapshot();
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const std::string tag = "train:epoch:" + std::to_string(epoch);
        train_src.start_epoch(derive_seed(cfg.seed, tag + ":shuffle"));
        model.reseed_dropout(derive_seed(cfg.seed, tag + ":dropout"));
        EpochLog e;
        e.epoch = epoch;
        e.lr = lr_schedule(epoch, cfg);
        double loss_sum = 0.0;
        std::size_t seen = 0;
        for (std::size_t b = 0; b < train_src.batch_count(); ++b) {
            Minibatch<T> mb = train_src.batch(b);
            try {
                model.forward(mb.inputs, Mode::Train);
            } catch (const NumericFault& ex) {
                restore();
                throw TrainingDiverged(std::string("epoch ") + std::to_string(epoch) + ": " + ex.what(), epoch);
            }
            const auto [loss, grad] = bce_with_logits(model.logits(), mb.targets);
            if (!std::isfinite(loss)) {
                restore();
                throw TrainingDiverged("loss became non-finite in epoch " + std::to_string(epoch), epoch);
            }
            model.backward_from_logits(grad);
            sgd_step(model, e.lr, cfg.momentum);
            loss_sum += loss * static_cast<double>(mb.targets.size());
            seen += mb.targets.size();
            ++e.batches;
        }
        if (seen == 0) throw EmptyInputError("training split is empty");
        e.train_loss = loss_sum / static_cast<double>(seen);
        const EvalResult<T> v = evaluate(model, val_src);
        e.val_loss = v.loss;
        e.val_accuracy = v.accuracy;
        if (!std::isfinite(e.train_loss) || !std::isfinite(e.val_loss)) {
            restore();
            throw TrainingDiverged("loss became non-finite in epoch " + std::to_string(epoch), epoch);
        }
        snapshot();
        log.push_back(e);
        if (on_epoch) on_epoch(e);
    }
    return log;
}

}  // namespace qpi::cnn

#endif  // QPI_CNN_TRAIN_HPP
