#ifndef QPI_CNN_CHECKPOINT_HPP
#define QPI_CNN_CHECKPOINT_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "qpi/cnn/model.hpp"
#include "qpi/cnn/train.hpp"
#include "qpi/io.hpp"

namespace qpi::cnn {

/// Everything besides the weights that predict needs: the training config,
/// task name and the frozen input standardisation.
struct CheckpointMeta {
    TrainConfig config;
    std::string task = "hvi";
    std::array<double, 3> norm_mean{0.0, 0.0, 0.0};
    std::array<double, 3> norm_std{1.0, 1.0, 1.0};
    bool operator==(const CheckpointMeta&) const = default;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// "QPN1" | u32 version | u32 C,H,W | u32 n_layers | layer table | u32 n_params |
// per param: u16 name length, name, u64 count, count x f32
template <typename T>
std::string encode_checkpoint(Model<T>& model) {
    io::Writer w;
    w.raw("QPN1");
    w.put(kCheckpointVersion);
    for (auto d : model.input_shape()) w.put(static_cast<std::uint32_t>(d));
    w.put(static_cast<std::uint32_t>(model.specs().size()));
    for (const auto& s : model.specs()) {
        w.put(static_cast<std::uint8_t>(s.kind));
        w.put(static_cast<std::uint8_t>(s.rounding));
        w.put(static_cast<std::uint16_t>(s.name.size()));
        w.raw(s.name);
        for (auto v : {s.kh, s.kw, s.filters, s.stride, s.pad}) w.put(static_cast<std::uint32_t>(v));
        w.put(s.dropout_rate);
    }
    w.put(static_cast<std::uint32_t>(model.parameters().size()));
    for (const auto* p : model.parameters()) {
        w.put(static_cast<std::uint16_t>(p->name.size()));
        w.raw(p->name);
        w.put(static_cast<std::uint64_t>(p->value.size()));
        for (const T& v : p->value.values()) w.put(static_cast<float>(v));
    }
    return w.bytes();
}

template <typename T>
Model<T> decode_checkpoint(io::Reader r) {
    io::expect_magic(r, "QPN1");
    if (const auto v = r.get<std::uint32_t>(); v != kCheckpointVersion)
        throw FormatError(r.origin() + ": unsupported checkpoint version " + std::to_string(v));
    Shape input(3);
    for (auto& d : input) d = r.get<std::uint32_t>();
    const auto nl = r.get<std::uint32_t>();
    if (nl == 0 || nl > 4096) throw FormatError(r.origin() + ": implausible layer count");
    std::vector<LayerSpec> specs;
    for (std::uint32_t i = 0; i < nl; ++i) {
        LayerSpec s;
        const auto kind = r.get<std::uint8_t>();
        const auto rounding = r.get<std::uint8_t>();
        if (kind > static_cast<std::uint8_t>(LayerKind::Flatten) || rounding > 1)
            throw FormatError(r.origin() + ": bad layer record " + std::to_string(i));
        s.kind = static_cast<LayerKind>(kind);
        s.rounding = static_cast<Rounding>(rounding);
        s.name = r.raw(r.get<std::uint16_t>());
        s.kh = r.get<std::uint32_t>();
        s.kw = r.get<std::uint32_t>();
        s.filters = r.get<std::uint32_t>();
        s.stride = r.get<std::uint32_t>();
        s.pad = r.get<std::uint32_t>();
        s.dropout_rate = r.get<double>();
        specs.push_back(std::move(s));
    }
    Model<T> model(std::move(specs), input, 0, 0.0);
    const auto np = r.get<std::uint32_t>();
    if (np != model.parameters().size())
        throw FormatError(r.origin() + ": parameter table has " + std::to_string(np) + " entries, layers need " +
                          std::to_string(model.parameters().size()));
    for (auto* p : model.parameters()) {
        const std::string name = r.raw(r.get<std::uint16_t>());
        const auto count = r.get<std::uint64_t>();
        if (name != p->name || count != p->value.size())
            throw FormatError(r.origin() + ": parameter '" + name + "' does not match layer '" + p->name + "'");
        for (auto& v : p->value.values()) v = static_cast<T>(r.get<float>());
    }
    if (r.remaining() != 0) throw FormatError(r.origin() + ": trailing bytes after parameters");
    return model;
}

inline std::string format_meta(const CheckpointMeta& m) {
    std::ostringstream os;
    const auto& c = m.config;
    const auto d = [](double v) { return io::format_real(v); };
    os << "[train]\n";
    os << "lr0 = " << d(c.lr0) << "\nmomentum = " << d(c.momentum) << "\nl2_lambda = " << d(c.l2_lambda)
       << "\nbatch_size = " << c.batch_size << "\nepochs = " << c.epochs << "\nlr_decay_every = " << c.lr_decay_every
       << "\nlr_decay_gamma = " << d(c.lr_decay_gamma) << "\ninit = " << to_string(c.init)
       << "\ninit_std = " << d(c.init_std) << "\nseed = " << c.seed << "\n";
    os << "[model]\ntask = " << m.task << "\n";
    for (std::size_t i = 0; i < 3; ++i)
        os << "norm_mean_" << i << " = " << d(m.norm_mean[i]) << "\nnorm_std_" << i << " = " << d(m.norm_std[i]) << "\n";
    return os.str();
}

inline CheckpointMeta parse_meta(const std::string& text, const std::string& origin = "sidecar") {
    boost::property_tree::ptree kv;
    try {
        std::istringstream is(text);
        boost::property_tree::ini_parser::read_ini(is, kv);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw FormatError(origin + ": line " + std::to_string(e.line()) + ": " + e.message());
    }
    const auto get = [&](const std::string& k) {
        const auto v = kv.get_optional<std::string>(k);
        if (!v) throw FormatError(origin + ": missing key '" + k + "'");
        return *v;
    };
    CheckpointMeta m;
    try {
        auto& c = m.config;
        c.lr0 = std::stod(get("train.lr0"));
        c.momentum = std::stod(get("train.momentum"));
        c.l2_lambda = std::stod(get("train.l2_lambda"));
        c.batch_size = std::stoul(get("train.batch_size"));
        c.epochs = std::stoul(get("train.epochs"));
        c.lr_decay_every = std::stoul(get("train.lr_decay_every"));
        c.lr_decay_gamma = std::stod(get("train.lr_decay_gamma"));
        c.init = parse_init_scheme(get("train.init"));
        c.init_std = std::stod(get("train.init_std"));
        c.seed = std::stoull(get("train.seed"));
        m.task = get("model.task");
        for (std::size_t i = 0; i < 3; ++i) {
            m.norm_mean[i] = std::stod(get("model.norm_mean_" + std::to_string(i)));
            m.norm_std[i] = std::stod(get("model.norm_std_" + std::to_string(i)));
        }
    } catch (const FormatError&) {
        throw;
    } catch (const std::exception& e) {
        throw FormatError(origin + ": " + e.what());
    }
    return m;
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& ckpt) { return ckpt.string() + ".cfg"; }

template <typename T>
void save_checkpoint(const std::filesystem::path& path, Model<T>& model, const CheckpointMeta& meta) {
    io::write_file(path, encode_checkpoint(model));
    io::write_text(sidecar_path(path), format_meta(meta));
}

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta = nullptr) {
    if (meta) *meta = parse_meta(io::read_text(sidecar_path(path)), sidecar_path(path).string());
    return decode_checkpoint<T>(io::Reader(io::read_file(path), path.string()));
}

}  // namespace qpi::cnn

#endif  // QPI_CNN_CHECKPOINT_HPP
