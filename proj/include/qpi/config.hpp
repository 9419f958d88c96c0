#ifndef QPI_CONFIG_HPP
#define QPI_CONFIG_HPP

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "qpi/cnn/model.hpp"
#include "qpi/cnn/train.hpp"
#include "qpi/dataset.hpp"
#include "qpi/error.hpp"
#include "qpi/forward_model.hpp"
#include "qpi/io.hpp"
#include "qpi/patch_extraction.hpp"
#include "qpi/phase_retrieval.hpp"

namespace qpi::config {

struct SynthSection {
    std::size_t subjects_per_class = 10;
    std::size_t fovs_per_subject = 7;
    int cells_per_fov = 5;
    std::size_t canvas = forward::kDefaultCanvas;
    Carrier carrier = forward::kDefaultCarrier;
    bool snap_carrier = true;
    double background = 100.0;
    double modulation = 0.8;
    double noise_sigma = 0.5;
    bool allow_overlap = false;
    bool operator==(const SynthSection&) const = default;
};

struct RetrieveSection {
    double radius_fraction = 0.75;
    std::optional<double> radius_bins;
    bool hann_window = false;
    bool plane_fit = true;
    bool operator==(const RetrieveSection&) const = default;
};

struct ExtractSection {
    int window = patches::kDefaultWindow;
    int bins = patches::kDefaultBins;
    double threshold = patches::kDefaultEntropyThreshold;
    std::size_t min_area = patches::kDefaultMinArea;
    double min_seed_separation_px = 10.0;
    double min_seed_distance_px = 8.0;
    bool operator==(const ExtractSection&) const = default;
};

struct DatasetSection {
    std::size_t per_class = 0;  // 0: smallest class in the balancing scope
    std::string split = "fractions";  // fractions | paper | file
    double train_fraction = 0.6, val_fraction = 0.2, test_fraction = 0.2;
    std::string split_file;
    bool augment_train = false;
    bool augment_val = false;
    bool channels_as_samples = false;
    dataset::BalanceScope scope = dataset::BalanceScope::Train;
    bool operator==(const DatasetSection&) const = default;
};

struct EvalSection {
    double threshold = 0.5;
    std::size_t timing_repeats = 10;
    bool operator==(const EvalSection&) const = default;
};

struct PipelineConfig {
    std::uint64_t seed = 20240601;
    SynthSection synth;
    RetrieveSection retrieve;
    ExtractSection extract;
    DatasetSection dataset;
    cnn::TrainConfig train;
    std::vector<dataset::Task> tasks{dataset::Task::HealthyVsInfected, dataset::Task::EarlyVsLate};
    EvalSection eval;

    PipelineConfig() { train.init = cnn::InitScheme::HeNormal; }
    bool operator==(const PipelineConfig&) const = default;

    Carrier effective_carrier() const {
        return synth.snap_carrier ? forward::snap_carrier(synth.carrier, synth.canvas, synth.canvas) : synth.carrier;
    }

    retrieval::RetrievalConfig retrieval_config() const {
        retrieval::RetrievalConfig rc;
        rc.radius_fraction = retrieve.radius_fraction;
        rc.filter_radius_bins = retrieve.radius_bins;
        rc.hann_window = retrieve.hann_window;
        rc.plane_fit = retrieve.plane_fit;
        return rc;
    }

    patches::ExtractionConfig extraction_config() const {
        patches::ExtractionConfig ec;
        ec.window_px = extract.window;
        ec.bins = extract.bins;
        ec.entropy_threshold = extract.threshold;
        ec.min_area = extract.min_area;
        ec.split.min_seed_separation_px = extract.min_seed_separation_px;
        ec.split.min_seed_distance_px = extract.min_seed_distance_px;
        return ec;
    }
};

/// Cross-checks against each module's preconditions. Empty means valid.
inline std::vector<std::string> validate_config(const PipelineConfig& c) {
    std::vector<std::string> v;
    const auto& s = c.synth;
    if (s.subjects_per_class == 0) v.push_back("synth.subjects_per_class must be >= 1");
    if (s.fovs_per_subject == 0) v.push_back("synth.fovs_per_subject must be >= 1");
    if (s.cells_per_fov < 0) v.push_back("synth.cells_per_fov must be >= 0");
    if (s.canvas < 64) v.push_back("synth.canvas must be >= 64 px");
    if (!(s.background > 0)) v.push_back("synth.background must be positive");
    if (!(s.modulation > 0 && s.modulation <= 1)) v.push_back("synth.modulation must be in (0,1]");
    if (!(s.noise_sigma >= 0)) v.push_back("synth.noise_sigma must be >= 0");

    const Carrier k = s.canvas > 0 ? c.effective_carrier() : s.carrier;
    const bool carrier_ok = std::abs(k.fx) < 0.5 && std::abs(k.fy) < 0.5 && (k.fx != 0 || k.fy != 0);
    if (!carrier_ok) v.push_back("synth.carrier must be non-zero and below 0.5 cycles/px on both axes (aliasing)");

    const auto& r = c.retrieve;
    if (!(r.radius_fraction > 0 && r.radius_fraction < 1)) v.push_back("retrieve.radius_fraction must be in (0,1)");
    if (carrier_ok && s.canvas > 0) {
        const double n = static_cast<double>(s.canvas);
        const double dist = std::hypot(k.fx * n, k.fy * n);
        const double radius = r.radius_bins ? *r.radius_bins : r.radius_fraction * dist;
        if (radius < 2.0) v.push_back("filter radius must be >= 2 bins");
        if (dist <= radius)
            v.push_back("filter radius " + io::format_real(radius) + " bins reaches DC from the carrier at " +
                        io::format_real(dist) + " bins (order overlap)");
        if (std::abs(k.fx * n) + radius > n / 2 || std::abs(k.fy * n) + radius > n / 2)
            v.push_back("filter window extends beyond Nyquist");
    }

    const auto& e = c.extract;
    if (e.window < 3 || e.window % 2 == 0) v.push_back("extract.window must be odd and >= 3");
    if (e.bins < 2) v.push_back("extract.bins must be >= 2");
    if (!(e.threshold >= 0)) v.push_back("extract.threshold must be >= 0");
    if (e.min_area == 0) v.push_back("extract.min_area must be >= 1");
    if (!(e.min_seed_separation_px > 0)) v.push_back("extract.min_seed_separation_px must be positive");
    if (!(e.min_seed_distance_px >= 0)) v.push_back("extract.min_seed_distance_px must be >= 0");

    const auto& d = c.dataset;
    if (d.split == "fractions") {
        if (!(d.train_fraction > 0 && d.val_fraction > 0 && d.test_fraction >= 0))
            v.push_back("dataset fractions: train and val must be positive, test non-negative");
        else if (s.subjects_per_class < (d.test_fraction > 0 ? 3u : 2u))
            v.push_back("dataset: too few subjects per class for a subject-disjoint split");
    } else if (d.split == "paper") {
        // synth makes the paper's 8/15/13 subjects itself; subjects_per_class is ignored
    } else if (d.split == "file") {
        if (d.split_file.empty()) v.push_back("dataset.split = file needs dataset.split_file");
    } else {
        v.push_back("dataset.split must be fractions, paper or file");
    }

    for (const auto& msg : c.train.violations()) v.push_back("train." + msg);
    if (c.tasks.empty()) v.push_back("run.tasks must name at least one of hvi, evl");

    // Upper bound on one task's training set: every train subject, every cell.
    if (d.split == "fractions" && d.train_fraction > 0 && s.cells_per_fov > 0) {
        const double share = d.train_fraction / (d.train_fraction + d.val_fraction + d.test_fraction);
        const double train_subjects = std::ceil(share * static_cast<double>(s.subjects_per_class)) * 3.0;
        const double max_train = train_subjects * static_cast<double>(s.fovs_per_subject * s.cells_per_fov);
        if (max_train < static_cast<double>(c.train.batch_size))
            v.push_back("train.batch_size " + std::to_string(c.train.batch_size) + " exceeds the largest possible training set (" +
                        io::format_real(max_train) + " patches)");
    }
    if (!(c.eval.threshold >= 0 && c.eval.threshold <= 1)) v.push_back("eval.threshold must be in [0,1]");
    if (c.eval.timing_repeats < 10) v.push_back("eval.timing_repeats must be >= 10");
    return v;
}

namespace detail {

using boost::property_tree::ptree;

inline bool parse_bool(const std::string& key, const std::string& s) {
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ConfigError(key + ": expected a boolean, got '" + s + "'");
}

template <typename T>
T parse_number(const std::string& key, const std::string& s) {
    try {
        std::size_t used = 0;
        T v{};
        if constexpr (std::is_floating_point_v<T>)
            v = static_cast<T>(std::stod(s, &used));
        else if constexpr (std::is_signed_v<T>)
            v = static_cast<T>(std::stoll(s, &used));
        else {
            if (!s.empty() && s[0] == '-') throw std::invalid_argument("negative");
            v = static_cast<T>(std::stoull(s, &used));
        }
        if (used != s.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw ConfigError(key + ": cannot parse '" + s + "' as a number");
    }
}

/// Reads keys of one section, rejecting unknown ones.
class Section {
public:
    Section(const ptree& root, std::string name) : name_(std::move(name)) {
        if (const auto child = root.get_child_optional(name_)) node_ = &*child;
    }
    ~Section() = default;

    template <typename T>
    void read(const std::string& key, T& out) {
        seen_.insert(key);
        if (!node_) return;
        const auto v = node_->get_optional<std::string>(key);
        if (!v) return;
        const std::string full = name_ + "." + key;
        if constexpr (std::is_same_v<T, bool>)
            out = parse_bool(full, *v);
        else if constexpr (std::is_same_v<T, std::string>)
            out = *v;
        else
            out = parse_number<T>(full, *v);
    }

    void read_optional(const std::string& key, std::optional<double>& out) {
        seen_.insert(key);
        if (!node_) return;
        const auto v = node_->get_optional<std::string>(key);
        if (!v) return;
        if (*v == "auto" || v->empty())
            out.reset();
        else
            out = parse_number<double>(name_ + "." + key, *v);
    }

    void check_unknown() const {
        if (!node_) return;
        for (const auto& [k, _] : *node_)
            if (!seen_.count(k)) throw ConfigError("unknown key '" + name_ + "." + k + "'");
    }

private:
    std::string name_;
    const ptree* node_ = nullptr;
    std::set<std::string> seen_;
};

}  // namespace detail

/// Parses the sectioned key/value document; unknown sections or keys and
/// malformed values raise ConfigError. Semantic checks are separate.
inline PipelineConfig parse_config(const std::string& text, const std::string& origin = "config") {
    using detail::ptree;
    ptree root;
    try {
        std::istringstream is(text);
        boost::property_tree::ini_parser::read_ini(is, root);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(origin + ": line " + std::to_string(e.line()) + ": " + e.message());
    }
    static const std::set<std::string> sections{"run", "synth", "retrieve", "extract", "dataset", "train", "eval"};
    for (const auto& [k, node] : root) {
        if (!sections.count(k)) throw ConfigError(origin + ": unknown section or top-level key '" + k + "'");
    }
    PipelineConfig c;
    try {
        detail::Section run(root, "run");
        run.read("seed", c.seed);
        std::string tasks;
        run.read("tasks", tasks);
        if (!tasks.empty()) {
            c.tasks.clear();
            std::istringstream ts(tasks);
            std::string t;
            while (ts >> t) c.tasks.push_back(dataset::parse_task(t));
        }
        run.check_unknown();

        detail::Section sy(root, "synth");
        auto& s = c.synth;
        sy.read("subjects_per_class", s.subjects_per_class);
        sy.read("fovs_per_subject", s.fovs_per_subject);
        sy.read("cells_per_fov", s.cells_per_fov);
        sy.read("canvas", s.canvas);
        sy.read("carrier_fx", s.carrier.fx);
        sy.read("carrier_fy", s.carrier.fy);
        sy.read("snap_carrier", s.snap_carrier);
        sy.read("background", s.background);
        sy.read("modulation", s.modulation);
        sy.read("noise_sigma", s.noise_sigma);
        sy.read("allow_overlap", s.allow_overlap);
        sy.check_unknown();

        detail::Section re(root, "retrieve");
        re.read("radius_fraction", c.retrieve.radius_fraction);
        re.read_optional("radius_bins", c.retrieve.radius_bins);
        re.read("hann_window", c.retrieve.hann_window);
        re.read("plane_fit", c.retrieve.plane_fit);
        re.check_unknown();

        detail::Section ex(root, "extract");
        ex.read("window", c.extract.window);
        ex.read("bins", c.extract.bins);
        ex.read("threshold", c.extract.threshold);
        ex.read("min_area", c.extract.min_area);
        ex.read("min_seed_separation_px", c.extract.min_seed_separation_px);
        ex.read("min_seed_distance_px", c.extract.min_seed_distance_px);
        ex.check_unknown();

        detail::Section ds(root, "dataset");
        auto& d = c.dataset;
        ds.read("per_class", d.per_class);
        ds.read("split", d.split);
        ds.read("train_fraction", d.train_fraction);
        ds.read("val_fraction", d.val_fraction);
        ds.read("test_fraction", d.test_fraction);
        ds.read("split_file", d.split_file);
        ds.read("augment_train", d.augment_train);
        ds.read("augment_val", d.augment_val);
        ds.read("channels_as_samples", d.channels_as_samples);
        std::string scope;
        ds.read("balance_scope", scope);
        if (scope == "train_val")
            d.scope = dataset::BalanceScope::TrainVal;
        else if (scope == "train" || scope.empty())
            d.scope = dataset::BalanceScope::Train;
        else
            throw ConfigError("dataset.balance_scope must be train or train_val");
        ds.check_unknown();

        detail::Section tr(root, "train");
        auto& t = c.train;
        tr.read("lr0", t.lr0);
        tr.read("momentum", t.momentum);
        tr.read("l2_lambda", t.l2_lambda);
        tr.read("batch_size", t.batch_size);
        tr.read("epochs", t.epochs);
        tr.read("lr_decay_every", t.lr_decay_every);
        tr.read("lr_decay_gamma", t.lr_decay_gamma);
        tr.read("init_std", t.init_std);
        std::string init;
        tr.read("init", init);
        if (!init.empty()) t.init = cnn::parse_init_scheme(init);
        tr.check_unknown();

        detail::Section ev(root, "eval");
        ev.read("threshold", c.eval.threshold);
        ev.read("timing_repeats", c.eval.timing_repeats);
        ev.check_unknown();
    } catch (const ConfigError& e) {
        throw ConfigError(origin + ": " + e.what());
    } catch (const Error& e) {
        throw ConfigError(origin + ": " + e.what());
    }
    c.train.seed = derive_seed(c.seed, "train");
    return c;
}

/// Canonical text form; parse_config(format_config(c)) == c.
inline std::string format_config(const PipelineConfig& c) {
    const auto f = [](double v) { return io::format_real(v); };
    const auto b = [](bool v) { return v ? "true" : "false"; };
    std::ostringstream os;
    os << "[run]\nseed = " << c.seed << "\ntasks =";
    for (auto t : c.tasks) os << ' ' << dataset::to_string(t);
    const auto& s = c.synth;
    os << "\n\n[synth]\nsubjects_per_class = " << s.subjects_per_class << "\nfovs_per_subject = " << s.fovs_per_subject
       << "\ncells_per_fov = " << s.cells_per_fov << "\ncanvas = " << s.canvas << "\ncarrier_fx = " << f(s.carrier.fx)
       << "\ncarrier_fy = " << f(s.carrier.fy) << "\nsnap_carrier = " << b(s.snap_carrier)
       << "\nbackground = " << f(s.background) << "\nmodulation = " << f(s.modulation)
       << "\nnoise_sigma = " << f(s.noise_sigma) << "\nallow_overlap = " << b(s.allow_overlap);
    const auto& r = c.retrieve;
    os << "\n\n[retrieve]\nradius_fraction = " << f(r.radius_fraction)
       << "\nradius_bins = " << (r.radius_bins ? f(*r.radius_bins) : std::string("auto"))
       << "\nhann_window = " << b(r.hann_window) << "\nplane_fit = " << b(r.plane_fit);
    const auto& e = c.extract;
    os << "\n\n[extract]\nwindow = " << e.window << "\nbins = " << e.bins << "\nthreshold = " << f(e.threshold)
       << "\nmin_area = " << e.min_area << "\nmin_seed_separation_px = " << f(e.min_seed_separation_px)
       << "\nmin_seed_distance_px = " << f(e.min_seed_distance_px);
    const auto& d = c.dataset;
    os << "\n\n[dataset]\nper_class = " << d.per_class << "\nsplit = " << d.split
       << "\ntrain_fraction = " << f(d.train_fraction) << "\nval_fraction = " << f(d.val_fraction)
       << "\ntest_fraction = " << f(d.test_fraction) << "\nsplit_file = " << d.split_file
       << "\naugment_train = " << b(d.augment_train) << "\naugment_val = " << b(d.augment_val)
       << "\nchannels_as_samples = " << b(d.channels_as_samples)
       << "\nbalance_scope = " << (d.scope == dataset::BalanceScope::TrainVal ? "train_val" : "train");
    const auto& t = c.train;
    os << "\n\n[train]\nlr0 = " << f(t.lr0) << "\nmomentum = " << f(t.momentum) << "\nl2_lambda = " << f(t.l2_lambda)
       << "\nbatch_size = " << t.batch_size << "\nepochs = " << t.epochs << "\nlr_decay_every = " << t.lr_decay_every
       << "\nlr_decay_gamma = " << f(t.lr_decay_gamma) << "\ninit = " << cnn::to_string(t.init)
       << "\ninit_std = " << f(t.init_std);
    os << "\n\n[eval]\nthreshold = " << f(c.eval.threshold) << "\ntiming_repeats = " << c.eval.timing_repeats << "\n";
    return os.str();
}

/// Parse and validate; violations are joined into one ConfigError.
inline PipelineConfig load_config(const std::filesystem::path& p) {
    PipelineConfig c = parse_config(io::read_text(p), p.string());
    const auto v = validate_config(c);
    if (!v.empty()) {
        std::string msg = p.string() + ": invalid configuration";
        for (const auto& m : v) msg += "\n  - " + m;
        throw ConfigError(msg);
    }
    return c;
}

}  // namespace qpi::config

#endif  // QPI_CONFIG_HPP
