#ifndef QPI_DATASET_HPP
#define QPI_DATASET_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "qpi/cnn/train.hpp"
#include "qpi/error.hpp"
#include "qpi/forward_model.hpp"
#include "qpi/io.hpp"
#include "qpi/patch_extraction.hpp"
#include "qpi/random.hpp"

namespace qpi::dataset {

namespace fs = std::filesystem;
using patches::RbcPatch;

enum class Split : std::uint8_t { Train = 0, Val = 1, Test = 2 };
inline constexpr std::array<Split, 3> kAllSplits{Split::Train, Split::Val, Split::Test};

inline std::string to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

inline Split parse_split(std::string_view s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw FormatError("unknown split '" + std::string(s) + "'");
}

enum class Augmentation : std::uint8_t { None, Rot45, Rot135 };

inline std::string to_string(Augmentation a) {
    switch (a) {
        case Augmentation::None: return "none";
        case Augmentation::Rot45: return "rot45";
        case Augmentation::Rot135: return "rot135";
    }
    return "?";
}

inline Augmentation parse_augmentation(std::string_view s) {
    if (s == "none") return Augmentation::None;
    if (s == "rot45") return Augmentation::Rot45;
    if (s == "rot135") return Augmentation::Rot135;
    throw FormatError("unknown augmentation '" + std::string(s) + "'");
}

inline double rotation_degrees(Augmentation a) {
    return a == Augmentation::Rot45 ? 45.0 : a == Augmentation::Rot135 ? 135.0 : 0.0;
}

struct ManifestEntry {
    std::string patch_path;
    ClassLabel label = ClassLabel::Unlabeled;
    std::string subject_id;
    std::string wavelength_set_id = "rgb";  // "r", "g" or "b" under channels-as-samples
    Augmentation augmentation = Augmentation::None;
    Split split = Split::Train;
    bool operator==(const ManifestEntry&) const = default;
};

using ClassCounts = std::array<std::size_t, 3>;

struct DatasetManifest {
    std::vector<ManifestEntry> entries;

    std::size_t count(Split s) const {
        return static_cast<std::size_t>(
            std::count_if(entries.begin(), entries.end(), [s](const auto& e) { return e.split == s; }));
    }

    ClassCounts class_counts(Split s, bool base_only = false) const {
        ClassCounts c{};
        for (const auto& e : entries)
            if (e.split == s && static_cast<std::size_t>(e.label) < 3 &&
                (!base_only || e.augmentation == Augmentation::None))
                ++c[static_cast<std::size_t>(e.label)];
        return c;
    }

    std::vector<ManifestEntry> select(Split s) const {
        std::vector<ManifestEntry> out;
        for (const auto& e : entries)
            if (e.split == s) out.push_back(e);
        return out;
    }

    /// Subjects that appear in more than one split.
    std::vector<std::string> leaked_subjects() const {
        std::map<std::string, std::set<Split>> seen;
        for (const auto& e : entries) seen[e.subject_id].insert(e.split);
        std::vector<std::string> out;
        for (const auto& [sid, splits] : seen)
            if (splits.size() > 1) out.push_back(sid);
        return out;
    }

    void check_invariants(bool train_balanced = true) const {
        if (const auto leaked = leaked_subjects(); !leaked.empty())
            throw SplitError("subject '" + leaked.front() + "' appears in more than one split");
        for (const auto& e : entries)
            if (e.split == Split::Test && e.augmentation != Augmentation::None)
                throw ContractError("test entry '" + e.patch_path + "' carries augmentation");
        if (train_balanced) {
            const auto c = class_counts(Split::Train);
            if (c[0] != c[1] || c[1] != c[2])
                throw ContractError("train class counts differ: " + std::to_string(c[0]) + "/" +
                                    std::to_string(c[1]) + "/" + std::to_string(c[2]));
        }
    }
};

// --- rotation augmentation ---------------------------------------------------

inline double border_median(const RealGrid& g) {
    std::vector<double> v;
    for (std::size_t c = 0; c < g.cols(); ++c) {
        v.push_back(g(0, c));
        if (g.rows() > 1) v.push_back(g(g.rows() - 1, c));
    }
    for (std::size_t r = 1; r + 1 < g.rows(); ++r) {
        v.push_back(g(r, 0));
        if (g.cols() > 1) v.push_back(g(r, g.cols() - 1));
    }
    if (v.empty()) throw ShapeError("empty grid has no border");
    const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    if (v.size() % 2 == 1) return *mid;
    const double hi = *mid;
    return 0.5 * (hi + *std::max_element(v.begin(), mid));
}

/// Counter-clockwise rotation about the grid centre with bilinear sampling;
/// samples falling outside the source take `fill`.
inline RealGrid rotate_grid(const RealGrid& g, double degrees, double fill) {
    const double th = degrees * std::numbers::pi / 180.0;
    const double cs = std::cos(th), sn = std::sin(th);
    const double cr = (static_cast<double>(g.rows()) - 1.0) / 2.0;
    const double cc = (static_cast<double>(g.cols()) - 1.0) / 2.0;
    const double rmax = static_cast<double>(g.rows()) - 1.0, cmax = static_cast<double>(g.cols()) - 1.0;
    constexpr double eps = 1e-9;
    RealGrid out(g.rows(), g.cols());
    for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) {
            const double y = static_cast<double>(r) - cr, x = static_cast<double>(c) - cc;
            // inverse map: rotate the output coordinate by -theta (row axis points down)
            const double sx = cs * x - sn * y + cc;
            const double sy = sn * x + cs * y + cr;
            if (sy < -eps || sx < -eps || sy > rmax + eps || sx > cmax + eps)
                out(r, c) = fill;
            else
                out(r, c) = sample_bilinear(g, sy, sx);
        }
    return out;
}

inline RbcPatch rotate_patch(const RbcPatch& p, double degrees) {
    RbcPatch out = p;
    for (std::size_t ch = 0; ch < 3; ++ch) out.channels[ch] = rotate_grid(p.channels[ch], degrees, border_median(p.channels[ch]));
    return out;
}

/// [original, rot 45, rot 135]
inline std::vector<RbcPatch> augment_rotations(const RbcPatch& p) {
    if (!p.normalized) throw ContractError("augmentation expects a normalized 60x60 patch");
    return {p, rotate_patch(p, 45.0), rotate_patch(p, 135.0)};
}

// --- balancing and splitting ---------------------------------------------------

/// Seeded subsample to exactly `per_class` entries of each of the three
/// classes; retained entries keep their input order.
inline std::vector<ManifestEntry> balance_classes(const std::vector<ManifestEntry>& entries, std::size_t per_class,
                                                  std::uint64_t seed) {
    std::array<std::vector<std::size_t>, 3> idx;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto c = static_cast<std::size_t>(entries[i].label);
        if (c > 2) throw ContractError("entry '" + entries[i].patch_path + "' is unlabeled");
        idx[c].push_back(i);
    }
    std::vector<std::size_t> keep;
    for (std::size_t c = 0; c < 3; ++c) {
        if (idx[c].size() < per_class)
            throw InsufficientDataError("class " + std::to_string(c) + " (" +
                                        std::string(to_string(static_cast<ClassLabel>(c))) + ") has " +
                                        std::to_string(idx[c].size()) + " entries, " + std::to_string(per_class) +
                                        " required");
        Rng rng(derive_seed(seed, "balance:class:" + std::to_string(c)));
        auto v = idx[c];
        qpi::shuffle(v.begin(), v.end(), rng);
        keep.insert(keep.end(), v.begin(), v.begin() + static_cast<std::ptrdiff_t>(per_class));
    }
    std::sort(keep.begin(), keep.end());
    std::vector<ManifestEntry> out;
    out.reserve(keep.size());
    for (auto i : keep) out.push_back(entries[i]);
    return out;
}

inline ClassCounts count_classes(const std::vector<ManifestEntry>& entries) {
    ClassCounts c{};
    for (const auto& e : entries)
        if (static_cast<std::size_t>(e.label) < 3) ++c[static_cast<std::size_t>(e.label)];
    return c;
}

struct SplitSpec {
    std::set<std::string> train_ids, val_ids, test_ids;

    const std::set<std::string>& ids(Split s) const {
        return s == Split::Train ? train_ids : s == Split::Val ? val_ids : test_ids;
    }
};

inline void check_disjoint(const SplitSpec& spec) {
    for (const auto& id : spec.train_ids)
        if (spec.val_ids.count(id) || spec.test_ids.count(id))
            throw SplitError("subject '" + id + "' is assigned to more than one split");
    for (const auto& id : spec.val_ids)
        if (spec.test_ids.count(id)) throw SplitError("subject '" + id + "' is assigned to more than one split");
}

inline std::vector<ManifestEntry> split_by_subject(std::vector<ManifestEntry> entries, const SplitSpec& spec) {
    check_disjoint(spec);
    for (auto& e : entries) {
        if (spec.train_ids.count(e.subject_id))
            e.split = Split::Train;
        else if (spec.val_ids.count(e.subject_id))
            e.split = Split::Val;
        else if (spec.test_ids.count(e.subject_id))
            e.split = Split::Test;
        else
            throw SplitError("subject '" + e.subject_id + "' is not covered by the split spec");
    }
    return entries;
}

/// Subjects per class for each split.
struct SplitCounts {
    std::array<std::size_t, 3> train{}, val{}, test{};
};

/// Training 5/10/7, validation 2/3/4, test 1/2/2 subjects (healthy/early/late).
/// The pooled train+val form (7/13/11) is the same partition.
inline SplitCounts paper_split_counts() { return {{5, 10, 7}, {2, 3, 4}, {1, 2, 2}}; }

/// Assigns the first subjects of each class (in the given order) to train,
/// then val, then test.
inline SplitSpec split_from_counts(const std::map<ClassLabel, std::vector<std::string>>& subjects,
                                   const SplitCounts& counts) {
    SplitSpec spec;
    for (std::size_t c = 0; c < 3; ++c) {
        const auto label = static_cast<ClassLabel>(c);
        const auto it = subjects.find(label);
        const std::vector<std::string> none;
        const auto& ids = it == subjects.end() ? none : it->second;
        const std::size_t need = counts.train[c] + counts.val[c] + counts.test[c];
        if (ids.size() < need)
            throw SplitError("class " + std::string(to_string(label)) + " has " + std::to_string(ids.size()) +
                             " subjects, split needs " + std::to_string(need));
        std::size_t k = 0;
        for (std::size_t i = 0; i < counts.train[c]; ++i) spec.train_ids.insert(ids[k++]);
        for (std::size_t i = 0; i < counts.val[c]; ++i) spec.val_ids.insert(ids[k++]);
        for (std::size_t i = 0; i < counts.test[c]; ++i) spec.test_ids.insert(ids[k++]);
    }
    check_disjoint(spec);
    return spec;
}

/// Per-class subject fractions, rounded so that every split with a non-zero
/// fraction receives at least one subject when possible.
inline SplitSpec split_from_fractions(const std::map<ClassLabel, std::vector<std::string>>& subjects, double train,
                                      double val, double test) {
    if (!(train > 0 && val >= 0 && test >= 0)) throw DomainError("split fractions must be non-negative, train > 0");
    const double total = train + val + test;
    SplitCounts counts;
    for (const auto& [label, ids] : subjects) {
        const auto c = static_cast<std::size_t>(label);
        if (c > 2) continue;
        const double n = static_cast<double>(ids.size());
        auto nv = static_cast<std::size_t>(std::llround(n * val / total));
        auto nt = static_cast<std::size_t>(std::llround(n * test / total));
        if (val > 0 && nv == 0 && ids.size() >= 3) nv = 1;
        if (test > 0 && nt == 0 && ids.size() >= 3) nt = 1;
        if (nv + nt >= ids.size()) throw SplitError("class " + std::string(to_string(label)) + " has too few subjects to split");
        counts.train[c] = ids.size() - nv - nt;
        counts.val[c] = nv;
        counts.test[c] = nt;
    }
    return split_from_counts(subjects, counts);
}

// --- manifest builder --------------------------------------------------------

enum class BalanceScope : std::uint8_t { Train, TrainVal };

struct BuildOptions {
    SplitSpec split;
    std::size_t per_class = 0;  // 0: smallest class count within the scope
    BalanceScope scope = BalanceScope::Train;
    bool augment_train = true;
    bool augment_val = false;
    bool channels_as_samples = false;
    std::uint64_t seed = 0;
};

/// The bookkeeping reading: balanced train+val pool, each wavelength channel a
/// separate sample, rotations on train and val.
inline BuildOptions channels_as_samples_preset(SplitSpec split, std::size_t per_class, std::uint64_t seed) {
    BuildOptions o;
    o.split = std::move(split);
    o.per_class = per_class;
    o.scope = BalanceScope::TrainVal;
    o.augment_train = true;
    o.augment_val = true;
    o.channels_as_samples = true;
    o.seed = seed;
    return o;
}

/// records: one un-split entry per extracted patch (path, label, subject).
inline DatasetManifest build_manifest(const std::vector<ManifestEntry>& records, const BuildOptions& opt) {
    auto split = split_by_subject(records, opt.split);

    std::vector<ManifestEntry> pool, rest;
    for (auto& e : split) {
        const bool in_scope = e.split == Split::Train || (opt.scope == BalanceScope::TrainVal && e.split == Split::Val);
        (in_scope ? pool : rest).push_back(e);
    }
    std::size_t n = opt.per_class;
    if (n == 0) {
        const auto c = count_classes(pool);
        n = *std::min_element(c.begin(), c.end());
        if (n == 0) throw InsufficientDataError("a class has no training entries");
    }
    pool = balance_classes(pool, n, derive_seed(opt.seed, "dataset:balance"));

    // Re-merge in split order: train, val, test.
    std::vector<ManifestEntry> base;
    for (Split s : kAllSplits)
        for (const auto* src : {&pool, &rest})
            for (const auto& e : *src)
                if (e.split == s) base.push_back(e);

    DatasetManifest m;
    for (const auto& e : base) {
        std::vector<ManifestEntry> variants;
        if (opt.channels_as_samples) {
            for (const char* ch : {"r", "g", "b"}) {
                auto v = e;
                v.wavelength_set_id = ch;
                variants.push_back(v);
            }
        } else {
            variants.push_back(e);
        }
        const bool augment = (e.split == Split::Train && opt.augment_train) || (e.split == Split::Val && opt.augment_val);
        for (const auto& v : variants) {
            m.entries.push_back(v);
            if (!augment) continue;
            for (auto aug : {Augmentation::Rot45, Augmentation::Rot135}) {
                auto a = v;
                a.augmentation = aug;
                m.entries.push_back(a);
            }
        }
    }
    m.check_invariants(opt.scope == BalanceScope::Train);
    return m;
}

// --- text formats --------------------------------------------------------------

/// path<TAB>label<TAB>subject<TAB>split<TAB>aug[<TAB>wavelengths]
inline std::string format_manifest(const DatasetManifest& m) {
    std::ostringstream os;
    os << "# path\tlabel\tsubject\tsplit\taug\twavelengths\n";
    for (const auto& e : m.entries)
        os << e.patch_path << '\t' << to_string(e.label) << '\t' << e.subject_id << '\t' << to_string(e.split) << '\t'
           << to_string(e.augmentation) << '\t' << e.wavelength_set_id << '\n';
    return os.str();
}

namespace detail {
inline std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> f;
    std::size_t start = 0;
    while (true) {
        const auto t = line.find('\t', start);
        f.push_back(line.substr(start, t == std::string::npos ? std::string::npos : t - start));
        if (t == std::string::npos) break;
        start = t + 1;
    }
    return f;
}
}  // namespace detail

inline DatasetManifest parse_manifest(const std::string& text, const std::string& origin = "manifest") {
    DatasetManifest m;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const auto f = detail::split_tabs(line);
        if (f.size() != 5 && f.size() != 6)
            throw FormatError(origin + ":" + std::to_string(lineno) + ": expected 5 or 6 tab-separated fields");
        ManifestEntry e;
        e.patch_path = f[0];
        try {
            e.label = parse_class(f[1]);
            e.subject_id = f[2];
            e.split = parse_split(f[3]);
            e.augmentation = parse_augmentation(f[4]);
        } catch (const Error& ex) {
            throw FormatError(origin + ":" + std::to_string(lineno) + ": " + ex.what());
        }
        if (f.size() == 6) e.wavelength_set_id = f[5];
        if (e.wavelength_set_id != "rgb" && e.wavelength_set_id != "r" && e.wavelength_set_id != "g" &&
            e.wavelength_set_id != "b")
            throw FormatError(origin + ":" + std::to_string(lineno) + ": unknown wavelength set '" +
                              e.wavelength_set_id + "'");
        m.entries.push_back(std::move(e));
    }
    return m;
}

inline void write_manifest(const fs::path& p, const DatasetManifest& m) { io::write_text(p, format_manifest(m)); }

/// Relative patch paths are resolved against the manifest's directory.
inline DatasetManifest read_manifest(const fs::path& p) {
    auto m = parse_manifest(io::read_text(p), p.string());
    for (auto& e : m.entries)
        if (fs::path(e.patch_path).is_relative()) e.patch_path = (p.parent_path() / e.patch_path).lexically_normal().string();
    return m;
}

/// Index written by the extraction stage: path<TAB>label<TAB>subject.
inline std::string format_patch_index(const std::vector<ManifestEntry>& records) {
    std::ostringstream os;
    os << "# path\tlabel\tsubject\n";
    for (const auto& e : records) os << e.patch_path << '\t' << to_string(e.label) << '\t' << e.subject_id << '\n';
    return os.str();
}

inline std::vector<ManifestEntry> read_patch_index(const fs::path& p) {
    std::istringstream is(io::read_text(p));
    std::vector<ManifestEntry> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const auto f = detail::split_tabs(line);
        if (f.size() != 3) throw FormatError(p.string() + ":" + std::to_string(lineno) + ": expected 3 fields");
        ManifestEntry e;
        e.patch_path = fs::path(f[0]).is_relative() ? (p.parent_path() / f[0]).lexically_normal().string() : f[0];
        e.label = parse_class(f[1]);
        e.subject_id = f[2];
        out.push_back(std::move(e));
    }
    return out;
}

/// Split spec file: lines "train: id id ...", "val: ...", "test: ...".
inline SplitSpec parse_split_spec(const std::string& text, const std::string& origin = "split spec") {
    SplitSpec spec;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
        const auto colon = line.find(':');
        if (colon == std::string::npos) {
            if (line.find_first_not_of(" \t\r") != std::string::npos)
                throw FormatError(origin + ": expected '<split>: ids...' in line '" + line + "'");
            continue;
        }
        std::string key = line.substr(0, colon);
        key.erase(0, key.find_first_not_of(" \t"));
        key.erase(key.find_last_not_of(" \t") + 1);
        const Split s = parse_split(key);
        std::istringstream ids(line.substr(colon + 1));
        std::string id;
        auto& set = s == Split::Train ? spec.train_ids : s == Split::Val ? spec.val_ids : spec.test_ids;
        while (ids >> id) set.insert(id);
    }
    check_disjoint(spec);
    return spec;
}

inline std::string format_split_spec(const SplitSpec& spec) {
    std::ostringstream os;
    for (Split s : kAllSplits) {
        os << to_string(s) << ":";
        for (const auto& id : spec.ids(s)) os << ' ' << id;
        os << '\n';
    }
    return os.str();
}

// --- batches -----------------------------------------------------------------

enum class Task : std::uint8_t { HealthyVsInfected, EarlyVsLate };

inline std::string to_string(Task t) { return t == Task::HealthyVsInfected ? "hvi" : "evl"; }
inline Task parse_task(std::string_view s) {
    if (s == "hvi") return Task::HealthyVsInfected;
    if (s == "evl") return Task::EarlyVsLate;
    throw DomainError("unknown task '" + std::string(s) + "' (expected hvi or evl)");
}

/// Binary target for a task; empty when the class takes no part in it.
/// Positive classes: infected (hvi), late trophozoite (evl).
inline std::optional<int> task_target(Task t, ClassLabel c) {
    if (t == Task::HealthyVsInfected) {
        if (c == ClassLabel::Healthy) return 0;
        if (c == ClassLabel::EarlyTrophozoite || c == ClassLabel::LateTrophozoite) return 1;
        return std::nullopt;
    }
    if (c == ClassLabel::EarlyTrophozoite) return 0;
    if (c == ClassLabel::LateTrophozoite) return 1;
    return std::nullopt;
}

inline std::vector<ManifestEntry> entries_for(const DatasetManifest& m, Split s, Task t) {
    std::vector<ManifestEntry> out;
    for (const auto& e : m.entries)
        if (e.split == s && task_target(t, e.label)) out.push_back(e);
    return out;
}

/// Loads patch files once and serves materialised (rotated / channel-selected)
/// 60x60 RGB stacks.
class PatchStore {
public:
    using Fetch = std::function<RbcPatch(const std::string&)>;

    PatchStore() : fetch_([](const std::string& p) { return io::read_patch(p); }) {}
    explicit PatchStore(Fetch f) : fetch_(std::move(f)) {}

    const RbcPatch& raw(const std::string& path) {
        auto it = cache_.find(path);
        if (it == cache_.end()) {
            RbcPatch p;
            try {
                p = fetch_(path);
            } catch (const IoError&) {
                throw;
            } catch (const Error& e) {
                throw IoError("failed to load patch '" + path + "': " + e.what());
            }
            it = cache_.emplace(path, std::make_shared<RbcPatch>(std::move(p))).first;
        }
        return *it->second;
    }

    std::array<RealGrid, 3> materialize(const ManifestEntry& e) {
        const RbcPatch& base = raw(e.patch_path);
        const RbcPatch p = e.augmentation == Augmentation::None ? base : rotate_patch(base, rotation_degrees(e.augmentation));
        std::array<RealGrid, 3> out = p.channels;
        if (e.wavelength_set_id != "rgb") {
            const std::size_t ch = e.wavelength_set_id == "r" ? 0 : e.wavelength_set_id == "g" ? 1 : 2;
            out = {p.channels[ch], p.channels[ch], p.channels[ch]};
        }
        return out;
    }

    std::size_t size() const noexcept { return cache_.size(); }

private:
    Fetch fetch_;
    std::unordered_map<std::string, std::shared_ptr<RbcPatch>> cache_;
};

struct NormalizationStats {
    std::array<double, 3> mean{0.0, 0.0, 0.0};
    std::array<double, 3> stddev{1.0, 1.0, 1.0};
    bool operator==(const NormalizationStats&) const = default;
};

/// Per-channel mean and std over the given (training) entries as served.
inline NormalizationStats compute_stats(const std::vector<ManifestEntry>& train, PatchStore& store) {
    if (train.empty()) throw EmptyInputError("normalization needs at least one training entry");
    std::array<double, 3> sum{}, sq{};
    std::size_t n = 0;
    for (const auto& e : train) {
        const auto ch = store.materialize(e);
        for (std::size_t c = 0; c < 3; ++c)
            for (double v : ch[c].storage()) {
                sum[c] += v;
                sq[c] += v * v;
            }
        n += ch[0].size();
    }
    NormalizationStats s;
    for (std::size_t c = 0; c < 3; ++c) {
        s.mean[c] = sum[c] / static_cast<double>(n);
        const double var = std::max(0.0, sq[c] / static_cast<double>(n) - s.mean[c] * s.mean[c]);
        s.stddev[c] = var > 1e-24 ? std::sqrt(var) : 1.0;
    }
    return s;
}

class BatchLoader {
public:
    BatchLoader(std::vector<ManifestEntry> entries, Task task, std::size_t batch_size, NormalizationStats stats,
                PatchStore& store, bool shuffle, std::size_t side = cnn::kInputSide)
        : entries_(std::move(entries)), task_(task), batch_(batch_size), stats_(stats), store_(&store),
          shuffle_(shuffle), side_(side) {
        if (batch_ == 0) throw DomainError("batch size must be positive");
        for (const auto& e : entries_)
            if (!task_target(task_, e.label))
                throw ContractError("entry '" + e.patch_path + "' has no target for task " + to_string(task_));
        order_.resize(entries_.size());
        for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    }

    void start_epoch(std::uint64_t seed) {
        for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
        if (shuffle_) {
            Rng rng(seed);
            qpi::shuffle(order_.begin(), order_.end(), rng);
        }
    }

    std::size_t batch_count() const noexcept { return (entries_.size() + batch_ - 1) / batch_; }
    std::size_t size() const noexcept { return entries_.size(); }

    cnn::Minibatch<float> batch(std::size_t b) {
        if (b >= batch_count()) throw BoundsError("batch index out of range");
        const std::size_t lo = b * batch_, hi = std::min(entries_.size(), lo + batch_);
        cnn::Minibatch<float> mb{cnn::Tensor<float>({hi - lo, 3, side_, side_}), {}};
        float* dst = mb.inputs.data();
        for (std::size_t i = lo; i < hi; ++i) {
            const auto& e = entries_[order_[i]];
            const auto ch = store_->materialize(e);
            for (std::size_t c = 0; c < 3; ++c) {
                const RealGrid up = resize_bilinear(ch[c], side_, side_);
                for (double v : up.storage()) *dst++ = static_cast<float>((v - stats_.mean[c]) / stats_.stddev[c]);
            }
            mb.targets.push_back(*task_target(task_, e.label));
        }
        return mb;
    }

    /// Entry served at position i of the current epoch order.
    const ManifestEntry& entry_at(std::size_t i) const { return entries_.at(order_.at(i)); }

private:
    std::vector<ManifestEntry> entries_;
    Task task_;
    std::size_t batch_;
    NormalizationStats stats_;
    PatchStore* store_;
    bool shuffle_;
    std::size_t side_;
    std::vector<std::size_t> order_;
};

/// Stable sample id for score files.
inline std::string sample_id(const ManifestEntry& e) {
    std::string id = fs::path(e.patch_path).stem().string();
    if (e.wavelength_set_id != "rgb") id += ":" + e.wavelength_set_id;
    if (e.augmentation != Augmentation::None) id += ":" + to_string(e.augmentation);
    return id;
}

}  // namespace qpi::dataset

#endif  // QPI_DATASET_HPP
