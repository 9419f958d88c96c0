#ifndef QPI_PIPELINE_HPP
#define QPI_PIPELINE_HPP

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "qpi/cnn/checkpoint.hpp"
#include "qpi/cnn/train.hpp"
#include "qpi/config.hpp"
#include "qpi/dataset.hpp"
#include "qpi/forward_model.hpp"
#include "qpi/io.hpp"
#include "qpi/metrics.hpp"
#include "qpi/parallel.hpp"
#include "qpi/patch_extraction.hpp"
#include "qpi/phase_retrieval.hpp"

namespace qpi::pipeline {

namespace fs = std::filesystem;

enum class Stage : std::uint8_t { Synth, Retrieve, Extract, Dataset, Train, Predict, Eval };
inline constexpr std::array<Stage, 7> kAllStages{Stage::Synth,   Stage::Retrieve, Stage::Extract, Stage::Dataset,
                                                 Stage::Train,   Stage::Predict,  Stage::Eval};

inline std::string to_string(Stage s) {
    static constexpr std::array<const char*, 7> names{"synth", "retrieve", "extract", "dataset", "train", "predict", "eval"};
    return names[static_cast<std::size_t>(s)];
}

inline Stage parse_stage(std::string_view s) {
    for (Stage st : kAllStages)
        if (to_string(st) == s) return st;
    throw DomainError("unknown stage '" + std::string(s) + "'");
}

/// Directory layout of one run.
struct Layout {
    fs::path root;

    fs::path synth_dir() const { return root / "synth"; }
    fs::path phase_dir() const { return root / "phase"; }
    fs::path patch_dir() const { return root / "patches"; }
    fs::path dataset_dir() const { return root / "dataset"; }
    fs::path model_dir() const { return root / "model"; }
    fs::path predict_dir() const { return root / "predict"; }
    fs::path eval_dir() const { return root / "eval"; }
    fs::path records_dir() const { return root / "records"; }

    fs::path frames_index() const { return synth_dir() / "frames.tsv"; }
    fs::path phase_index() const { return phase_dir() / "phases.tsv"; }
    fs::path patch_index() const { return patch_dir() / "patches.tsv"; }
    fs::path manifest() const { return dataset_dir() / "manifest.tsv"; }
    fs::path split_file() const { return dataset_dir() / "split.txt"; }
    fs::path checkpoint(dataset::Task t) const { return model_dir() / (dataset::to_string(t) + ".qpn"); }
    fs::path train_log(dataset::Task t) const { return model_dir() / (dataset::to_string(t) + "_train.tsv"); }
    fs::path scores(dataset::Task t) const { return predict_dir() / (dataset::to_string(t) + "_scores.csv"); }
    fs::path timing(dataset::Task t) const { return predict_dir() / (dataset::to_string(t) + "_timing.txt"); }
    fs::path roc(dataset::Task t) const { return eval_dir() / (dataset::to_string(t) + "_roc.csv"); }
    fs::path report(dataset::Task t) const { return eval_dir() / (dataset::to_string(t) + "_metrics.txt"); }
    fs::path summary() const { return root / "report.txt"; }
    fs::path config_copy() const { return root / "config.ini"; }
    fs::path record(Stage s) const { return records_dir() / (to_string(s) + ".rec"); }
};

// --- provenance ----------------------------------------------------------------

/// Input and output hashes of one stage. Paths are stored relative to the run
/// root when they lie inside it.
class Provenance {
public:
    explicit Provenance(fs::path root = {}) : root_(std::move(root)) {}

    void input(const fs::path& p, std::string_view bytes) { add(inputs_, p, bytes); }
    void output(const fs::path& p, std::string_view bytes) { add(outputs_, p, bytes); }

    const std::map<std::string, std::string>& inputs() const { return inputs_; }
    const std::map<std::string, std::string>& outputs() const { return outputs_; }

    std::string format(Stage stage, std::uint64_t seed, const std::string& config_hash) const {
        std::ostringstream os;
        os << "stage = " << to_string(stage) << "\nseed = " << seed << "\nconfig = " << config_hash << '\n';
        for (const auto& [p, h] : inputs_) os << "input " << h << ' ' << p << '\n';
        for (const auto& [p, h] : outputs_) os << "output " << h << ' ' << p << '\n';
        return os.str();
    }

private:
    void add(std::map<std::string, std::string>& into, const fs::path& p, std::string_view bytes) {
        std::string key = p.lexically_normal().string();
        if (!root_.empty()) {
            const auto rel = p.lexically_normal().lexically_relative(root_.lexically_normal());
            if (!rel.empty() && *rel.begin() != "..") key = rel.string();
        }
        const std::string h = io::hash_bytes(bytes);
        std::lock_guard lock(m_);
        into[key] = h;
    }

    fs::path root_;
    std::mutex m_;
    std::map<std::string, std::string> inputs_, outputs_;
};

struct StageRecord {
    std::string stage;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::map<std::string, std::string> inputs, outputs;  // path -> hash
};

inline StageRecord parse_record(const std::string& text, const std::string& origin = "record") {
    StageRecord r;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string a, b, c;
        ls >> a >> b;
        std::getline(ls >> std::ws, c);
        if (a == "stage" && b == "=")
            r.stage = c;
        else if (a == "seed" && b == "=")
            r.seed = std::stoull(c);
        else if (a == "config" && b == "=")
            r.config_hash = c;
        else if (a == "input")
            r.inputs[c] = b;
        else if (a == "output")
            r.outputs[c] = b;
        else
            throw FormatError(origin + ": unrecognised line '" + line + "'");
    }
    return r;
}

namespace detail {

inline std::string read_input(const fs::path& p, Provenance* prov) {
    std::string bytes = io::read_file(p);
    if (prov) prov->input(p, bytes);
    return bytes;
}

inline void write_output(const fs::path& p, std::string_view bytes, Provenance* prov) {
    io::write_file(p, bytes);
    if (prov) prov->output(p, bytes);
}

inline std::string rel_to(const fs::path& p, const fs::path& dir) {
    const auto rel = p.lexically_normal().lexically_relative(dir.lexically_normal());
    return rel.empty() ? p.string() : rel.string();
}

inline fs::path resolve(const std::string& p, const fs::path& dir) {
    return fs::path(p).is_relative() ? (dir / p).lexically_normal() : fs::path(p);
}

inline Channel parse_channel(std::string_view s) {
    for (Channel c : kAllChannels)
        if (qpi::to_string(c) == s) return c;
    throw FormatError("unknown channel '" + std::string(s) + "'");
}

inline Channel nearest_channel(double wavelength_um) {
    Channel best = Channel::Red;
    for (Channel c : kAllChannels)
        if (std::abs(wavelength_um - qpi::wavelength_um(c)) < std::abs(wavelength_um - qpi::wavelength_um(best)))
            best = c;
    return best;
}

}  // namespace detail

// --- frame index ---------------------------------------------------------------

/// One raster of the synth/retrieve stages. `file` and `truth` are absolute
/// in memory and written relative to the index directory.
struct FrameRecord {
    fs::path file;
    std::string subject;
    ClassLabel label = ClassLabel::Unlabeled;
    std::size_t fov = 0;
    Channel channel = Channel::Red;
    std::uint64_t seed = 0;
    fs::path truth;  // empty when unknown
};

inline std::string format_frame_index(const std::vector<FrameRecord>& recs, const fs::path& dir) {
    std::ostringstream os;
    os << "# file\tsubject\tclass\tfov\tchannel\tseed\ttruth\n";
    for (const auto& r : recs)
        os << detail::rel_to(r.file, dir) << '\t' << r.subject << '\t' << qpi::to_string(r.label) << '\t' << r.fov << '\t'
           << qpi::to_string(r.channel) << '\t' << r.seed << '\t'
           << (r.truth.empty() ? std::string("-") : detail::rel_to(r.truth, dir)) << '\n';
    return os.str();
}

inline std::vector<FrameRecord> parse_frame_index(const std::string& text, const fs::path& dir,
                                                  const std::string& origin = "frame index") {
    std::vector<FrameRecord> out;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const auto f = dataset::detail::split_tabs(line);
        if (f.size() != 7) throw FormatError(origin + ":" + std::to_string(lineno) + ": expected 7 fields");
        FrameRecord r;
        try {
            r.file = detail::resolve(f[0], dir);
            r.subject = f[1];
            r.label = parse_class(f[2]);
            r.fov = std::stoul(f[3]);
            r.channel = detail::parse_channel(f[4]);
            r.seed = std::stoull(f[5]);
            if (f[6] != "-") r.truth = detail::resolve(f[6], dir);
        } catch (const FormatError&) {
            throw;
        } catch (const std::exception& e) {
            throw FormatError(origin + ":" + std::to_string(lineno) + ": " + e.what());
        }
        out.push_back(std::move(r));
    }
    return out;
}

/// `path` may be an index file, a directory holding `index_name`, a directory
/// of rasters with extension `ext`, or a single raster. Unindexed rasters get
/// their stem (minus a _red/_green/_blue suffix) as subject and no label.
inline std::vector<FrameRecord> discover(const fs::path& path, const std::string& index_name, const std::string& ext,
                                         Provenance* prov = nullptr) {
    if (fs::is_regular_file(path) && path.extension() == ".tsv")
        return parse_frame_index(detail::read_input(path, prov), path.parent_path(), path.string());
    if (fs::is_directory(path) && fs::exists(path / index_name))
        return parse_frame_index(detail::read_input(path / index_name, prov), path, (path / index_name).string());
    std::vector<fs::path> files;
    if (fs::is_directory(path)) {
        for (const auto& e : fs::directory_iterator(path))
            if (e.is_regular_file() && e.path().extension() == ext) files.push_back(e.path());
        std::sort(files.begin(), files.end());
    } else if (fs::is_regular_file(path)) {
        files.push_back(path);
    } else {
        throw IoError("input '" + path.string() + "' does not exist");
    }
    std::vector<FrameRecord> out;
    for (const auto& f : files) {
        FrameRecord r;
        r.file = fs::absolute(f).lexically_normal();
        r.subject = f.stem().string();
        for (Channel c : kAllChannels) {
            const std::string suffix = "_" + std::string(qpi::to_string(c));
            if (r.subject.size() > suffix.size() && r.subject.ends_with(suffix)) {
                r.subject.resize(r.subject.size() - suffix.size());
                r.channel = c;
            }
        }
        out.push_back(std::move(r));
    }
    return out;
}

// --- synth -----------------------------------------------------------------------

struct SubjectPlan {
    std::string id;
    ClassLabel label;
};

/// H01.., E01.., L01.. in class order.
inline std::vector<SubjectPlan> plan_subjects(const std::array<std::size_t, 3>& per_class) {
    std::vector<SubjectPlan> out;
    constexpr std::array<char, 3> prefix{'H', 'E', 'L'};
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 1; i <= per_class[c]; ++i) {
            char buf[16];
            std::snprintf(buf, sizeof buf, "%c%02zu", prefix[c], i);
            out.push_back({buf, kAllClasses[c]});
        }
    return out;
}

inline std::vector<SubjectPlan> plan_subjects(std::size_t per_class) { return plan_subjects({per_class, per_class, per_class}); }

/// Subjects per class the synth stage makes: the paper split needs exactly its
/// 8/15/13, anything else uses synth.subjects_per_class for every class.
inline std::array<std::size_t, 3> subject_counts(const config::PipelineConfig& cfg) {
    if (cfg.dataset.split == "paper") {
        const auto pc = dataset::paper_split_counts();
        return {pc.train[0] + pc.val[0] + pc.test[0], pc.train[1] + pc.val[1] + pc.test[1],
                pc.train[2] + pc.val[2] + pc.test[2]};
    }
    const auto n = cfg.synth.subjects_per_class;
    return {n, n, n};
}

/// Writes three frames and three truth maps per field of view plus frames.tsv
/// and cells.tsv. Each field of view draws from its own named sub-seed.
inline std::vector<FrameRecord> run_synth(const config::SynthSection& s, std::uint64_t seed, const fs::path& dir,
                                          Provenance* prov = nullptr,
                                          std::optional<std::array<std::size_t, 3>> per_class = {}) {
    const Carrier carrier = s.snap_carrier ? forward::snap_carrier(s.carrier, s.canvas, s.canvas) : s.carrier;
    const auto subjects = per_class ? plan_subjects(*per_class) : plan_subjects(s.subjects_per_class);
    const std::size_t jobs = subjects.size() * s.fovs_per_subject;
    std::vector<std::vector<FrameRecord>> frames(jobs);
    std::vector<std::string> cell_lines(jobs);
    const fs::path out = fs::absolute(dir).lexically_normal();

    parallel_for(jobs, [&](std::size_t j) {
        const auto& subj = subjects[j / s.fovs_per_subject];
        const std::size_t fov = j % s.fovs_per_subject;
        forward::SubjectSpec spec;
        spec.subject_id = subj.id;
        spec.class_label = subj.label;
        spec.cell_count = s.cells_per_fov;
        spec.rows = spec.cols = s.canvas;
        spec.allow_overlap = s.allow_overlap;
        spec.seed = derive_seed(seed, "synth:" + subj.id + ":fov" + std::to_string(fov));
        spec.fringe.carrier = carrier;
        spec.fringe.background = s.background;
        spec.fringe.modulation = s.modulation;
        spec.fringe.noise_sigma = s.noise_sigma;
        const auto scene = forward::make_subject(spec);
        const std::string stem = subj.id + "_f" + std::to_string(fov);
        for (std::size_t ch = 0; ch < 3; ++ch) {
            const std::string cname(qpi::to_string(kAllChannels[ch]));
            FrameRecord r{out / (stem + "_" + cname + ".qpi"), subj.id, subj.label, fov, kAllChannels[ch], spec.seed,
                          out / "truth" / (stem + "_" + cname + ".qph")};
            detail::write_output(r.file, io::encode_interferogram(scene.frames[ch]), prov);
            detail::write_output(r.truth, io::encode_phase(scene.truths[ch], &scene.frames[ch]), prov);
            frames[j].push_back(std::move(r));
        }
        std::ostringstream cl;
        for (std::size_t k = 0; k < scene.cells.size(); ++k) {
            const auto& c = scene.cells[k];
            cl << subj.id << '\t' << fov << '\t' << k << '\t' << qpi::to_string(c.label) << '\t'
               << io::format_real(c.center_row) << '\t' << io::format_real(c.center_col) << '\t'
               << io::format_real(c.radius_px) << '\n';
        }
        cell_lines[j] = cl.str();
    });

    std::vector<FrameRecord> all;
    for (auto& f : frames)
        for (auto& r : f) all.push_back(std::move(r));
    std::string cells = "# subject\tfov\tcell\tclass\tcenter_row\tcenter_col\tradius_px\n";
    for (const auto& c : cell_lines) cells += c;
    detail::write_output(out / "frames.tsv", format_frame_index(all, out), prov);
    detail::write_output(out / "cells.tsv", cells, prov);
    return all;
}

// --- retrieve ----------------------------------------------------------------------

struct RetrieveSummary {
    std::vector<FrameRecord> phases;
    std::size_t residues = 0;
};

/// One unwrapped phase map per frame, same stem, plus phases.tsv (metadata
/// carried over) and retrieval.tsv (filter and residue count per frame).
inline RetrieveSummary run_retrieve(const std::vector<FrameRecord>& frames, const retrieval::RetrievalConfig& rc,
                                    const fs::path& dir, Provenance* prov = nullptr) {
    const fs::path out = fs::absolute(dir).lexically_normal();
    RetrieveSummary sum;
    sum.phases.resize(frames.size());
    std::vector<std::string> lines(frames.size());
    std::vector<std::size_t> residues(frames.size());
    parallel_for(frames.size(), [&](std::size_t i) {
        const auto& f = frames[i];
        const Interferogram frame = io::decode_interferogram(io::Reader(detail::read_input(f.file, prov), f.file.string()));
        const auto res = retrieval::retrieve(frame, rc);
        FrameRecord r = f;
        r.file = out / (f.file.stem().string() + ".qph");
        if (f.label == ClassLabel::Unlabeled) r.channel = detail::nearest_channel(frame.wavelength_um);
        detail::write_output(r.file, io::encode_phase(res.phase, &frame), prov);
        residues[i] = res.residue_count;
        lines[i] = r.file.filename().string() + '\t' + std::to_string(res.filter.center_row_bin) + '\t' +
                   std::to_string(res.filter.center_col_bin) + '\t' + io::format_real(res.filter.radius_bins) + '\t' +
                   std::to_string(res.residue_count) + '\n';
        sum.phases[i] = std::move(r);
    });
    std::string table = "# file\tcarrier_row_bin\tcarrier_col_bin\tradius_bins\tresidues\n";
    for (std::size_t i = 0; i < lines.size(); ++i) {
        table += lines[i];
        sum.residues += residues[i];
    }
    detail::write_output(out / "phases.tsv", format_frame_index(sum.phases, out), prov);
    detail::write_output(out / "retrieval.tsv", table, prov);
    return sum;
}

// --- extract -------------------------------------------------------------------------

struct ExtractSummary {
    std::vector<dataset::ManifestEntry> patches;  // path, label, subject
    patches::ExtractionStats totals;
    std::size_t fields = 0;
};

/// Groups phase maps by (subject, fov); each group must hold all three
/// channels. Patches are written as <subject>_f<fov>_c<k>.qpa with patches.tsv.
inline ExtractSummary run_extract(const std::vector<FrameRecord>& phases, const patches::ExtractionConfig& ec,
                                  const fs::path& dir, Provenance* prov = nullptr) {
    struct Group {
        std::string subject;
        ClassLabel label;
        std::size_t fov;
        std::array<const FrameRecord*, 3> ch{nullptr, nullptr, nullptr};
    };
    std::vector<Group> groups;
    std::map<std::pair<std::string, std::size_t>, std::size_t> where;
    for (const auto& p : phases) {
        const auto key = std::make_pair(p.subject, p.fov);
        auto it = where.find(key);
        if (it == where.end()) {
            it = where.emplace(key, groups.size()).first;
            groups.push_back({p.subject, p.label, p.fov, {}});
        }
        auto& g = groups[it->second];
        if (g.label != p.label) throw FormatError("subject '" + p.subject + "' carries more than one class");
        auto& slot = g.ch[static_cast<std::size_t>(p.channel)];
        if (slot) throw FormatError("duplicate " + std::string(qpi::to_string(p.channel)) + " map for " + p.subject);
        slot = &p;
    }
    for (const auto& g : groups)
        for (std::size_t c = 0; c < 3; ++c)
            if (!g.ch[c])
                throw FormatError("subject '" + g.subject + "' fov " + std::to_string(g.fov) + " lacks the " +
                                  std::string(qpi::to_string(kAllChannels[c])) + " channel");

    const fs::path out = fs::absolute(dir).lexically_normal();
    fs::create_directories(out);
    std::vector<std::vector<dataset::ManifestEntry>> found(groups.size());
    std::vector<patches::ExtractionStats> stats(groups.size());
    parallel_for(groups.size(), [&](std::size_t i) {
        const auto& g = groups[i];
        std::array<PhaseMap, 3> maps;
        for (std::size_t c = 0; c < 3; ++c)
            maps[c] = io::decode_phase(io::Reader(detail::read_input(g.ch[c]->file, prov), g.ch[c]->file.string()));
        auto ps = patches::extract_patches({&maps[0], &maps[1], &maps[2]}, ec, &stats[i]);
        for (std::size_t k = 0; k < ps.size(); ++k) {
            ps[k].label = g.label;
            ps[k].subject_id = g.subject;
            const fs::path file = out / (g.subject + "_f" + std::to_string(g.fov) + "_c" + std::to_string(k) + ".qpa");
            detail::write_output(file, io::encode_patch(ps[k]), prov);
            dataset::ManifestEntry e;
            e.patch_path = file.string();
            e.label = g.label;
            e.subject_id = g.subject;
            found[i].push_back(std::move(e));
        }
    });

    ExtractSummary sum;
    sum.fields = groups.size();
    std::string table = "# subject\tfov\tcomponents\trejected_small\toverlapping\tpatches\n";
    for (std::size_t i = 0; i < groups.size(); ++i) {
        sum.totals.components += stats[i].components;
        sum.totals.rejected_small += stats[i].rejected_small;
        sum.totals.overlapping += stats[i].overlapping;
        sum.totals.skipped_empty += stats[i].skipped_empty;
        table += groups[i].subject + '\t' + std::to_string(groups[i].fov) + '\t' + std::to_string(stats[i].components) +
                 '\t' + std::to_string(stats[i].rejected_small) + '\t' + std::to_string(stats[i].overlapping) + '\t' +
                 std::to_string(found[i].size()) + '\n';
        for (auto& e : found[i]) sum.patches.push_back(std::move(e));
    }
    auto rel = sum.patches;
    for (auto& e : rel) e.patch_path = detail::rel_to(e.patch_path, out);
    detail::write_output(out / "patches.tsv", dataset::format_patch_index(rel), prov);
    detail::write_output(out / "extraction.tsv", table, prov);
    return sum;
}

// --- dataset -----------------------------------------------------------------------------

inline std::map<ClassLabel, std::vector<std::string>> subjects_by_class(const std::vector<dataset::ManifestEntry>& recs) {
    std::map<ClassLabel, std::set<std::string>> sets;
    for (const auto& e : recs) sets[e.label].insert(e.subject_id);
    std::map<ClassLabel, std::vector<std::string>> out;
    for (auto& [label, ids] : sets) out[label] = {ids.begin(), ids.end()};
    return out;
}

/// Subject split from the dataset section over the subjects present in `recs`.
inline dataset::SplitSpec make_split(const config::DatasetSection& d, const std::vector<dataset::ManifestEntry>& recs) {
    const auto subjects = subjects_by_class(recs);
    if (d.split == "paper") return dataset::split_from_counts(subjects, dataset::paper_split_counts());
    if (d.split == "file") return dataset::parse_split_spec(io::read_text(d.split_file), d.split_file);
    return dataset::split_from_fractions(subjects, d.train_fraction, d.val_fraction, d.test_fraction);
}

inline dataset::BuildOptions build_options(const config::DatasetSection& d, dataset::SplitSpec split, std::uint64_t seed) {
    dataset::BuildOptions o;
    o.split = std::move(split);
    o.per_class = d.per_class;
    o.scope = d.scope;
    o.augment_train = d.augment_train;
    o.augment_val = d.augment_val;
    o.channels_as_samples = d.channels_as_samples;
    o.seed = seed;
    return o;
}

/// Reads only the patch index; writes manifest.tsv and split.txt.
inline dataset::DatasetManifest run_dataset(const fs::path& patch_index, const dataset::BuildOptions& opt,
                                            const fs::path& dir, Provenance* prov = nullptr) {
    detail::read_input(patch_index, prov);
    const auto recs = dataset::read_patch_index(patch_index);
    auto m = dataset::build_manifest(recs, opt);
    const fs::path out = fs::absolute(dir).lexically_normal();
    auto rel = m;
    for (auto& e : rel.entries) e.patch_path = detail::rel_to(e.patch_path, out);
    detail::write_output(out / "manifest.tsv", dataset::format_manifest(rel), prov);
    detail::write_output(out / "split.txt", dataset::format_split_spec(opt.split), prov);
    return m;
}

// --- train / predict / eval -------------------------------------------------------------------

inline dataset::PatchStore audited_store(Provenance* prov) {
    return dataset::PatchStore([prov](const std::string& p) {
        return io::decode_patch(io::Reader(detail::read_input(p, prov), p));
    });
}

inline std::string format_train_log(const std::vector<cnn::EpochLog>& log) {
    std::string s = "# epoch\tlr\ttrain_loss\tval_loss\tval_accuracy\n";
    for (const auto& e : log)
        s += std::to_string(e.epoch) + '\t' + io::format_real(e.lr) + '\t' + io::format_real(e.train_loss) + '\t' +
             io::format_real(e.val_loss) + '\t' + io::format_real(e.val_accuracy) + '\n';
    return s;
}

struct TrainSummary {
    std::vector<cnn::EpochLog> log;
    dataset::NormalizationStats stats;
    std::size_t train_size = 0, val_size = 0;
};

/// Trains one task on the manifest's Train split, validating on Val. Input
/// standardisation comes from that task's training entries only.
inline TrainSummary run_train(const fs::path& manifest_path, dataset::Task task, const cnn::TrainConfig& tc,
                              const fs::path& ckpt, Provenance* prov = nullptr, const cnn::EpochCallback& on_epoch = {}) {
    tc.validate();
    detail::read_input(manifest_path, prov);
    const auto m = dataset::read_manifest(manifest_path);
    const auto tr = dataset::entries_for(m, dataset::Split::Train, task);
    const auto va = dataset::entries_for(m, dataset::Split::Val, task);
    if (tr.empty()) throw InsufficientDataError("no training entries for task " + dataset::to_string(task));
    if (va.empty()) throw InsufficientDataError("no validation entries for task " + dataset::to_string(task));
    auto store = audited_store(prov);
    TrainSummary sum;
    sum.train_size = tr.size();
    sum.val_size = va.size();
    sum.stats = dataset::compute_stats(tr, store);
    dataset::BatchLoader tl(tr, task, tc.batch_size, sum.stats, store, true);
    dataset::BatchLoader vl(va, task, tc.batch_size, sum.stats, store, false);
    auto model = cnn::make_table1_model<float>(tc);
    sum.log = cnn::train(model, tl, vl, tc, on_epoch);

    cnn::CheckpointMeta meta{tc, dataset::to_string(task), sum.stats.mean, sum.stats.stddev};
    detail::write_output(ckpt, cnn::encode_checkpoint(model), prov);
    detail::write_output(cnn::sidecar_path(ckpt), cnn::format_meta(meta), prov);
    detail::write_output(ckpt.parent_path() / (dataset::to_string(task) + "_train.tsv"), format_train_log(sum.log), prov);
    return sum;
}

struct PredictSummary {
    std::vector<metrics::ScoredSample> samples;
    std::optional<metrics::TimingStats> timing;
};

/// Scores every entry of `split` that takes part in the checkpoint's task.
/// With timing_repeats > 0, single-image latency is measured on up to 8 of them.
inline PredictSummary run_predict(const fs::path& ckpt, const fs::path& manifest_path, dataset::Split split,
                                  const fs::path& scores_out, std::size_t timing_repeats = 0,
                                  Provenance* prov = nullptr) {
    detail::read_input(ckpt, prov);
    detail::read_input(cnn::sidecar_path(ckpt), prov);
    cnn::CheckpointMeta meta;
    auto model = cnn::load_checkpoint<float>(ckpt, &meta);
    const dataset::Task task = dataset::parse_task(meta.task);
    detail::read_input(manifest_path, prov);
    const auto m = dataset::read_manifest(manifest_path);
    const auto entries = dataset::entries_for(m, split, task);
    if (entries.empty())
        throw EmptyInputError("no " + dataset::to_string(split) + " entries for task " + meta.task);
    auto store = audited_store(prov);
    dataset::BatchLoader loader(entries, task, meta.config.batch_size, {meta.norm_mean, meta.norm_std}, store, false);
    loader.start_epoch(0);

    PredictSummary sum;
    std::size_t i = 0;
    for (std::size_t b = 0; b < loader.batch_count(); ++b) {
        const auto mb = loader.batch(b);
        const auto p = model.forward(mb.inputs, cnn::Mode::Eval);
        for (std::size_t k = 0; k < mb.targets.size(); ++k, ++i)
            sum.samples.push_back({dataset::sample_id(loader.entry_at(i)), static_cast<double>(p[k]), mb.targets[k]});
    }
    detail::write_output(scores_out, metrics::format_scores_csv(sum.samples), prov);

    if (timing_repeats > 0) {
        std::vector<cnn::Tensor<float>> images;
        const auto mb = loader.batch(0);
        const std::size_t per = mb.inputs.size() / mb.inputs.dim(0);
        for (std::size_t k = 0; k < std::min<std::size_t>(8, mb.inputs.dim(0)); ++k) {
            cnn::Tensor<float> one({1, mb.inputs.dim(1), mb.inputs.dim(2), mb.inputs.dim(3)});
            std::copy_n(mb.inputs.data() + k * per, per, one.data());
            images.push_back(std::move(one));
        }
        sum.timing = metrics::time_inference(model, images, timing_repeats);
    }
    return sum;
}

inline std::string format_timing(const metrics::TimingStats& t) {
    return "median_ms=" + io::format_real(t.median_ms) + "\np95_ms=" + io::format_real(t.p95_ms) +
           "\nsamples=" + std::to_string(t.samples) + '\n';
}

/// Metrics report (key=value) and ROC table from a scores file.
inline metrics::Report run_eval(const fs::path& scores, double threshold, const std::string& task,
                                const fs::path& report_out, const fs::path& roc_out, Provenance* prov = nullptr) {
    const auto samples = metrics::parse_scores_csv(detail::read_input(scores, prov), scores.string());
    auto report = metrics::evaluate_scores(samples, threshold, task);
    detail::write_output(report_out, metrics::format_report_kv(report), prov);
    if (report.auc) detail::write_output(roc_out, metrics::format_roc_csv(metrics::roc_auc(samples)), prov);
    return report;
}

// --- driver --------------------------------------------------------------------------------

struct RunOptions {
    std::ostream* log = nullptr;
    Stage from = Stage::Synth;
    Stage to = Stage::Eval;
};

struct RunResult {
    std::map<std::string, metrics::Report> reports;
    std::map<std::string, TrainSummary> training;
};

inline std::uint64_t train_seed(const config::PipelineConfig& cfg, dataset::Task t) {
    return derive_seed(cfg.seed, "train:" + dataset::to_string(t));
}

inline std::string format_summary(const RunResult& r) {
    std::string s;
    for (const auto& [task, rep] : r.reports) s += metrics::format_report_table(rep) + '\n';
    return s;
}

/// synth -> retrieve -> extract -> dataset -> train -> predict -> eval. Every
/// stage writes records/<stage>.rec with its seed and input/output hashes. The
/// first failure is rethrown as StageError naming the stage.
inline RunResult run_pipeline(const config::PipelineConfig& cfg, const fs::path& root, const RunOptions& opt = {}) {
    if (const auto v = config::validate_config(cfg); !v.empty()) {
        std::string msg = "invalid config:";
        for (const auto& s : v) msg += "\n  " + s;
        throw ConfigError(msg);
    }
    const Layout L{fs::absolute(root).lexically_normal()};
    fs::create_directories(L.root);
    const std::string cfg_text = config::format_config(cfg);
    const std::string cfg_hash = io::hash_bytes(cfg_text);
    io::write_text(L.config_copy(), cfg_text);
    auto& audit = io::AccessAudit::instance();
    const auto say = [&](const std::string& s) {
        if (opt.log) *opt.log << s << '\n' << std::flush;
    };

    RunResult result;
    const auto stage = [&](Stage s, std::uint64_t seed, auto&& body) {
        if (s < opt.from || s > opt.to) return;
        audit.set_stage(to_string(s));
        say("[" + to_string(s) + "]");
        Provenance prov(L.root);
        try {
            body(prov);
        } catch (const StageError&) {
            throw;
        } catch (const std::exception& e) {
            audit.set_stage({});
            throw StageError(to_string(s), e.what());
        }
        io::write_text(L.record(s), prov.format(s, seed, cfg_hash));
        audit.set_stage({});
    };

    stage(Stage::Synth, cfg.seed, [&](Provenance& p) {
        const auto f = run_synth(cfg.synth, cfg.seed, L.synth_dir(), &p, subject_counts(cfg));
        say("  frames " + std::to_string(f.size()));
    });
    stage(Stage::Retrieve, 0, [&](Provenance& p) {
        const auto frames = discover(L.frames_index(), "frames.tsv", ".qpi", &p);
        const auto r = run_retrieve(frames, cfg.retrieval_config(), L.phase_dir(), &p);
        say("  phase maps " + std::to_string(r.phases.size()) + ", residues " + std::to_string(r.residues));
    });
    stage(Stage::Extract, 0, [&](Provenance& p) {
        const auto phases = discover(L.phase_index(), "phases.tsv", ".qph", &p);
        const auto r = run_extract(phases, cfg.extraction_config(), L.patch_dir(), &p);
        const auto c = dataset::count_classes(r.patches);
        say("  patches " + std::to_string(r.patches.size()) + " (" + std::to_string(c[0]) + "/" + std::to_string(c[1]) +
            "/" + std::to_string(c[2]) + "), overlapping " + std::to_string(r.totals.overlapping));
    });
    const std::uint64_t ds_seed = derive_seed(cfg.seed, "dataset");
    stage(Stage::Dataset, ds_seed, [&](Provenance& p) {
        const auto recs = dataset::read_patch_index(L.patch_index());
        const auto opts = build_options(cfg.dataset, make_split(cfg.dataset, recs), ds_seed);
        const auto m = run_dataset(L.patch_index(), opts, L.dataset_dir(), &p);
        say("  train " + std::to_string(m.count(dataset::Split::Train)) + ", val " +
            std::to_string(m.count(dataset::Split::Val)) + ", test " + std::to_string(m.count(dataset::Split::Test)));
    });
    stage(Stage::Train, cfg.seed, [&](Provenance& p) {
        for (auto task : cfg.tasks) {
            auto tc = cfg.train;
            tc.seed = train_seed(cfg, task);
            const std::string name = dataset::to_string(task);
            result.training[name] = run_train(L.manifest(), task, tc, L.checkpoint(task), &p, [&](const cnn::EpochLog& e) {
                char buf[160];
                std::snprintf(buf, sizeof buf, "  %s epoch %zu lr %.3g loss %.4f val_loss %.4f val_acc %.4f",
                              name.c_str(), e.epoch, e.lr, e.train_loss, e.val_loss, e.val_accuracy);
                say(buf);
            });
        }
    });
    stage(Stage::Predict, 0, [&](Provenance& p) {
        for (auto task : cfg.tasks) {
            const auto r = run_predict(L.checkpoint(task), L.manifest(), dataset::Split::Test, L.scores(task),
                                       cfg.eval.timing_repeats, &p);
            // Timing varies between runs; it stays out of the provenance record.
            if (r.timing) io::write_text(L.timing(task), format_timing(*r.timing));
            say("  " + dataset::to_string(task) + " scored " + std::to_string(r.samples.size()));
        }
    });
    stage(Stage::Eval, 0, [&](Provenance& p) {
        for (auto task : cfg.tasks) {
            const std::string name = dataset::to_string(task);
            result.reports[name] = run_eval(L.scores(task), cfg.eval.threshold, name, L.report(task), L.roc(task), &p);
            say(metrics::format_report_table(result.reports[name]));
        }
        detail::write_output(L.summary(), format_summary(result), &p);
    });
    return result;
}

}  // namespace qpi::pipeline

#endif  // QPI_PIPELINE_HPP
