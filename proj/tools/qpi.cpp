// qpi: command-line front end for the phase-imaging pipeline.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "qpi/coherence.hpp"
#include "qpi/config.hpp"
#include "qpi/metrics.hpp"
#include "qpi/parallel.hpp"
#include "qpi/pipeline.hpp"

namespace fs = std::filesystem;
using namespace qpi;

namespace {

void print_coherence(double wavelength_nm, double na, double bandwidth_nm) {
    const auto r = coherence::report(coherence::nm_to_um(wavelength_nm), na, coherence::nm_to_um(bandwidth_nm));
    std::printf("{\"wavelength_nm\": %.10g, \"na\": %.10g, \"bandwidth_nm\": %.10g, \"coherence_length_um\": %.10g, "
                "\"lateral_resolution_um\": %.10g, \"longitudinal_frequency_rad_per_um\": %.10g}\n",
                wavelength_nm, na, bandwidth_nm, r.coherence_length_um, r.lateral_resolution_um,
                r.longitudinal_frequency_rad_per_um);
}

config::PipelineConfig config_or_default(const std::string& path) {
    return path.empty() ? config::PipelineConfig{} : config::load_config(path);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Quantitative phase imaging pipeline: synthesis, retrieval, patches, CNN, metrics"};
    app.require_subcommand(1);
    bool det = false;
    app.add_flag("--deterministic", det, "Run every parallel section sequentially");

    // coherence
    auto* coh = app.add_subcommand("coherence", "Coherence length and lateral resolution of a source");
    double wl_nm = 632, na = 0.4, bw_nm = 0;
    coh->add_option("--wavelength-nm", wl_nm, "Central wavelength (nm)")->required();
    coh->add_option("--na", na, "Numerical aperture")->required();
    coh->add_option("--bandwidth-nm", bw_nm, "Spectral width (nm)")->capture_default_str();

    // synth
    auto* syn = app.add_subcommand("synth", "Write synthetic three-wavelength interferograms");
    std::size_t subjects = 10, fovs = 7;
    int cells = 5;
    std::uint64_t seed = 20240601;
    std::string out, cfg_path;
    double noise = -1;
    syn->add_option("--subjects", subjects, "Subjects per class")->capture_default_str();
    syn->add_option("--fovs", fovs, "Fields of view per subject")->capture_default_str();
    syn->add_option("--cells-per-fov", cells, "Cells per field of view")->capture_default_str();
    syn->add_option("--noise-sigma", noise, "Additive noise std (grey levels)");
    syn->add_option("--seed", seed, "Root seed")->capture_default_str();
    syn->add_option("--config", cfg_path, "Take the remaining [synth] settings from a config file");
    syn->add_option("--out", out, "Output directory")->required();

    // retrieve
    auto* ret = app.add_subcommand("retrieve", "Recover unwrapped phase maps from interferograms");
    std::string in;
    std::optional<double> radius_bins;
    double radius_fraction = 0.75;
    bool no_plane = false, hann = false;
    ret->add_option("--in", in, "Interferogram file, directory or frames.tsv")->required();
    ret->add_option("--out", out, "Output directory")->required();
    ret->add_option("--filter-radius", radius_bins, "Filter radius in frequency bins (default: auto)");
    ret->add_option("--radius-fraction", radius_fraction, "Auto radius as a fraction of the carrier distance")
        ->capture_default_str();
    ret->add_flag("--no-plane-fit", no_plane, "Keep the background plane");
    ret->add_flag("--hann", hann, "Apply a Hann window before the transform");

    // extract
    auto* ext = app.add_subcommand("extract", "Segment cells and cut normalized patches");
    std::string phase_dir;
    double threshold = patches::kDefaultEntropyThreshold;
    std::size_t min_area = patches::kDefaultMinArea;
    int window = patches::kDefaultWindow, bins = patches::kDefaultBins;
    ext->add_option("--phase-dir", phase_dir, "Directory of phase maps (or phases.tsv)")->required();
    ext->add_option("--out", out, "Output directory")->required();
    ext->add_option("--entropy-threshold", threshold, "Entropy threshold (nats)")->capture_default_str();
    ext->add_option("--min-area", min_area, "Minimum component area (px)")->capture_default_str();
    ext->add_option("--window", window, "Entropy window side (odd)")->capture_default_str();
    ext->add_option("--bins", bins, "Histogram bins")->capture_default_str();

    // dataset build
    auto* ds = app.add_subcommand("dataset", "Dataset manifests");
    ds->require_subcommand(1);
    auto* dsb = ds->add_subcommand("build", "Split by subject, balance, augment");
    std::string patch_dir, split_spec;
    std::size_t per_class = 0;
    bool augment = false, augment_val = false, channels = false, trainval = false;
    dsb->add_option("--patch-dir", patch_dir, "Directory holding patches.tsv")->required();
    dsb->add_option("--split-spec", split_spec, "Split file: lines 'train: ids', 'val: ids', 'test: ids'")->required();
    dsb->add_option("--per-class", per_class, "Entries per class in the balancing scope (0: smallest class)")
        ->capture_default_str();
    dsb->add_option("--seed", seed, "Root seed")->capture_default_str();
    dsb->add_option("--out", out, "Output directory")->required();
    dsb->add_flag("--augment", augment, "Add 45 and 135 degree rotations to train");
    dsb->add_flag("--augment-val", augment_val, "Add rotations to val as well");
    dsb->add_flag("--channels-as-samples", channels, "One entry per wavelength channel");
    dsb->add_flag("--balance-train-val", trainval, "Balance the pooled train+val set");

    // train
    auto* trn = app.add_subcommand("train", "Train one binary task");
    std::string manifest, task = "hvi";
    trn->add_option("--manifest", manifest, "Dataset manifest")->required();
    trn->add_option("--task", task, "hvi or evl")->check(CLI::IsMember({"hvi", "evl"}))->capture_default_str();
    trn->add_option("--config", cfg_path, "Config file ([run] seed and [train] section)");
    trn->add_option("--out", out, "Checkpoint path")->required();

    // predict
    auto* prd = app.add_subcommand("predict", "Score a split with a checkpoint");
    std::string ckpt, split = "test", scores_out;
    std::size_t timing = 0;
    prd->add_option("--ckpt", ckpt, "Checkpoint")->required();
    prd->add_option("--manifest", manifest, "Dataset manifest")->required();
    prd->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}))
        ->capture_default_str();
    prd->add_option("--scores-out", scores_out, "Scores CSV")->required();
    prd->add_option("--timing-repeats", timing, "Also time single-image inference (>= 10)");

    // eval
    auto* evl = app.add_subcommand("eval", "Metrics and ROC from a scores file");
    std::string scores, roc_out, report_out;
    double thr = 0.5;
    evl->add_option("--scores", scores, "Scores CSV")->required();
    evl->add_option("--threshold", thr, "Decision threshold")->capture_default_str();
    evl->add_option("--roc-out", roc_out, "ROC CSV output");
    evl->add_option("--report-out", report_out, "key=value report output");
    evl->add_option("--task", task, "Task name for the report");

    // run
    auto* run = app.add_subcommand("run", "Full pipeline from a config");
    std::string from = "synth", to = "eval";
    run->add_option("--config", cfg_path, "Config file (default settings when omitted)");
    run->add_option("--out", out, "Run directory")->required();
    run->add_option("--from", from, "First stage")->capture_default_str();
    run->add_option("--to", to, "Last stage")->capture_default_str();

    // plot-roc
    auto* plt = app.add_subcommand("plot-roc", "SVG of a ROC CSV");
    std::string roc_in, title = "ROC";
    plt->add_option("--roc", roc_in, "ROC CSV")->required();
    plt->add_option("--out", out, "SVG output")->required();
    plt->add_option("--title", title, "Plot title")->capture_default_str();

    // check-config
    auto* chk = app.add_subcommand("check-config", "Validate a config file and print its canonical form");
    chk->add_option("--config", cfg_path, "Config file")->required();

    CLI11_PARSE(app, argc, argv);
    set_deterministic(det);

    try {
        if (*coh) {
            print_coherence(wl_nm, na, bw_nm);
        } else if (*syn) {
            auto cfg = config_or_default(cfg_path);
            if (!cfg_path.empty() && syn->count("--seed") == 0) seed = cfg.seed;
            auto s = cfg.synth;
            if (cfg_path.empty() || syn->count("--subjects")) s.subjects_per_class = subjects;
            if (cfg_path.empty() || syn->count("--fovs")) s.fovs_per_subject = fovs;
            if (cfg_path.empty() || syn->count("--cells-per-fov")) s.cells_per_fov = cells;
            if (noise >= 0) s.noise_sigma = noise;
            const auto frames = pipeline::run_synth(s, seed, out);
            std::printf("wrote %zu frames to %s\n", frames.size(), out.c_str());
        } else if (*ret) {
            retrieval::RetrievalConfig rc;
            rc.radius_fraction = radius_fraction;
            rc.filter_radius_bins = radius_bins;
            rc.plane_fit = !no_plane;
            rc.hann_window = hann;
            const auto frames = pipeline::discover(in, "frames.tsv", ".qpi");
            const auto r = pipeline::run_retrieve(frames, rc, out);
            std::printf("wrote %zu phase maps to %s (residues %zu)\n", r.phases.size(), out.c_str(), r.residues);
        } else if (*ext) {
            patches::ExtractionConfig ec;
            ec.entropy_threshold = threshold;
            ec.min_area = min_area;
            ec.window_px = window;
            ec.bins = bins;
            const auto phases = pipeline::discover(phase_dir, "phases.tsv", ".qph");
            const auto r = pipeline::run_extract(phases, ec, out);
            std::printf("wrote %zu patches from %zu fields to %s (small %zu, overlapping %zu)\n", r.patches.size(),
                        r.fields, out.c_str(), r.totals.rejected_small, r.totals.overlapping);
        } else if (*dsb) {
            dataset::BuildOptions o;
            o.split = dataset::parse_split_spec(io::read_text(split_spec), split_spec);
            o.per_class = per_class;
            o.seed = derive_seed(seed, "dataset");
            o.augment_train = augment;
            o.augment_val = augment_val;
            o.channels_as_samples = channels;
            o.scope = trainval ? dataset::BalanceScope::TrainVal : dataset::BalanceScope::Train;
            const fs::path index = fs::is_directory(patch_dir) ? fs::path(patch_dir) / "patches.tsv" : fs::path(patch_dir);
            const auto m = pipeline::run_dataset(index, o, out);
            for (auto s : dataset::kAllSplits) {
                const auto c = m.class_counts(s);
                std::printf("%-5s %6zu entries  healthy %zu  early %zu  late %zu\n", dataset::to_string(s).c_str(),
                            m.count(s), c[0], c[1], c[2]);
            }
        } else if (*trn) {
            const auto cfg = config_or_default(cfg_path);
            auto tc = cfg.train;
            const auto t = dataset::parse_task(task);
            tc.seed = pipeline::train_seed(cfg, t);
            const auto sum = pipeline::run_train(manifest, t, tc, out, nullptr, [](const cnn::EpochLog& e) {
                std::printf("epoch %zu lr %.3g loss %.4f val_loss %.4f val_acc %.4f\n", e.epoch, e.lr, e.train_loss,
                            e.val_loss, e.val_accuracy);
                std::fflush(stdout);
            });
            std::printf("trained on %zu, validated on %zu; checkpoint %s\n", sum.train_size, sum.val_size, out.c_str());
        } else if (*prd) {
            const auto r = pipeline::run_predict(ckpt, manifest, dataset::parse_split(split), scores_out, timing);
            std::printf("scored %zu samples -> %s\n", r.samples.size(), scores_out.c_str());
            if (r.timing) std::printf("%s", pipeline::format_timing(*r.timing).c_str());
        } else if (*evl) {
            const auto samples = metrics::parse_scores_csv(io::read_text(scores), scores);
            const auto rep = metrics::evaluate_scores(samples, thr, evl->count("--task") ? task : std::string{});
            std::printf("%s", metrics::format_report_table(rep).c_str());
            if (!report_out.empty()) io::write_text(report_out, metrics::format_report_kv(rep));
            if (!roc_out.empty()) {
                if (!rep.auc) throw DegenerateRocError("cannot write a ROC curve: both classes are required");
                io::write_text(roc_out, metrics::format_roc_csv(metrics::roc_auc(samples)));
            }
        } else if (*run) {
            const auto cfg = config_or_default(cfg_path);
            pipeline::RunOptions o{&std::cout, pipeline::parse_stage(from), pipeline::parse_stage(to)};
            pipeline::run_pipeline(cfg, out, o);
        } else if (*plt) {
            const auto roc = metrics::parse_roc_csv(io::read_text(roc_in), roc_in);
            io::write_text(out, metrics::roc_svg(roc, title));
            std::printf("wrote %s (AUC %.4f)\n", out.c_str(), roc.auc);
        } else if (*chk) {
            const auto cfg = config::parse_config(io::read_text(cfg_path), cfg_path);
            const auto v = config::validate_config(cfg);
            if (!v.empty()) {
                for (const auto& s : v) std::fprintf(stderr, "violation: %s\n", s.c_str());
                return 1;
            }
            std::printf("%s", config::format_config(cfg).c_str());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
