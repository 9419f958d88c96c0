// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
//   acceptance --workdir DIR [--only 1,4,9]

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numbers>
#include <set>

#include "qpi/cnn/gradcheck.hpp"
#include "qpi/coherence.hpp"
#include "qpi/config.hpp"
#include "qpi/dataset.hpp"
#include "qpi/forward_model.hpp"
#include "qpi/metrics.hpp"
#include "qpi/patch_extraction.hpp"
#include "qpi/phase_retrieval.hpp"
#include "qpi/pipeline.hpp"

using namespace qpi;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path g_workdir;

// --- 1 -----------------------------------------------------------------------------------

Outcome coherence_formulas() {
    const double theta = std::asin(coherence::kObjectiveNa);
    const double lc = coherence::monochromatic_coherence_length(0.632, theta);
    const double dx = coherence::lateral_resolution(0.632, 0.4);
    double worst = 0.0;
    for (double lam : {0.460, 0.532, 0.632}) {
        const double a = coherence::coherence_length({lam, 0.0, theta});
        const double b = coherence::monochromatic_coherence_length(lam, theta);
        worst = std::max(worst, std::abs(a - b) / b);
    }
    const bool ok = std::abs(lc - 7.572) <= 0.001 && std::abs(dx - 0.9638) <= 0.0001 && worst <= 1e-12;
    return {ok, fmt("L_c(0.632, asin 0.4) = %.6f um (want 7.572 +- 0.001), lateral = %.6f um, "
                    "two-form rel diff %.2e",
                    lc, dx, worst)};
}

// --- 2 -----------------------------------------------------------------------------------

Outcome table1_shapes() {
    cnn::Model<float> m(cnn::table1_specs(), {3, 120, 120}, 1);
    const std::map<std::string, cnn::Shape> want{
        {"conv2", {1, 96, 61, 61}}, {"pool2", {1, 96, 30, 30}}, {"conv3", {1, 128, 16, 16}},
        {"conv4", {1, 256, 16, 16}}, {"pool4", {1, 256, 8, 8}}, {"conv5", {1, 256, 5, 5}},
        {"fc6", {1, 1000}},         {"fc7", {1, 1}}};
    std::size_t matched = 0;
    std::string bad;
    for (const auto& row : m.trace()) {
        const auto it = want.find(row.name);
        if (it == want.end()) continue;
        if (row.output == it->second)
            ++matched;
        else
            bad += " " + row.name;
    }
    const auto y = m.forward(cnn::Tensor<float>({1, 3, 120, 120}, 0.5f), cnn::Mode::Eval);
    const bool ok = matched == want.size() && y.shape() == cnn::Shape{1, 1};
    return {ok, fmt("%zu/%zu rows match%s, %zu parameters", matched, want.size(), bad.c_str(), m.parameter_count())};
}

// --- 3 -----------------------------------------------------------------------------------

cnn::Tensor<double> random_tensor(cnn::Shape s, std::uint64_t seed) {
    cnn::Tensor<double> t(std::move(s));
    Rng rng(seed);
    for (auto& v : t.values()) v = gaussian(rng, 0.0, 1.0);
    return t;
}

Outcome gradients() {
    using namespace cnn;
    const std::vector<std::pair<LayerSpec, Shape>> cases{
        {conv_spec("conv_s1", 3, 4, 1, 1), {2, 3, 7, 7}},
        {conv_spec("conv_s2", 3, 3, 2, 2), {2, 2, 9, 9}},
        {conv_spec("conv_ceil", 3, 2, 2, 1, Rounding::Ceil), {2, 2, 8, 8}},
        {pool_spec("pool", 3, 2), {2, 2, 9, 9}},
        {dense_spec("dense", 5), {3, 7}},
        {simple_spec(LayerKind::ReLU, "relu"), {4, 9}},
        {simple_spec(LayerKind::Tanh, "tanh"), {4, 9}},
        {simple_spec(LayerKind::Sigmoid, "sigmoid"), {4, 9}},
        {dropout_spec("dropout", 0.5), {4, 10}},
        {simple_spec(LayerKind::Flatten, "flatten"), {2, 3, 4, 4}},
    };
    GradCheck all;
    std::uint64_t seed = 100;
    for (const auto& [spec, shape] : cases) {
        auto layer = make_layer<double>(spec, shape, seed);
        Rng rng(seed + 1);
        for (auto* p : layer->parameters())
            for (auto& v : p->value.values()) v = gaussian(rng, 0.0, 0.5);
        all.merge(check_layer(*layer, random_tensor(shape, seed + 2), seed + 3));
        seed += 10;
    }
    const std::vector<LayerSpec> stack{
        conv_spec("conv1", 3, 4, 1, 1), simple_spec(LayerKind::ReLU, "relu1"),
        conv_spec("conv2", 3, 4, 2, 2), simple_spec(LayerKind::ReLU, "relu2"),
        pool_spec("pool2", 2, 2), dropout_spec("drop2", 0.2),
        conv_spec("conv3", 3, 5, 2, 1, Rounding::Ceil), simple_spec(LayerKind::ReLU, "relu3"),
        simple_spec(LayerKind::Flatten, "flat"), dense_spec("fc4", 6),
        simple_spec(LayerKind::Tanh, "tanh4"), dropout_spec("drop4", 0.5),
        dense_spec("fc5", 1), simple_spec(LayerKind::Sigmoid, "sig5")};
    Model<double> m(stack, {3, 12, 12}, 7, 0.0, 1e-3, InitScheme::HeNormal);
    all.merge(check_model(m, random_tensor({3, 3, 12, 12}, 8), {1, 0, 1}, 9));
    return {all.max_rel_error < 1e-3,
            fmt("max rel error %.2e over %zu probes (worst %s)", all.max_rel_error, all.checked, all.worst.c_str())};
}

// --- 4 -----------------------------------------------------------------------------------

Outcome phase_round_trip() {
    constexpr std::size_t n = 512, border = 8, trials = 24;
    double worst = 0.0, peak_max = 0.0;
    for (std::size_t k = 0; k < trials; ++k) {
        Rng rng(derive_seed(2024, "roundtrip:" + std::to_string(k)));
        const ClassLabel cls = kAllClasses[k % 3];
        // opd capped so the blue channel stays under 3 rad with inclusions
        const double radius = uniform(rng, 3.7, 4.3), opd = uniform(rng, 0.10, 0.14);
        const auto spec = forward::random_phantom(cls, 256 + uniform(rng, -60, 60), 256 + uniform(rng, -60, 60),
                                                  radius, opd, rng);
        const auto ch = static_cast<Channel>(k % 3);
        const auto truth = forward::make_phantom_field(spec, n, n, ch);
        for (double v : truth.values_rad.storage()) peak_max = std::max(peak_max, v);
        forward::FringeParams fp;
        fp.noise_sigma = forward::noise_sigma_for_snr(fp.background, fp.modulation, 30.0);
        fp.seed = derive_seed(2024, "roundtrip-noise:" + std::to_string(k));
        const auto res = retrieval::retrieve(forward::synthesize_interferogram(truth, fp));

        double s = 0.0;
        std::size_t cnt = 0;
        for (std::size_t r = border; r + border < n; ++r)
            for (std::size_t c = border; c + border < n; ++c, ++cnt) s += res.phase.values_rad(r, c) - truth.values_rad(r, c);
        const double off = s / static_cast<double>(cnt);
        double e = 0.0;
        for (std::size_t r = border; r + border < n; ++r)
            for (std::size_t c = border; c + border < n; ++c) {
                const double d = res.phase.values_rad(r, c) - truth.values_rad(r, c) - off;
                e += d * d;
            }
        worst = std::max(worst, std::sqrt(e / static_cast<double>(cnt)));
    }
    return {worst < 0.03 && peak_max <= 3.0,
            fmt("%zu phantoms at 30 dB, peak <= %.3f rad, worst interior RMS %.4f rad", trials, peak_max, worst)};
}

// --- 5 -----------------------------------------------------------------------------------

PhaseMap wrap(const RealGrid& g) {
    RealGrid w(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.size(); ++i) w[i] = std::remainder(g[i], 2 * std::numbers::pi);
    return PhaseMap{w, true, 0.632};
}

Outcome unwrapping() {
    std::string why;
    std::size_t vortex_ok = 0, vortices = 0;
    for (int charge : {1, -1})
        for (double cy : {10.5, 16.5, 25.5})
            for (double cx : {12.5, 20.5}) {
                ++vortices;
                RealGrid g(33, 33);
                for (std::size_t r = 0; r < 33; ++r)
                    for (std::size_t c = 0; c < 33; ++c) g(r, c) = charge * std::atan2(r - cy, c - cx);
                const auto res = retrieval::find_residues(wrap(g));
                if (res.size() == 1 && res[0].charge == charge &&
                    res[0].row == static_cast<std::size_t>(cy) && res[0].col == static_cast<std::size_t>(cx))
                    ++vortex_ok;
            }
    double ramp_err = 0.0;
    std::size_t ramp_res = 0;
    for (auto [a, b] : {std::pair{0.3, 0.2}, {1.1, -0.7}, {-2.0, 2.5}, {0.05, 3.0}}) {
        RealGrid g(64, 80);
        for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < g.cols(); ++c) g(r, c) = a * r + b * c;
        const auto u = retrieval::goldstein_unwrap(wrap(g));
        ramp_res += u.residue_count;
        const double off = u.phase.values_rad[0] - g[0];
        for (std::size_t i = 0; i < g.size(); ++i)
            ramp_err = std::max(ramp_err, std::abs(u.phase.values_rad[i] - g[i] - off));
    }
    const bool ok = vortex_ok == vortices && ramp_res == 0 && ramp_err < 1e-9;
    return {ok, fmt("%zu/%zu vortices give one residue of the right sign and cell, ramps unwrap to %.1e rad",
                    vortex_ok, vortices, ramp_err)};
}

// --- 6 -----------------------------------------------------------------------------------

Outcome extraction_recall() {
    const config::PipelineConfig cfg;  // pipeline defaults: snapped carrier, filter at 0.75 of the carrier distance
    const auto rc = cfg.retrieval_config();
    const auto ec = cfg.extraction_config();
    std::size_t scenes_ok = 0, total = 0;
    std::string failures;
    for (std::uint64_t seed = 1; seed <= 20; ++seed, ++total) {
        forward::SubjectSpec s;
        s.subject_id = "S" + std::to_string(seed);
        s.class_label = kAllClasses[seed % 3];
        s.cell_count = 5;
        s.seed = derive_seed(77, "scene:" + std::to_string(seed));
        s.fringe.carrier = cfg.effective_carrier();
        s.fringe.noise_sigma = cfg.synth.noise_sigma;
        const auto sc = forward::make_subject(s);
        std::array<PhaseMap, 3> ph;
        for (std::size_t c = 0; c < 3; ++c) ph[c] = retrieval::retrieve(sc.frames[c], rc).phase;
        const auto out = patches::extract_patches({&ph[0], &ph[1], &ph[2]}, ec);
        bool ok = out.size() == 5;
        for (const auto& p : out)
            ok = ok && p.normalized && p.channels[0].rows() == 60 && p.channels[0].cols() == 60;
        for (const auto& cell : sc.cells) {
            int hits = 0;
            for (const auto& p : out) hits += p.bbox.contains(cell.center_row, cell.center_col);
            ok = ok && hits == 1;
        }
        if (ok)
            ++scenes_ok;
        else
            failures += fmt(" seed%llu:%zu", static_cast<unsigned long long>(seed), out.size());
    }
    const auto sized = [](std::size_t a) {
        patches::Component c;
        for (std::size_t i = 0; i < a; ++i) c.pixels.push_back(i);
        return c;
    };
    const auto kept = patches::reject_artifacts({sized(1599), sized(1600), sized(1)});
    const bool boundary = kept.size() == 1 && kept[0].area() == 1600;
    return {scenes_ok == total && boundary,
            fmt("%zu/%zu scenes give 5 patches with one centre each%s; 1599 rejected, 1600 kept: %s", scenes_ok, total,
                failures.c_str(), boundary ? "yes" : "no")};
}

// --- 7 -----------------------------------------------------------------------------------

Outcome bookkeeping() {
    std::vector<dataset::ManifestEntry> recs;
    std::map<ClassLabel, std::vector<std::string>> subjects;
    const std::array<std::size_t, 3> counts{632, 602, 611};
    for (std::size_t c = 0; c < 3; ++c) {
        const auto label = kAllClasses[c];
        for (int k = 0; k < 4; ++k) subjects[label].push_back(std::string(1, "HEL"[c]) + std::to_string(k));
        for (std::size_t i = 0; i < counts[c]; ++i)
            recs.push_back({subjects[label][i % 4] + "_" + std::to_string(i) + ".qpa", label, subjects[label][i % 4]});
    }
    dataset::SplitSpec split;
    for (const auto& [label, ids] : subjects) {
        split.train_ids.insert(ids.begin(), ids.begin() + 3);
        split.val_ids.insert(ids[3]);
    }
    const auto m = dataset::build_manifest(recs, dataset::channels_as_samples_preset(split, 600, 5));
    std::size_t base = 0, all = 0;
    for (const auto& e : m.entries) {
        if (e.split == dataset::Split::Test) continue;
        ++all;
        base += e.augmentation == dataset::Augmentation::None;
    }
    const auto leaks = m.leaked_subjects();
    return {base == 5400 && all == 16200 && leaks.empty(),
            fmt("train+val base %zu -> augmented %zu, leaked subjects %zu", base, all, leaks.size())};
}

// --- 8 -----------------------------------------------------------------------------------

Outcome learning() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto cfg = config::load_config(fs::path(QPI_CONFIG_DIR) / "default.ini");
    const fs::path root = g_workdir / "learning";
    fs::remove_all(root);
    pipeline::RunOptions opt;
    opt.log = &std::cerr;
    opt.to = pipeline::Stage::Train;
    const auto r = pipeline::run_pipeline(cfg, root, opt);
    const double secs = seconds_since(t0);

    const auto patches = dataset::read_patch_index(pipeline::Layout{root}.patch_index());
    const auto per_class = dataset::count_classes(patches);
    const auto m = dataset::read_manifest(pipeline::Layout{root}.manifest());
    const double hvi = r.training.at("hvi").log.back().val_accuracy;
    const double evl = r.training.at("evl").log.back().val_accuracy;
    const bool enough = *std::min_element(per_class.begin(), per_class.end()) >= 300;
    const bool ok = enough && m.leaked_subjects().empty() && hvi >= 0.90 && evl >= 0.90 && hvi >= evl && secs <= 1800;
    return {ok, fmt("patches %zu/%zu/%zu, final val accuracy hvi %.3f evl %.3f (want both >= 0.90, hvi >= evl), %.0f s",
                    per_class[0], per_class[1], per_class[2], hvi, evl, secs)};
}

// --- 9 -----------------------------------------------------------------------------------

Outcome metrics_oracle() {
    using namespace metrics;
    std::mt19937_64 rng(9);
    std::uniform_int_distribution<std::uint64_t> cnt(0, 40);
    std::size_t rate_mismatch = 0;
    for (int i = 0; i < 1000; ++i) {
        const ConfusionCounts want{cnt(rng), cnt(rng), cnt(rng) + 1, cnt(rng) + 1};
        std::vector<ScoredSample> s;
        const auto add = [&](std::uint64_t k, double score, int truth) {
            for (std::uint64_t j = 0; j < k; ++j) s.push_back({"x" + std::to_string(s.size()), score, truth});
        };
        add(want.tp, 0.9, 1);
        add(want.fn, 0.1, 1);
        add(want.fp, 0.7, 0);
        add(want.tn, 0.2, 0);
        const auto c = confusion(s);
        const auto r = rates(c);
        const double tp = want.tp, fp = want.fp, tn = want.tn, fn = want.fn;
        const double den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
        const double mcc = den == 0 ? 0.0 : (tp * tn - fp * fn) / std::sqrt(den);
        if (!(c == want) || r.sensitivity != tp / (tp + fn) || r.specificity != tn / (tn + fp) ||
            r.accuracy != (tp + tn) / (tp + tn + fp + fn) || r.mcc != mcc)
            ++rate_mismatch;
    }
    std::size_t auc_mismatch = 0, sets = 0;
    std::uniform_real_distribution<double> u(0, 1);
    for (std::size_t n = 2; n <= 500; n += 7)
        for (int levels : {0, 4, 20}) {
            std::vector<ScoredSample> s(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double x = u(rng);
                s[i] = {"s" + std::to_string(i), levels ? std::floor(x * levels) / levels : x, u(rng) < 0.5};
            }
            s[0].truth = 1;
            s[1].truth = 0;
            double wins = 0;
            std::size_t pairs = 0;
            for (const auto& p : s)
                if (p.truth)
                    for (const auto& q : s)
                        if (!q.truth) {
                            ++pairs;
                            wins += p.score > q.score ? 1.0 : p.score == q.score ? 0.5 : 0.0;
                        }
            ++sets;
            auc_mismatch += roc_auc(s).auc != wins / static_cast<double>(pairs);
        }
    const double hand = rates({90, 9, 91, 10}).mcc;
    return {rate_mismatch == 0 && auc_mismatch == 0 && std::abs(hand - 0.8100) <= 1e-4,
            fmt("rate mismatches %zu/1000, AUC mismatches %zu/%zu, hand-case MCC %.6f", rate_mismatch, auc_mismatch, sets,
                hand)};
}

// --- 10 ----------------------------------------------------------------------------------

Outcome determinism() {
    set_deterministic(true);
    const auto cfg = config::load_config(fs::path(QPI_CONFIG_DIR) / "smoke.ini");
    const fs::path a = g_workdir / "det_a", b = g_workdir / "det_b";
    fs::remove_all(a);
    fs::remove_all(b);
    pipeline::run_pipeline(cfg, a);
    pipeline::run_pipeline(cfg, b);
    std::size_t same = 0, files = 0;
    std::string diff;
    for (const char* f : {"eval/hvi_metrics.txt", "eval/evl_metrics.txt", "model/hvi.qpn", "model/evl.qpn",
                          "model/hvi.qpn.cfg", "model/evl.qpn.cfg", "report.txt"}) {
        ++files;
        if (fs::exists(a / f) && io::read_file(a / f) == io::read_file(b / f))
            ++same;
        else
            diff += std::string(" ") + f;
    }
    return {same == files, fmt("%zu/%zu report and checkpoint files byte-identical across two runs%s", same, files,
                               diff.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    std::string workdir = "acceptance_work";
    std::vector<int> only;
    app.add_option("--workdir", workdir, "scratch directory for pipeline runs");
    app.add_option("--only", only, "run only these criteria")->delimiter(',');
    CLI11_PARSE(app, argc, argv);
    g_workdir = fs::absolute(workdir);
    fs::create_directories(g_workdir);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"coherence formulas", coherence_formulas},
        {"table 1 shapes", table1_shapes},
        {"gradient check", gradients},
        {"phase round trip", phase_round_trip},
        {"unwrapping", unwrapping},
        {"patch extraction recall", extraction_recall},
        {"dataset bookkeeping", bookkeeping},
        {"end-to-end learning", learning},
        {"metrics oracle", metrics_oracle},
        {"determinism", determinism},
    };
    const std::set<int> chosen(only.begin(), only.end());
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i + 1);
        if (!chosen.empty() && !chosen.count(id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("criterion %2d %-24s %s  %s  [%.1f s]\n", id, criteria[i].first.c_str(), o.pass ? "PASS" : "FAIL",
                    o.detail.c_str(), seconds_since(t0));
        std::fflush(stdout);
    }
    return failed ? 1 : 0;
}
