#include <gtest/gtest.h>

#include <set>

#include "qpi/pipeline.hpp"
#include "support.hpp"

using namespace qpi;
using namespace qpi::pipeline;

namespace {

config::PipelineConfig smoke() {
    auto c = config::load_config(std::filesystem::path(QPI_CONFIG_DIR) / "smoke.ini");
    c.eval.timing_repeats = 10;
    return c;
}

/// One smoke run shared by the read-only tests below.
class SmokeRun : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        set_deterministic(true);
        root_ = test::scratch_dir("pipeline_smoke");
        io::AccessAudit::instance().clear();
        result_ = new RunResult(run_pipeline(smoke(), root_));
        accesses_ = io::AccessAudit::instance().accesses();
    }
    static void TearDownTestSuite() {
        delete result_;
        result_ = nullptr;
    }

    static inline std::filesystem::path root_;
    static inline RunResult* result_ = nullptr;
    static inline std::vector<io::AccessAudit::Access> accesses_;
};

}  // namespace

TEST_F(SmokeRun, CompletesWithReports) {
    const Layout L{root_};
    ASSERT_EQ(result_->reports.size(), 2u);
    for (auto t : {dataset::Task::HealthyVsInfected, dataset::Task::EarlyVsLate}) {
        EXPECT_TRUE(std::filesystem::exists(L.report(t)));
        EXPECT_TRUE(std::filesystem::exists(L.checkpoint(t)));
        EXPECT_TRUE(std::filesystem::exists(L.scores(t)));
    }
    EXPECT_TRUE(std::filesystem::exists(L.summary()));
    for (Stage s : kAllStages) EXPECT_TRUE(std::filesystem::exists(L.record(s))) << to_string(s);
}

TEST_F(SmokeRun, NoTestReadsBeforePredict) {
    const Layout L{root_};
    const auto m = dataset::read_manifest(L.manifest());
    std::set<std::string> test_files;
    for (const auto& e : m.select(dataset::Split::Test))
        test_files.insert(std::filesystem::weakly_canonical(e.patch_path).string());
    ASSERT_FALSE(test_files.empty());
    std::size_t test_reads = 0;
    for (const auto& a : accesses_) {
        if (!test_files.count(a.path)) continue;
        ++test_reads;
        EXPECT_TRUE(a.stage == "predict" || a.stage == "eval") << a.stage << " read " << a.path;
    }
    EXPECT_GT(test_reads, 0u);
}

TEST_F(SmokeRun, StageRerunReproducesRecord) {
    const Layout L{root_};
    for (Stage s : {Stage::Retrieve, Stage::Extract, Stage::Dataset, Stage::Train, Stage::Predict}) {
        const std::string before = io::read_text(L.record(s));
        RunOptions opt;
        opt.from = opt.to = s;
        run_pipeline(smoke(), root_, opt);
        EXPECT_EQ(io::read_text(L.record(s)), before) << to_string(s);
    }
}

TEST_F(SmokeRun, RecordsListHashedInputs) {
    const auto rec = parse_record(io::read_text(Layout{root_}.record(Stage::Train)));
    EXPECT_EQ(rec.stage, "train");
    EXPECT_TRUE(rec.inputs.count("dataset/manifest.tsv"));
    EXPECT_TRUE(rec.outputs.count("model/hvi.qpn"));
    EXPECT_EQ(rec.outputs.at("model/hvi.qpn"), io::hash_bytes(io::read_file(root_ / "model/hvi.qpn")));
}

TEST(Pipeline, DeterministicAcrossRuns) {
    set_deterministic(true);
    const auto a = test::scratch_dir("pipeline_det_a"), b = test::scratch_dir("pipeline_det_b");
    run_pipeline(smoke(), a);
    run_pipeline(smoke(), b);
    for (const char* f : {"eval/hvi_metrics.txt", "eval/evl_metrics.txt", "model/hvi.qpn", "model/evl.qpn",
                          "dataset/manifest.tsv", "report.txt"})
        EXPECT_EQ(io::read_file(a / f), io::read_file(b / f)) << f;
}

TEST(Pipeline, EmptyMaskStopsAtDataset) {
    auto c = smoke();
    c.extract.threshold = 10.0;
    try {
        run_pipeline(c, test::scratch_dir("pipeline_empty"));
        FAIL() << "expected StageError";
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "dataset");
        EXPECT_NE(std::string(e.what()).find("class"), std::string::npos) << e.what();
    }
}

TEST(Pipeline, InvalidConfigRejectedUpFront) {
    auto c = smoke();
    c.train.momentum = 1.5;
    const auto dir = test::scratch_dir("pipeline_invalid");
    EXPECT_THROW(run_pipeline(c, dir), ConfigError);
    EXPECT_FALSE(std::filesystem::exists(dir / "synth"));
}

TEST(Pipeline, PaperSplitPlansEveryCoveredSubject) {
    config::PipelineConfig c;
    c.dataset.split = "paper";
    EXPECT_EQ(subject_counts(c), (std::array<std::size_t, 3>{8, 15, 13}));
    std::vector<dataset::ManifestEntry> recs;
    for (const auto& s : plan_subjects(subject_counts(c))) recs.push_back({s.id + ".qpa", s.label, s.id});
    const auto spec = make_split(c.dataset, recs);
    EXPECT_NO_THROW(dataset::split_by_subject(recs, spec));
    EXPECT_EQ(spec.train_ids.size() + spec.val_ids.size() + spec.test_ids.size(), 36u);
}
