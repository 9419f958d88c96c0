#include <gtest/gtest.h>

#include <algorithm>

#include "qpi/config.hpp"

using namespace qpi;
using namespace qpi::config;

namespace {

const std::filesystem::path kConfigs = QPI_CONFIG_DIR;

bool mentions(const std::vector<std::string>& v, const std::string& needle) {
    return std::any_of(v.begin(), v.end(), [&](const std::string& s) { return s.find(needle) != std::string::npos; });
}

}  // namespace

TEST(Validate, DefaultsAreValid) { EXPECT_TRUE(validate_config(PipelineConfig{}).empty()); }

TEST(Validate, ShippedConfigsLoad) {
    for (const char* name : {"default.ini", "paper.ini", "smoke.ini"})
        EXPECT_NO_THROW(load_config(kConfigs / name)) << name;
}

TEST(Validate, OrderOverlapOnSmallFrames) {
    PipelineConfig c;
    c.synth.canvas = 128;
    c.synth.carrier = {0.01, 0.0};
    c.synth.snap_carrier = false;
    c.retrieve.radius_bins = 20.0;
    EXPECT_TRUE(mentions(validate_config(c), "order overlap"));
}

TEST(Validate, MomentumOutOfRange) {
    PipelineConfig c;
    c.train.momentum = 1.5;
    EXPECT_TRUE(mentions(validate_config(c), "train.momentum"));
}

TEST(Validate, AliasedCarrier) {
    PipelineConfig c;
    c.synth.carrier = {0.6, 0.0};
    EXPECT_TRUE(mentions(validate_config(c), "aliasing"));
}

TEST(Validate, BatchLargerThanCorpus) {
    PipelineConfig c;
    c.synth.subjects_per_class = 3;
    c.synth.fovs_per_subject = 1;
    c.synth.cells_per_fov = 2;
    c.train.batch_size = 64;
    EXPECT_TRUE(mentions(validate_config(c), "batch_size"));
}

TEST(Validate, PaperSplitAcceptedWithAnySubjectCount) {
    PipelineConfig c;
    c.dataset.split = "paper";
    c.synth.subjects_per_class = 2;
    EXPECT_TRUE(validate_config(c).empty());
    c.dataset.split = "halves";
    EXPECT_TRUE(mentions(validate_config(c), "dataset.split"));
}

TEST(Parse, RoundTrip) {
    PipelineConfig c;
    c.seed = 99;
    c.tasks = {dataset::Task::EarlyVsLate};
    c.synth.carrier = {0.17, -0.06};
    c.retrieve.radius_bins = 14.5;
    c.dataset.scope = dataset::BalanceScope::TrainVal;
    c.train.lr0 = 3e-4;
    c.train.init = cnn::InitScheme::Gaussian;
    c.train.seed = derive_seed(c.seed, "train");
    const auto back = parse_config(format_config(c));
    EXPECT_EQ(back, c);
}

TEST(Parse, UnknownKeysAndBadValues) {
    EXPECT_THROW(parse_config("[synth]\ncanvass = 512\n"), ConfigError);
    EXPECT_THROW(parse_config("[nope]\na = 1\n"), ConfigError);
    EXPECT_THROW(parse_config("[train]\nepochs = many\n"), ConfigError);
    EXPECT_THROW(parse_config("[synth]\nsnap_carrier = maybe\n"), ConfigError);
    EXPECT_THROW(parse_config("[dataset]\nbalance_scope = all\n"), ConfigError);
    EXPECT_THROW(parse_config("[run]\ntasks = hvi xyz\n"), ConfigError);
}

TEST(Parse, SeedsDeriveFromRoot) {
    const auto a = parse_config("[run]\nseed = 1\n"), b = parse_config("[run]\nseed = 2\n");
    EXPECT_NE(a.train.seed, b.train.seed);
    EXPECT_EQ(a.train.seed, parse_config("[run]\nseed = 1\n").train.seed);
}

TEST(Load, ViolationsJoined) {
    const auto dir = std::filesystem::temp_directory_path() / "qpi_test_cfg";
    std::filesystem::create_directories(dir);
    io::write_text(dir / "bad.ini", "[train]\nmomentum = 1.5\nbatch_size = 0\n");
    try {
        load_config(dir / "bad.ini");
        FAIL();
    } catch (const ConfigError& e) {
        const std::string m = e.what();
        EXPECT_NE(m.find("momentum"), std::string::npos);
        EXPECT_NE(m.find("batch_size"), std::string::npos);
    }
}
