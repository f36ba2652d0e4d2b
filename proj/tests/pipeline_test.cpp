#include <cstdlib>
#include <filesystem>
#include <string>

#include <gtest/gtest.h>
#include <json.hpp>

#include "fedunlearn/binary_io.hpp"
#include "fedunlearn/pipeline.hpp"

namespace fedunlearn {
namespace {

namespace fs = std::filesystem;
using eval::Stage;

constexpr const char* kSmallConfig = R"(master_seed = 5

[data]
num_classes = 3
feature_dim = 6
per_class = 60
n_clients = 4
shard_size = 20

[model]
hidden = 8

[attack]
attacker = 1
source_class = 0
target_class = 2
trigger_indices = 0,1
trigger_values = 6,6

[training]
rounds = 3
local_epochs = 1
batch_size = 10

[unlearn]
distill_epochs = 2
distill_batch_size = 10
post_rounds = 2
)";

fs::path fresh_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("fedunlearn_pipeline_" + name);
    fs::remove_all(dir);
    return dir;
}

pipeline::Options options_for(const fs::path& dir) {
    pipeline::Options o;
    o.out_dir = dir;
    o.formats = {report::Format::Csv, report::Format::Json, report::Format::Svg};
    return o;
}

ExperimentConfig small_config() { return config::parse_text(kSmallConfig).experiment; }

std::string drop_wall_time(const std::string& csv) {
    std::string out;
    std::istringstream is(csv);
    std::string line;
    while (std::getline(is, line)) {
        if (line.front() != '#') line = line.substr(0, line.rfind(','));
        out += line + '\n';
    }
    return out;
}

TEST(Runner, RunAllWritesEveryArtifact) {
    const auto dir = fresh_dir("all");
    pipeline::Runner runner(small_config(), options_for(dir));
    const auto manifest = runner.run_all();
    EXPECT_EQ(manifest.checkpoints.size(), 5u);
    for (auto s : eval::kAllStages) {
        EXPECT_TRUE(fs::exists(dir / pipeline::checkpoint_name(s)));
        EXPECT_TRUE(fs::exists(dir / (pipeline::checkpoint_name(s) + ".meta.json")));
    }
    for (const char* f : {"ledger.fulg", "distill_curve.csv", "history_training.csv", "history_posttraining.csv",
                          "history_retraining.csv", "report.csv", "report.json", "report.svg", "manifest.json"}) {
        EXPECT_TRUE(fs::exists(dir / f)) << f;
    }
    const auto reps = runner.reports();
    ASSERT_EQ(reps.size(), 5u);
    EXPECT_EQ(reps[0].stage, Stage::Training);
    EXPECT_DOUBLE_EQ(reps[0].loss_ratio, 1.0);
    EXPECT_EQ(reps[4].skew_l2, 0.0);

    // the curve starts at the subtracted model
    const auto& curve = runner.distillation_curve();
    ASSERT_EQ(curve.size(), 3u);
    EXPECT_EQ(curve[0].epoch, 0);
    EXPECT_DOUBLE_EQ(curve[0].loss_ratio, reps[1].loss_ratio);

    const auto m = nlohmann::json::parse(io::read_file(dir / "manifest.json"));
    EXPECT_EQ(m["config_hash"], config::hash_hex(runner.config_hash()));
    EXPECT_EQ(m["tool_version"], std::string(pipeline::kToolVersion));
    fs::remove_all(dir);
}

TEST(Runner, LedgerReplayMatchesTrainedModel) {
    const auto dir = fresh_dir("ledger");
    pipeline::Runner runner(small_config(), options_for(dir));
    EXPECT_TRUE(runner.ledger().replay().bit_equal(runner.model(Stage::Training)));
    const auto loaded = fed::load_ledger(dir / "ledger.fulg");
    EXPECT_EQ(loaded.ledger, runner.ledger());
    EXPECT_EQ(loaded.tag, runner.config_hash());
    fs::remove_all(dir);
}

TEST(Runner, TwoRunsAreByteIdentical) {
    const auto a = fresh_dir("det_a");
    const auto b = fresh_dir("det_b");
    pipeline::Runner(small_config(), options_for(a)).run_all();
    pipeline::Runner(small_config(), options_for(b)).run_all();
    for (auto s : eval::kAllStages) {
        EXPECT_EQ(io::read_file(a / pipeline::checkpoint_name(s)), io::read_file(b / pipeline::checkpoint_name(s)));
    }
    for (const char* f : {"ledger.fulg", "distill_curve.csv", "history_training.csv", "report.svg"}) {
        EXPECT_EQ(io::read_file(a / f), io::read_file(b / f)) << f;
    }
    EXPECT_EQ(drop_wall_time(io::read_file(a / "report.csv")), drop_wall_time(io::read_file(b / "report.csv")));
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST(Runner, ResumeLoadsInsteadOfRecomputing) {
    const auto dir = fresh_dir("resume");
    pipeline::Runner(small_config(), options_for(dir)).run_all();
    const auto before = io::read_file(dir / "model_distilled.fupv");

    auto opts = options_for(dir);
    opts.resume = true;
    pipeline::Runner again(small_config(), opts);
    again.run_all();
    for (const auto& r : again.reports()) EXPECT_EQ(r.wall_time_ms, 0) << eval::stage_name(r.stage);
    EXPECT_EQ(io::read_file(dir / "model_distilled.fupv"), before);
    EXPECT_EQ(again.distillation_curve().size(), 3u);
    fs::remove_all(dir);
}

TEST(Runner, PartialRunThenResumeMatchesFullRun) {
    const auto full = fresh_dir("full");
    const auto part = fresh_dir("part");
    pipeline::Runner(small_config(), options_for(full)).run_all();
    pipeline::Runner(small_config(), options_for(part)).ensure(Stage::Subtraction);
    EXPECT_FALSE(fs::exists(part / "model_distilled.fupv"));
    auto opts = options_for(part);
    opts.resume = true;
    pipeline::Runner(small_config(), opts).run_all();
    for (auto s : eval::kAllStages) {
        EXPECT_EQ(io::read_file(full / pipeline::checkpoint_name(s)), io::read_file(part / pipeline::checkpoint_name(s)));
    }
    fs::remove_all(full);
    fs::remove_all(part);
}

TEST(Runner, SkippedStageWithoutCheckpointFails) {
    const auto dir = fresh_dir("skip");
    auto opts = options_for(dir);
    opts.skip = {Stage::Training};
    pipeline::Runner runner(small_config(), opts);
    try {
        runner.ensure(Stage::Subtraction);
        FAIL();
    } catch (const pipeline::StageFailure& e) {
        EXPECT_EQ(e.stage(), Stage::Training);
    }
    fs::remove_all(dir);
}

TEST(Runner, CheckpointFromOtherConfigIsRejected) {
    const auto dir = fresh_dir("mismatch");
    pipeline::Runner(small_config(), options_for(dir)).ensure(Stage::Training);
    auto other = small_config();
    other.master_seed = 6;
    auto opts = options_for(dir);
    opts.resume = true;
    pipeline::Runner runner(other, opts);
    EXPECT_THROW(runner.ensure(Stage::Training), pipeline::StageFailure);
    fs::remove_all(dir);
}

TEST(Runner, PolicyViolationSurfacesAsStageFailure) {
    const auto dir = fresh_dir("policy");
    pipeline::Runner runner(small_config(), options_for(dir));
    runner.ensure(Stage::Subtraction);
    auto& pool = const_cast<data::Dataset&>(runner.experiment().distill_pool);
    pool.examples.push_back(runner.experiment().attacker_shard().examples.front());
    try {
        runner.ensure(Stage::Distillation);
        FAIL();
    } catch (const pipeline::StageFailure& e) {
        EXPECT_EQ(e.stage(), Stage::Distillation);
        EXPECT_NE(std::string(e.what()).find("provenance"), std::string::npos);
    }
    fs::remove_all(dir);
}

// ---------------------------------------------------------------------------

TEST(Reports, CsvJsonSvg) {
    const auto dir = fresh_dir("reports");
    pipeline::Runner runner(small_config(), options_for(dir));
    runner.run_all();
    const auto hash = config::hash_hex(runner.config_hash());

    const auto csv = io::read_file(dir / "report.csv");
    EXPECT_EQ(csv.rfind(std::string(report::kCsvHeader) + "\n", 0), 0u);
    EXPECT_NE(csv.find("\nUL-Distillation,"), std::string::npos);
    EXPECT_NE(csv.find("# config_hash=" + hash + "\n"), std::string::npos);

    const auto json = nlohmann::json::parse(io::read_file(dir / "report.json"));
    EXPECT_EQ(json["config_hash"], hash);
    EXPECT_EQ(json["config"]["training"]["rounds"], "3");
    EXPECT_EQ(report::reports_from_json(json), runner.reports());

    const auto svg = io::read_file(dir / "report.svg");
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    EXPECT_NE(svg.find(hash), std::string::npos);
    EXPECT_NE(svg.find("<polyline"), std::string::npos);

    EXPECT_THROW(report::emit_report({}, report::Format::Csv, dir / "x.csv", small_config(), 0), StateError);
    EXPECT_THROW(report::reports_from_json(nlohmann::json::object()), FormatError);
    EXPECT_THROW(report::parse_format("pdf"), ConfigurationError);
    fs::remove_all(dir);
}

TEST(Reports, HistoryAndCurveParsersRoundTrip) {
    const fed::TrainingHistory h{{1, 0.5, 0.125}, {2, 0.75, 0.0}};
    EXPECT_EQ(pipeline::parse_history_csv(fed::history_csv(h) + "# config_hash=0\n"), h);
    const std::vector<report::CurvePoint> c{{0, 0.5, 0.0, 0.8}, {1, 0.6, 0.0, 0.9}};
    EXPECT_EQ(pipeline::parse_curve_csv(report::curve_csv(c)), c);
    EXPECT_THROW(pipeline::parse_history_csv("header\nnot,a,row\n"), FormatError);
}

// ---------------------------------------------------------------------------
// Command-line driver

int run_cli(const std::string& args) {
    const std::string cmd = std::string(FEDUNLEARN_CLI) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path write_config(const std::string& name, const std::string& text) {
    const auto path = fs::temp_directory_path() / ("fedunlearn_cli_" + name + ".cfg");
    io::write_file_atomic(path, text);
    return path;
}

TEST(Cli, PipelineThenReport) {
    const auto dir = fresh_dir("cli");
    const auto cfg = write_config("ok", kSmallConfig);
    EXPECT_EQ(run_cli("pipeline --config " + cfg.string() + " --out " + dir.string()), 0);
    EXPECT_TRUE(fs::exists(dir / "report.csv"));
    EXPECT_TRUE(fs::exists(dir / "report.json"));
    EXPECT_FALSE(fs::exists(dir / "report.svg"));
    EXPECT_EQ(run_cli("report --out " + dir.string() + " --format svg"), 0);
    EXPECT_TRUE(fs::exists(dir / "report.svg"));
    EXPECT_EQ(run_cli("evaluate --config " + cfg.string() + " --out " + dir.string()), 0);
    fs::remove_all(dir);
}

TEST(Cli, StageSubcommandsChain) {
    const auto dir = fresh_dir("cli_stages");
    const auto cfg = write_config("stages", kSmallConfig);
    const auto common = " --config " + cfg.string() + " --out " + dir.string();
    EXPECT_EQ(run_cli("train" + common), 0);
    EXPECT_TRUE(fs::exists(dir / "ledger.fulg"));
    EXPECT_EQ(run_cli("unlearn" + common), 0);
    EXPECT_EQ(run_cli("distill" + common), 0);
    EXPECT_EQ(run_cli("posttrain" + common), 0);
    EXPECT_EQ(run_cli("evaluate" + common), 3);  // no retrained model yet
    EXPECT_EQ(run_cli("retrain" + common), 0);
    EXPECT_EQ(run_cli("evaluate" + common), 0);

    const auto full = fresh_dir("cli_full");
    EXPECT_EQ(run_cli("pipeline --config " + cfg.string() + " --out " + full.string()), 0);
    for (auto s : eval::kAllStages) {
        EXPECT_EQ(io::read_file(dir / pipeline::checkpoint_name(s)), io::read_file(full / pipeline::checkpoint_name(s)));
    }
    fs::remove_all(dir);
    fs::remove_all(full);
}

TEST(Cli, ExitCodes) {
    const auto dir = fresh_dir("cli_codes");
    EXPECT_EQ(run_cli("pipeline --config /nonexistent.cfg --out " + dir.string()), 2);
    EXPECT_EQ(run_cli("pipeline --config " + write_config("bad", "[training]\nwhat = 1\n").string()), 2);
    EXPECT_EQ(run_cli("pipeline --config " + write_config("inv", "[unlearn]\ntemperature = -1\n").string()), 2);
    EXPECT_EQ(run_cli("frobnicate"), 2);
    EXPECT_EQ(run_cli("pipeline"), 2);
    EXPECT_EQ(run_cli("pipeline --config " + write_config("fmt", kSmallConfig).string() + " --format pdf"), 2);
    EXPECT_EQ(run_cli("report --out " + dir.string()), 4);
    EXPECT_EQ(run_cli("train --config " + write_config("io", kSmallConfig).string() + " --out /dev/null/sub"), 4);

    auto skip = std::string(kSmallConfig) + "\n[pipeline]\nskip = Training\n";
    EXPECT_EQ(run_cli("pipeline --config " + write_config("skip", skip).string() + " --out " + dir.string()), 3);
    EXPECT_EQ(run_cli("--version"), 0);
    fs::remove_all(dir);
}

}  // namespace
}  // namespace fedunlearn
