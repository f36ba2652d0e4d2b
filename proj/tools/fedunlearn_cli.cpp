// fedunlearn: command-line driver for the federated unlearning experiment.
//
// Exit codes: 0 success, 2 configuration error, 3 stage failure, 4 I/O error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fedunlearn/config.hpp"
#include "fedunlearn/error.hpp"
#include "fedunlearn/evaluation.hpp"
#include "fedunlearn/pipeline.hpp"
#include "fedunlearn/report.hpp"

namespace fs = std::filesystem;
using namespace fedunlearn;

namespace {

enum ExitCode { kOk = 0, kConfigError = 2, kStageFailure = 3, kIoError = 4 };

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    std::string stage;
    bool resume = false;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> formats;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool with_stage) {
    cmd->add_option("--config", a.config_path, "experiment config file")->required();
    cmd->add_option("--out", a.out_dir, "output directory (overrides output.directory)");
    cmd->add_flag("--resume", a.resume, "reuse checkpoints from the output directory when present");
    cmd->add_option("--seed", a.seed, "override master_seed");
    cmd->add_option("--format", a.formats, "report formats: csv, json, svg")
        ->delimiter(',')
        ->check(CLI::IsMember({"csv", "json", "svg"}));
    if (with_stage) cmd->add_option("--stage", a.stage, "run only up to this stage");
}

eval::Stage stage_from_arg(const std::string& s) {
    if (s == "train" || s == "training") return eval::Stage::Training;
    if (s == "unlearn" || s == "subtraction") return eval::Stage::Subtraction;
    if (s == "distill" || s == "distillation") return eval::Stage::Distillation;
    if (s == "posttrain" || s == "post-training") return eval::Stage::PostTraining;
    if (s == "retrain" || s == "retraining") return eval::Stage::Retraining;
    try {
        return eval::parse_stage(s);
    } catch (const LookupError&) {
        throw ConfigurationError("unknown stage '" + s + "'");
    }
}

struct Loaded {
    config::RunConfig rc;
    fs::path out;
    std::vector<report::Format> formats;
};

Loaded load(const CommonArgs& a) {
    Loaded l;
    l.rc = config::parse_config(a.config_path);
    if (a.seed) l.rc.experiment.master_seed = *a.seed;
    if (a.resume) l.rc.pipeline.resume = true;
    l.out = a.out_dir.empty() ? fs::path(l.rc.experiment.output.directory) : fs::path(a.out_dir);
    const auto& names = a.formats.empty() ? l.rc.experiment.output.formats : a.formats;
    for (const auto& f : names) l.formats.push_back(report::parse_format(f));
    return l;
}

pipeline::Runner make_runner(const Loaded& l) {
    pipeline::Options opts;
    opts.out_dir = l.out;
    opts.resume = l.rc.pipeline.resume;
    for (const auto& s : l.rc.pipeline.skip) opts.skip.insert(eval::parse_stage(s));
    opts.formats = l.formats;
    return pipeline::Runner(l.rc.experiment, opts);
}

void print_reports(const std::vector<eval::StageReport>& reps) {
    std::printf("%-16s %9s %9s %10s %9s %8s\n", "stage", "test_acc", "atk_acc", "loss_ratio", "skew_l2", "ms");
    for (const auto& r : reps) {
        std::printf("%-16s %9.4f %9.4f %10.4f %9.4f %8lld\n", std::string(eval::stage_name(r.stage)).c_str(),
                    r.test_acc, r.atk_acc, r.loss_ratio, r.skew_l2, static_cast<long long>(r.wall_time_ms));
    }
}

/// Runs one stage. Prerequisites are taken from existing checkpoints when
/// available; the stage itself is recomputed unless --resume was given.
int run_single_stage(const CommonArgs& a, eval::Stage stage) {
    auto l = load(a);
    const bool resume_target = l.rc.pipeline.resume;
    l.rc.pipeline.resume = true;
    auto runner = make_runner(l);
    if (resume_target) {
        runner.ensure(stage);
    } else {
        runner.compute(stage);
    }
    runner.write_manifest();
    std::printf("%s -> %s\n", std::string(eval::stage_name(stage)).c_str(),
                (l.out / pipeline::checkpoint_name(stage)).string().c_str());
    return kOk;
}

int run_pipeline_cmd(const CommonArgs& a) {
    auto l = load(a);
    auto runner = make_runner(l);
    if (!a.stage.empty()) {
        const auto target = stage_from_arg(a.stage);
        runner.ensure(target);
        runner.write_manifest();
        std::printf("ran through %s; checkpoints in %s\n", std::string(eval::stage_name(target)).c_str(),
                    l.out.string().c_str());
        return kOk;
    }
    runner.run_all();
    print_reports(runner.reports());
    std::printf("artifacts in %s (config %s)\n", l.out.string().c_str(),
                config::hash_hex(runner.config_hash()).c_str());
    return kOk;
}

int run_evaluate(const CommonArgs& a) {
    auto l = load(a);
    auto runner = make_runner(l);
    runner.load_existing();
    if (!runner.has(eval::Stage::Training) || !runner.has(eval::Stage::Retraining)) {
        throw StateError("evaluate needs the Training and Re-Training checkpoints in " + l.out.string());
    }
    const auto reps = runner.reports();
    runner.write_reports(reps);
    print_reports(reps);
    return kOk;
}

int run_report(const std::string& out_dir, const std::vector<std::string>& formats) {
    const fs::path out(out_dir);
    const auto json = nlohmann::json::parse(io::read_file(out / "report.json"), nullptr, false);
    if (json.is_discarded()) throw FormatError("report.json is not valid JSON", 0);
    const auto reps = report::reports_from_json(json);
    const auto hash_text = json.value("config_hash", std::string("0"));
    const std::uint64_t hash = std::stoull(hash_text, nullptr, 16);
    for (const auto& name : formats.empty() ? std::vector<std::string>{"csv"} : formats) {
        switch (report::parse_format(name)) {
            case report::Format::Csv: io::write_file_atomic(out / "report.csv", report::to_csv(reps, hash)); break;
            case report::Format::Json: io::write_file_atomic(out / "report.json", json.dump(2) + "\n"); break;
            case report::Format::Svg: {
                report::Series series;
                auto read = [&](const char* f) -> std::string {
                    return fs::exists(out / f) ? io::read_file(out / f) : std::string("header\n");
                };
                series.training = pipeline::parse_history_csv(read("history_training.csv"));
                series.post_training = pipeline::parse_history_csv(read("history_posttraining.csv"));
                series.distillation = pipeline::parse_curve_csv(read("distill_curve.csv"));
                io::write_file_atomic(out / "report.svg", report::to_svg(series, hash));
                break;
            }
        }
    }
    print_reports(reps);
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated unlearning experiment driver"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(pipeline::kToolVersion));

    CommonArgs args;
    struct StageCmd {
        const char* name;
        const char* help;
        eval::Stage stage;
    };
    const StageCmd stage_cmds[] = {
        {"train", "federated training with the attacker (writes the trained model and ledger)", eval::Stage::Training},
        {"unlearn", "subtract the attacker's historical updates", eval::Stage::Subtraction},
        {"distill", "repair the subtracted model by distillation from the trained model", eval::Stage::Distillation},
        {"posttrain", "continue federated training without the attacker", eval::Stage::PostTraining},
        {"retrain", "retrain from scratch without the attacker", eval::Stage::Retraining},
    };
    std::vector<std::pair<CLI::App*, eval::Stage>> stage_apps;
    for (const auto& c : stage_cmds) {
        auto* sub = app.add_subcommand(c.name, c.help);
        add_common(sub, args, false);
        stage_apps.emplace_back(sub, c.stage);
    }
    auto* evaluate = app.add_subcommand("evaluate", "compute stage reports from existing checkpoints");
    add_common(evaluate, args, false);
    auto* pipeline_cmd = app.add_subcommand("pipeline", "run all five stages and write reports");
    add_common(pipeline_cmd, args, true);

    std::string report_dir = ".";
    auto* report_cmd = app.add_subcommand("report", "re-emit reports from an output directory's report.json");
    report_cmd->add_option("--out", report_dir, "output directory")->required();
    report_cmd->add_option("--format", args.formats, "report formats: csv, json, svg")
        ->delimiter(',')
        ->check(CLI::IsMember({"csv", "json", "svg"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfigError;
    }

    try {
        for (const auto& [sub, stage] : stage_apps) {
            if (sub->parsed()) return run_single_stage(args, stage);
        }
        if (evaluate->parsed()) return run_evaluate(args);
        if (pipeline_cmd->parsed()) return run_pipeline_cmd(args);
        if (report_cmd->parsed()) return run_report(report_dir, args.formats);
    } catch (const ConfigurationError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << '\n';
        return kIoError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kStageFailure;
    }
    return kOk;
}
