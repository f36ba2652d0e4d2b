#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedunlearn/binary_io.hpp"
#include "fedunlearn/config.hpp"
#include "fedunlearn/error.hpp"
#include "fedunlearn/evaluation.hpp"
#include "fedunlearn/experiment.hpp"
#include "fedunlearn/federation.hpp"
#include "fedunlearn/params.hpp"
#include "fedunlearn/report.hpp"
#include "fedunlearn/unlearning.hpp"

namespace fedunlearn::pipeline {

inline constexpr std::string_view kToolVersion = "0.1.0";

/// A stage aborted; names the stage and keeps the underlying message.
class StageFailure : public Error {
public:
    StageFailure(eval::Stage stage, const std::string& what)
        : Error(std::string(eval::stage_name(stage)) + " stage failed: " + what), stage_(stage) {}
    eval::Stage stage() const noexcept { return stage_; }

private:
    eval::Stage stage_;
};

struct RunManifest {
    std::string config_hash;
    std::string tool_version{kToolVersion};
    std::map<std::string, std::string> checkpoints;  // stage name -> file
    std::vector<std::string> artifacts;              // ledger, histories, reports
};

struct Options {
    std::filesystem::path out_dir;
    bool resume = false;
    std::set<eval::Stage> skip;  // loaded from checkpoints, never recomputed
    std::vector<report::Format> formats{report::Format::Csv, report::Format::Json};
};

inline std::string checkpoint_name(eval::Stage s) {
    switch (s) {
        case eval::Stage::Training: return "model_trained.fupv";
        case eval::Stage::Subtraction: return "model_subtracted.fupv";
        case eval::Stage::Distillation: return "model_distilled.fupv";
        case eval::Stage::PostTraining: return "model_posttrained.fupv";
        case eval::Stage::Retraining: return "model_retrained.fupv";
    }
    return "";
}

inline constexpr std::string_view kLedgerFile = "ledger.fulg";
inline constexpr std::string_view kCurveFile = "distill_curve.csv";
inline constexpr std::string_view kManifestFile = "manifest.json";

inline std::string history_name(eval::Stage s) {
    switch (s) {
        case eval::Stage::Training: return "history_training.csv";
        case eval::Stage::PostTraining: return "history_posttraining.csv";
        case eval::Stage::Retraining: return "history_retraining.csv";
        default: return "";
    }
}

inline fed::TrainingHistory parse_history_csv(std::string_view text) {
    fed::TrainingHistory h;
    std::istringstream is{std::string(text)};
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
        if (line.empty() || line.front() == '#') continue;
        fed::RoundMetrics m;
        char c1 = 0, c2 = 0;
        std::istringstream ls(line);
        if (!(ls >> m.round >> c1 >> m.test_acc >> c2 >> m.attack_acc)) {
            throw FormatError("malformed history row '" + line + "'", 0);
        }
        h.push_back(m);
    }
    return h;
}

inline std::vector<report::CurvePoint> parse_curve_csv(std::string_view text) {
    std::vector<report::CurvePoint> out;
    std::istringstream is{std::string(text)};
    std::string line;
    std::getline(is, line);
    while (std::getline(is, line)) {
        if (line.empty() || line.front() == '#') continue;
        report::CurvePoint p;
        char c = 0;
        std::istringstream ls(line);
        if (!(ls >> p.epoch >> c >> p.test_acc >> c >> p.atk_acc >> c >> p.loss_ratio)) {
            throw FormatError("malformed distillation curve row '" + line + "'", 0);
        }
        out.push_back(p);
    }
    return out;
}

/// Drives the five stages for one configuration. Stages are computed on
/// demand, pulling in their prerequisites; every computed stage is persisted
/// before the next one starts.
class Runner {
public:
    Runner(const ExperimentConfig& cfg, Options opts)
        : experiment_(build_experiment(cfg)), hash_(config::config_hash(cfg)), opts_(std::move(opts)) {}

    const Experiment& experiment() const { return experiment_; }
    std::uint64_t config_hash() const { return hash_; }
    const std::filesystem::path& out_dir() const { return opts_.out_dir; }

    const ParameterVector& model(eval::Stage s) {
        ensure(s);
        return models_.at(s);
    }

    const fed::UpdateLedger& ledger() {
        ensure(eval::Stage::Training);
        return *ledger_;
    }

    const std::vector<report::CurvePoint>& distillation_curve() {
        ensure(eval::Stage::Distillation);
        return curve_;
    }

    /// Makes `s` available, computing or loading it (and its prerequisites).
    void ensure(eval::Stage s) {
        if (models_.contains(s)) return;
        const bool must_load = opts_.skip.contains(s);
        if ((must_load || opts_.resume) && std::filesystem::exists(path(checkpoint_name(s)))) {
            load_stage(s);
            return;
        }
        if (must_load) {
            throw StageFailure(s, "skipped stage has no checkpoint at " + path(checkpoint_name(s)).string());
        }
        compute_stage(s);
    }

    /// Recomputes `s` even if a checkpoint exists; prerequisites follow the
    /// usual resume rules.
    void compute(eval::Stage s) {
        models_.erase(s);
        compute_stage(s);
    }

    /// Loads every checkpoint present in the output directory without
    /// computing anything.
    void load_existing() {
        for (auto s : eval::kAllStages) {
            if (!models_.contains(s) && std::filesystem::exists(path(checkpoint_name(s)))) load_stage(s);
        }
    }

    bool has(eval::Stage s) const { return models_.contains(s); }

    /// Reports for every available stage, in table order. Needs the trained
    /// and retrained models as loss-ratio and skew references.
    std::vector<eval::StageReport> reports() {
        const auto& ex = experiment_;
        eval::ReportContext ctx;
        ctx.test_set = &ex.federation.test_set;
        ctx.attack_set = &ex.federation.attack_set;
        ctx.spec = &ex.federation.spec;
        ctx.original = &model(eval::Stage::Training);
        ctx.reference = &model(eval::Stage::Retraining);
        std::vector<eval::StageReport> out;
        for (auto s : eval::kAllStages) {
            if (models_.contains(s)) eval::stage_report(s, models_.at(s), ctx, wall_ms_[s], &out);
        }
        return out;
    }

    /// Runs everything and writes reports plus the manifest.
    RunManifest run_all() {
        for (auto s : eval::kAllStages) ensure(s);
        return write_reports(reports());
    }

    RunManifest write_reports(const std::vector<eval::StageReport>& reps) {
        report::Series series;
        series.training = training_history_;
        series.distillation = curve_;
        series.post_training = post_history_;
        for (auto f : opts_.formats) {
            const auto name = "report." + std::string(report::extension(f));
            report::emit_report(reps, f, path(name), experiment_.config, hash_, series);
            written_.insert(name);
        }
        return write_manifest();
    }

    RunManifest write_manifest() {
        RunManifest m;
        m.config_hash = config::hash_hex(hash_);
        for (auto s : eval::kAllStages) {
            if (models_.contains(s)) m.checkpoints[std::string(eval::stage_name(s))] = checkpoint_name(s);
        }
        m.artifacts.assign(written_.begin(), written_.end());
        nlohmann::json j;
        j["config_hash"] = m.config_hash;
        j["tool_version"] = m.tool_version;
        j["checkpoints"] = m.checkpoints;
        j["artifacts"] = m.artifacts;
        for (const auto& [stage, file] : m.checkpoints) {
            if (!std::filesystem::exists(path(file))) throw IoError("manifest references missing file " + file);
        }
        for (const auto& file : m.artifacts) {
            if (!std::filesystem::exists(path(file))) throw IoError("manifest references missing file " + file);
        }
        io::write_file_atomic(path(std::string(kManifestFile)), j.dump(2) + "\n");
        return m;
    }

private:
    std::filesystem::path path(const std::string& name) const { return opts_.out_dir / name; }

    void write_text(const std::string& name, const std::string& body) {
        io::write_file_atomic(path(name), body + "# config_hash=" + config::hash_hex(hash_) + "\n");
        written_.insert(name);
    }

    void save_model(eval::Stage s, const ParameterVector& m) {
        const auto name = checkpoint_name(s);
        checkpoint::save(m, path(name), hash_);
        nlohmann::json meta;
        meta["stage"] = eval::stage_name(s);
        meta["config_hash"] = config::hash_hex(hash_);
        meta["seed"] = experiment_.config.master_seed;
        meta["tool_version"] = kToolVersion;
        io::write_file_atomic(path(name + ".meta.json"), meta.dump(2) + "\n");
        models_[s] = m;
    }

    void check_tag(std::uint64_t tag, const std::string& file) const {
        if (tag != hash_) {
            throw ArtifactMismatchError(file + " was produced by config " + config::hash_hex(tag) +
                                        ", current config is " + config::hash_hex(hash_));
        }
    }

    std::optional<std::string> read_optional(const std::string& name) const {
        if (!std::filesystem::exists(path(name))) return std::nullopt;
        return io::read_file(path(name));
    }

    void load_stage(eval::Stage s) {
        try {
            const auto name = checkpoint_name(s);
            auto decoded = checkpoint::load(path(name));
            check_tag(decoded.tag, name);
            models_[s] = std::move(decoded.params);
            wall_ms_[s] = 0;
            if (s == eval::Stage::Training) {
                auto l = fed::load_ledger(path(std::string(kLedgerFile)));
                check_tag(l.tag, std::string(kLedgerFile));
                ledger_ = std::move(l.ledger);
                written_.insert(std::string(kLedgerFile));
            }
            if (const auto h = history_name(s); !h.empty()) {
                if (auto text = read_optional(h)) {
                    (s == eval::Stage::Training ? training_history_
                     : s == eval::Stage::PostTraining ? post_history_
                                                      : retrain_history_) = parse_history_csv(*text);
                    written_.insert(h);
                }
            }
            if (s == eval::Stage::Distillation) {
                if (auto text = read_optional(std::string(kCurveFile))) {
                    curve_ = parse_curve_csv(*text);
                    written_.insert(std::string(kCurveFile));
                }
            }
        } catch (const IoError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageFailure(s, std::string("cannot resume from checkpoint: ") + e.what());
        }
    }

    void compute_stage(eval::Stage s) {
        // Prerequisites first, outside the timing window.
        switch (s) {
            case eval::Stage::Subtraction: ensure(eval::Stage::Training); break;
            case eval::Stage::Distillation:
                ensure(eval::Stage::Training);
                ensure(eval::Stage::Subtraction);
                break;
            case eval::Stage::PostTraining: ensure(eval::Stage::Distillation); break;
            default: break;
        }
        const auto t0 = std::chrono::steady_clock::now();
        try {
            run(s);
        } catch (const IoError&) {
            throw;
        } catch (const ConfigurationError&) {
            throw;
        } catch (const StageFailure&) {
            throw;
        } catch (const std::exception& e) {
            throw StageFailure(s, e.what());
        }
        wall_ms_[s] = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
    }

    void run(eval::Stage s) {
        const auto& ex = experiment_;
        const auto& cfg = ex.config;
        const int target = ex.attacker();
        switch (s) {
            case eval::Stage::Training: {
                auto result = fed::run_training(ex.initial_model, ex.federation, cfg.run_options());
                fed::save_ledger(result.ledger, path(std::string(kLedgerFile)), hash_);
                written_.insert(std::string(kLedgerFile));
                ledger_ = std::move(result.ledger);
                training_history_ = std::move(result.history);
                write_text(history_name(s), fed::history_csv(training_history_));
                save_model(s, result.final_model);
                break;
            }
            case eval::Stage::Subtraction: {
                save_model(s, unlearn::subtract(cfg.unlearn.mode, models_.at(eval::Stage::Training), *ledger_, target));
                break;
            }
            case eval::Stage::Distillation: {
                const auto& teacher = models_.at(eval::Stage::Training);
                const auto& student = models_.at(eval::Stage::Subtraction);
                curve_.clear();
                auto observe = [&](int epoch, const ParameterVector& m) {
                    curve_.push_back({epoch, eval::test_accuracy(m, ex.federation.test_set),
                                      eval::attack_success(m, ex.federation.attack_set, ex.federation.spec),
                                      eval::loss_ratio(teacher, m, ex.federation.test_set).value});
                };
                observe(0, student);
                auto distilled =
                    unlearn::distill_remedy(teacher, student, ex.distill_pool, cfg.distill(), &ex.attacker_shard(), observe);
                write_text(std::string(kCurveFile), report::curve_csv(curve_));
                save_model(s, distilled);
                break;
            }
            case eval::Stage::PostTraining: {
                auto opts = cfg.run_options();
                opts.first_round = cfg.training.rounds;
                auto result = unlearn::post_train(models_.at(eval::Stage::Distillation), ex.federation, opts, target,
                                                  cfg.unlearn.post_rounds);
                post_history_ = std::move(result.history);
                write_text(history_name(s), fed::history_csv(post_history_));
                save_model(s, result.final_model);
                break;
            }
            case eval::Stage::Retraining: {
                auto result = unlearn::retrain_baseline(ex.initial_model, ex.federation, cfg.run_options(), target);
                retrain_history_ = std::move(result.history);
                write_text(history_name(s), fed::history_csv(retrain_history_));
                save_model(s, result.final_model);
                break;
            }
        }
    }

    Experiment experiment_;
    std::uint64_t hash_;
    Options opts_;
    std::map<eval::Stage, ParameterVector> models_;
    std::map<eval::Stage, std::int64_t> wall_ms_;
    std::optional<fed::UpdateLedger> ledger_;
    fed::TrainingHistory training_history_;
    fed::TrainingHistory post_history_;
    fed::TrainingHistory retrain_history_;
    std::vector<report::CurvePoint> curve_;
    std::set<std::string> written_;
};

/// Full five-stage run for a parsed config file.
inline RunManifest run_pipeline(const config::RunConfig& rc, const std::filesystem::path& out_dir,
                                std::vector<report::Format> formats = {report::Format::Csv, report::Format::Json}) {
    Options opts;
    opts.out_dir = out_dir;
    opts.resume = rc.pipeline.resume;
    for (const auto& s : rc.pipeline.skip) opts.skip.insert(eval::parse_stage(s));
    opts.formats = std::move(formats);
    Runner runner(rc.experiment, std::move(opts));
    return runner.run_all();
}

}  // namespace fedunlearn::pipeline
