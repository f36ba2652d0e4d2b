#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "fedunlearn/data.hpp"
#include "fedunlearn/error.hpp"
#include "fedunlearn/nn.hpp"
#include "fedunlearn/params.hpp"

namespace fedunlearn::eval {

/// Fraction of argmax predictions (temperature 1, ties to the lowest class)
/// that match the true labels.
inline double test_accuracy(const ParameterVector& model, const data::Dataset& test_set) {
    if (test_set.empty()) throw DomainError("accuracy of an empty evaluation set");
    const auto pred = nn::predict(model, data::feature_matrix(test_set));
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (static_cast<int>(pred[i]) == test_set.examples[i].label) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

/// Fraction of triggered inputs classified as the backdoor target. The
/// denominator is every input in the attack set, so ordinary source->target
/// confusions count toward the rate as well.
inline double attack_success(const ParameterVector& model, const data::Dataset& attack_set,
                             const data::BackdoorSpec& spec) {
    if (attack_set.empty()) throw DomainError("attack success on an empty attack set");
    const auto pred = nn::predict(model, data::feature_matrix(attack_set));
    std::size_t hits = 0;
    for (auto p : pred) {
        if (static_cast<int>(p) == spec.target_class) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

inline double mean_hard_loss(const ParameterVector& model, const data::Dataset& ds) {
    if (ds.empty()) throw DomainError("loss on an empty evaluation set");
    const auto fwd = nn::forward(model, data::feature_matrix(ds), 1.0);
    return nn::loss_hard(fwd.probabilities, data::labels(ds));
}

struct LossRatio {
    double value = 1.0;
    bool clamped = false;  // candidate loss fell below kLossFloor
};

inline constexpr double kLossFloor = 1e-12;

/// loss(original) / loss(candidate) on the test set; tends to 1 as the
/// candidate recovers the original's fit.
inline LossRatio loss_ratio(const ParameterVector& original, const ParameterVector& candidate,
                            const data::Dataset& test_set) {
    original.require_same_shape(candidate, "loss_ratio");
    const double num = mean_hard_loss(original, test_set);
    double den = mean_hard_loss(candidate, test_set);
    LossRatio r;
    if (den < kLossFloor) {
        den = kLossFloor;
        r.clamped = true;
    }
    r.value = num / den;
    return r;
}

inline double skew_norm(const ParameterVector& a, const ParameterVector& b) {
    a.require_same_shape(b, "skew_norm");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

// ---------------------------------------------------------------------------

enum class Stage { Training, Subtraction, Distillation, PostTraining, Retraining };

inline constexpr Stage kAllStages[] = {Stage::Training, Stage::Subtraction, Stage::Distillation,
                                       Stage::PostTraining, Stage::Retraining};

inline std::string_view stage_name(Stage s) {
    switch (s) {
        case Stage::Training: return "Training";
        case Stage::Subtraction: return "UL-Subtraction";
        case Stage::Distillation: return "UL-Distillation";
        case Stage::PostTraining: return "Post-Training";
        case Stage::Retraining: return "Re-Training";
    }
    return "?";
}

inline Stage parse_stage(std::string_view name) {
    for (auto s : kAllStages) {
        if (stage_name(s) == name) return s;
    }
    throw LookupError("unknown stage '" + std::string(name) + "'");
}

struct StageReport {
    Stage stage = Stage::Training;
    double test_acc = 0.0;
    double atk_acc = 0.0;
    double loss_ratio = 1.0;
    double skew_l2 = 0.0;
    std::int64_t wall_time_ms = 0;

    friend bool operator==(const StageReport&, const StageReport&) = default;
};

/// Everything a report needs besides the model under evaluation.
struct ReportContext {
    const data::Dataset* test_set = nullptr;
    const data::Dataset* attack_set = nullptr;
    const data::BackdoorSpec* spec = nullptr;
    const ParameterVector* original = nullptr;   // loss-ratio numerator (the trained model)
    const ParameterVector* reference = nullptr;  // skew reference (the retrained model)
};

inline StageReport stage_report(Stage stage, const ParameterVector& model, const ReportContext& ctx,
                                std::int64_t wall_time_ms, std::vector<StageReport>* collection = nullptr) {
    if (!ctx.test_set || !ctx.attack_set || !ctx.spec || !ctx.original || !ctx.reference) {
        throw StateError("report context is missing an evaluation input");
    }
    StageReport r;
    r.stage = stage;
    r.test_acc = test_accuracy(model, *ctx.test_set);
    r.atk_acc = attack_success(model, *ctx.attack_set, *ctx.spec);
    r.loss_ratio = loss_ratio(*ctx.original, model, *ctx.test_set).value;
    r.skew_l2 = skew_norm(model, *ctx.reference);
    r.wall_time_ms = wall_time_ms;
    if (collection) collection->push_back(r);
    return r;
}

}  // namespace fedunlearn::eval
