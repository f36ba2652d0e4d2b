#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "fedunlearn/data.hpp"
#include "fedunlearn/error.hpp"
#include "fedunlearn/federation.hpp"
#include "fedunlearn/nn.hpp"
#include "fedunlearn/params.hpp"
#include "fedunlearn/rng.hpp"

namespace fedunlearn::unlearn {

enum class SubtractionMode { Lazy, Rescaled };

/// Removes the target's accumulated averaged updates from the final model:
///   M_F - sum_t (1/N_t) * delta_t^target
/// When `final_model` is exactly the ledger's replay, the same quantity is
/// evaluated by replaying the ledger with the target's deltas zeroed, which
/// follows the training summation order and so reproduces the zero-delta
/// counterfactual bit for bit.
inline ParameterVector subtract_history(const ParameterVector& final_model, const fed::UpdateLedger& ledger,
                                        int target_client) {
    if (!ledger.knows(target_client)) {
        throw LookupError("client " + std::to_string(target_client) + " is not in the ledger");
    }
    ledger.initial_model().require_same_shape(final_model, "subtract_history");
    if (ledger.replay().bit_equal(final_model)) return ledger.replay(target_client);
    return final_model - fed::ledger_client_sum(ledger, target_client);
}

/// Comparison rule that re-normalizes each round as if only N_t - 1 clients
/// had participated:
///   M_1 + sum_t [ N_t/(N_t-1) * avg_t - 1/(N_t-1) * delta_t^target ]
/// A target missing from a round contributes a zero delta, so that round's
/// averaged update is inflated by N_t/(N_t-1).
inline ParameterVector subtract_history_rescaled(const ParameterVector& final_model, const fed::UpdateLedger& ledger,
                                                 int target_client) {
    if (!ledger.knows(target_client)) {
        throw LookupError("client " + std::to_string(target_client) + " is not in the ledger");
    }
    ledger.initial_model().require_same_shape(final_model, "subtract_history_rescaled");
    ParameterVector model = ledger.initial_model();
    for (std::size_t t = 0; t < ledger.rounds().size(); ++t) {
        const auto& r = ledger.rounds()[t];
        const auto n = static_cast<double>(r.participants());
        if (r.participants() < 2) {
            throw DomainError("rescaled subtraction needs N_t >= 2 (round " + std::to_string(t) + ")");
        }
        const auto* target = r.find(target_client);
        for (std::size_t i = 0; i < model.size(); ++i) {
            double s = 0.0;
            for (const auto& cd : r.deltas) s += cd.delta[i];
            const double avg = s / n;
            const double own = target ? (*target)[i] : 0.0;
            model[i] += n / (n - 1.0) * avg - own / (n - 1.0);
        }
    }
    return model;
}

inline ParameterVector subtract(SubtractionMode mode, const ParameterVector& final_model,
                                const fed::UpdateLedger& ledger, int target_client) {
    return mode == SubtractionMode::Lazy ? subtract_history(final_model, ledger, target_client)
                                         : subtract_history_rescaled(final_model, ledger, target_client);
}

// ---------------------------------------------------------------------------

struct DistillConfig {
    int epochs = 5;
    double temperature = 3.0;
    double learning_rate = 0.05;
    std::size_t batch_size = 32;
    double hard_label_weight = 0.0;  // 0 treats the pool as unlabeled
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 0) throw DomainError("distillation epochs must be >= 0");
        if (!(temperature > 0.0) || !std::isfinite(temperature)) throw DomainError("temperature must be positive");
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
            throw DomainError("distillation learning rate must be finite and non-negative");
        }
        if (batch_size < 1) throw DomainError("distillation batch size must be >= 1");
        if (!(hard_label_weight >= 0.0 && hard_label_weight <= 1.0)) {
            throw DomainError("hard_label_weight must be in [0, 1]");
        }
    }
};

/// Rejects any pool that is not a server-held distillation pool, and any pool
/// sharing an example with `forbidden` (the unlearned client's shard).
inline void check_pool_hygiene(const data::Dataset& pool, const data::Dataset* forbidden) {
    if (pool.provenance != data::Provenance::DistillPool) {
        throw PolicyError("distillation pool has provenance '" + std::string(data::to_string(pool.provenance)) + "'");
    }
    std::unordered_set<std::uint64_t> banned;
    int banned_owner = data::kNoOwner;
    if (forbidden) {
        for (const auto& e : forbidden->examples) banned.insert(e.id);
        if (!forbidden->empty()) banned_owner = forbidden->examples.front().owner;
    }
    for (const auto& e : pool.examples) {
        if (e.provenance != data::Provenance::DistillPool || e.owner != data::kNoOwner) {
            throw PolicyError("pool example " + std::to_string(e.id) + " carries client provenance '" +
                              std::string(data::to_string(e.provenance)) + "' (owner " + std::to_string(e.owner) + ")");
        }
        if (banned.contains(e.id)) {
            throw PolicyError("pool example " + std::to_string(e.id) + " belongs to the unlearned client's shard" +
                              (banned_owner != data::kNoOwner ? " (client " + std::to_string(banned_owner) + ")" : ""));
        }
    }
}

/// Called after each distillation epoch with (epoch index starting at 1, student).
using EpochObserver = std::function<void(int, const ParameterVector&)>;

/// Trains `student` to match the frozen `teacher`'s temperature-softened
/// outputs on the pool. Inference afterwards is at temperature 1.
inline ParameterVector distill_remedy(const ParameterVector& teacher, ParameterVector student,
                                      const data::Dataset& pool, const DistillConfig& cfg,
                                      const data::Dataset* forbidden = nullptr,
                                      const EpochObserver& observer = {}) {
    cfg.validate();
    check_pool_hygiene(pool, forbidden);
    teacher.require_same_shape(student, "distill_remedy");
    if (cfg.epochs == 0) return student;
    if (pool.empty()) throw ConfigurationError("distillation pool is empty");

    const nn::LossSpec loss{cfg.hard_label_weight > 0.0 ? nn::LossKind::Mixed : nn::LossKind::Distill,
                            cfg.temperature, cfg.hard_label_weight};

    // The teacher is frozen, so its soft labels are computed once.
    const nn::Matrix pool_inputs = data::feature_matrix(pool);
    const nn::Matrix teacher_probs = nn::forward(teacher, pool_inputs, cfg.temperature).probabilities;

    Rng rng(cfg.seed);
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        rng.shuffle(std::span<std::size_t>(order));
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const auto rows = std::span<const std::size_t>(order).subspan(
                start, std::min(cfg.batch_size, order.size() - start));
            nn::Batch batch;
            batch.inputs = data::feature_matrix(pool, rows);
            nn::Matrix soft(rows.size(), teacher_probs.cols);
            for (std::size_t r = 0; r < rows.size(); ++r) {
                const auto src = teacher_probs.row(rows[r]);
                std::copy(src.begin(), src.end(), soft.row(r).begin());
            }
            batch.soft_labels = std::move(soft);
            if (loss.kind == nn::LossKind::Mixed) batch.hard_labels = data::labels(pool, rows);

            const auto fwd = nn::forward(student, batch, cfg.temperature);
            student = nn::sgd_step(student, nn::backward(student, fwd.cache, loss, batch), cfg.learning_rate);
        }
        if (observer) observer(epoch, student);
    }
    return student;
}

// ---------------------------------------------------------------------------

/// Trains from scratch (same initial model and client seed streams) without
/// the excluded client.
inline fed::TrainingResult retrain_baseline(const ParameterVector& initial_model, const fed::Federation& fed,
                                            fed::RunOptions opts, int excluded_client) {
    opts.excluded.push_back(excluded_client);
    return fed::run_training(initial_model, fed, opts);
}

/// Continues FedAvg from `model` without the excluded client, recording into
/// a fresh ledger. Round numbering continues from `opts.first_round`.
inline fed::TrainingResult post_train(const ParameterVector& model, const fed::Federation& fed,
                                      fed::RunOptions opts, int excluded_client, std::size_t rounds) {
    opts.excluded.push_back(excluded_client);
    opts.rounds = rounds;
    return fed::run_training(model, fed, opts);
}

}  // namespace fedunlearn::unlearn
