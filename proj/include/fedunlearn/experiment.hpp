#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fedunlearn/data.hpp"
#include "fedunlearn/error.hpp"
#include "fedunlearn/federation.hpp"
#include "fedunlearn/nn.hpp"
#include "fedunlearn/rng.hpp"
#include "fedunlearn/unlearning.hpp"

namespace fedunlearn {

// Seeds left unset in a config are derived from master_seed with these tags,
// so changing master_seed moves every stream at once.
enum class SeedTag : std::uint64_t { Data = 1, Partition, Model, Poison, LocalTrain, Distill };

inline std::uint64_t derived_seed(std::uint64_t master, SeedTag tag) {
    return derive_seed(master, static_cast<std::uint64_t>(tag));
}

struct DataSection {
    std::string source = "synthetic";  // synthetic | idx
    std::size_t num_classes = 10;
    std::size_t feature_dim = 32;
    std::size_t per_class = 400;
    double spread = 1.0;
    std::string idx_images;
    std::string idx_labels;
    std::size_t idx_limit = 0;
    std::size_t n_clients = 10;
    std::size_t shard_size = 200;
    std::optional<std::uint64_t> seed;
    std::optional<std::uint64_t> partition_seed;
};

struct ModelSection {
    std::vector<std::size_t> hidden{32};
    std::optional<std::uint64_t> seed;
};

struct AttackSection {
    bool enabled = true;
    int attacker = 0;
    data::BackdoorSpec spec{{0, 1, 2, 3, 4, 5, 6, 7}, std::vector<double>(8, 20.0), 1, 7, 0.5};
    std::optional<std::uint64_t> seed;
};

struct TrainingSection {
    std::size_t rounds = 30;
    std::size_t local_epochs = 2;
    std::size_t batch_size = 16;
    double learning_rate = 0.1;
    std::optional<std::uint64_t> seed;
    unsigned threads = 1;
};

struct UnlearnSection {
    unlearn::SubtractionMode mode = unlearn::SubtractionMode::Lazy;
    int distill_epochs = 5;
    double temperature = 3.0;
    double distill_learning_rate = 0.05;
    std::size_t distill_batch_size = 32;
    double hard_label_weight = 0.0;
    std::size_t post_rounds = 5;
    std::optional<std::uint64_t> seed;
};

struct OutputSection {
    std::string directory = "runs/default";
    std::vector<std::string> formats{"csv", "json"};
};

struct ExperimentConfig {
    std::uint64_t master_seed = 1;
    DataSection data;
    ModelSection model;
    AttackSection attack;
    TrainingSection training;
    UnlearnSection unlearn;
    OutputSection output;

    std::uint64_t seed_for(SeedTag tag) const {
        const std::optional<std::uint64_t>* explicit_seed = nullptr;
        switch (tag) {
            case SeedTag::Data: explicit_seed = &data.seed; break;
            case SeedTag::Partition: explicit_seed = &data.partition_seed; break;
            case SeedTag::Model: explicit_seed = &model.seed; break;
            case SeedTag::Poison: explicit_seed = &attack.seed; break;
            case SeedTag::LocalTrain: explicit_seed = &training.seed; break;
            case SeedTag::Distill: explicit_seed = &unlearn.seed; break;
        }
        return explicit_seed->value_or(derived_seed(master_seed, tag));
    }

    std::vector<std::size_t> architecture() const {
        std::vector<std::size_t> arch{data.feature_dim};
        arch.insert(arch.end(), model.hidden.begin(), model.hidden.end());
        arch.push_back(data.num_classes);
        return arch;
    }

    fed::LocalTrainConfig local_train() const {
        return {training.local_epochs, training.batch_size, training.learning_rate, seed_for(SeedTag::LocalTrain)};
    }

    fed::RunOptions run_options() const {
        fed::RunOptions o;
        o.rounds = training.rounds;
        o.local = local_train();
        o.threads = training.threads;
        return o;
    }

    unlearn::DistillConfig distill() const {
        return {unlearn.distill_epochs,        unlearn.temperature,       unlearn.distill_learning_rate,
                unlearn.distill_batch_size,    unlearn.hard_label_weight, seed_for(SeedTag::Distill)};
    }
};

/// Materialized data and initial model for one configuration.
struct Experiment {
    ExperimentConfig config;
    std::vector<std::size_t> arch;
    ParameterVector initial_model;
    fed::Federation federation;
    data::Dataset distill_pool;
    data::Dataset attacker_clean_shard;  // the attacker's shard before poisoning

    int attacker() const { return config.attack.attacker; }
    const data::Dataset& attacker_shard() const {
        return federation.shards[static_cast<std::size_t>(config.attack.attacker)];
    }
};

inline Experiment build_experiment(const ExperimentConfig& cfg) {
    Experiment ex;
    ex.config = cfg;
    data::Dataset full;
    if (cfg.data.source == "synthetic") {
        full = data::gen_synthetic(cfg.data.num_classes, cfg.data.feature_dim, cfg.data.per_class, cfg.data.spread,
                                   cfg.seed_for(SeedTag::Data));
    } else if (cfg.data.source == "idx") {
        full = data::idx::load(cfg.data.idx_images, cfg.data.idx_labels, cfg.data.num_classes, cfg.data.idx_limit);
        ex.config.data.feature_dim = full.feature_dim;
    } else {
        throw ConfigurationError("unknown data source '" + cfg.data.source + "'");
    }
    ex.arch = ex.config.architecture();

    auto part = data::partition(full, cfg.data.n_clients, cfg.seed_for(SeedTag::Partition), cfg.data.shard_size);
    ex.federation.shards = std::move(part.client_shards);
    ex.federation.test_set = std::move(part.test_set);
    ex.distill_pool = std::move(part.distill_pool);
    ex.federation.spec = cfg.attack.spec;

    const auto attacker = static_cast<std::size_t>(cfg.attack.attacker);
    if (attacker >= ex.federation.shards.size()) throw ConfigurationError("attacker id out of range");
    ex.attacker_clean_shard = ex.federation.shards[attacker];
    if (cfg.attack.enabled) {
        ex.federation.shards[attacker] =
            data::poison_shard(ex.federation.shards[attacker], cfg.attack.spec, cfg.seed_for(SeedTag::Poison));
    }
    ex.federation.attack_set = data::build_attack_set(ex.federation.test_set, cfg.attack.spec);
    ex.initial_model = nn::init_model(ex.arch, cfg.seed_for(SeedTag::Model));
    return ex;
}

}  // namespace fedunlearn
