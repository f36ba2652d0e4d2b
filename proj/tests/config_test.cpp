#include <filesystem>

#include <gtest/gtest.h>

#include "fedunlearn/binary_io.hpp"
#include "fedunlearn/config.hpp"
#include "fedunlearn/experiment.hpp"

namespace fedunlearn {
namespace {

namespace fs = std::filesystem;

TEST(ConfigParse, EmptyTextGivesDefaults) {
    const auto rc = config::parse_text("");
    EXPECT_EQ(rc.experiment.master_seed, 1u);
    EXPECT_EQ(rc.experiment.data.n_clients, 10u);
    EXPECT_EQ(rc.experiment.training.rounds, 30u);
    EXPECT_EQ(rc.experiment.unlearn.distill_epochs, 5);
    EXPECT_DOUBLE_EQ(rc.experiment.unlearn.temperature, 3.0);
    EXPECT_FALSE(rc.pipeline.resume);
}

TEST(ConfigParse, AllSections) {
    const auto rc = config::parse_text(R"(
# comment line
master_seed = 42

[data]
num_classes = 4
feature_dim = 6     # trailing comment
per_class = 50
n_clients = 3
shard_size = 20

[model]
hidden = 8, 5

[attack]
source_class = 0
target_class = 3
trigger_indices = 1,2
trigger_values = 2.5,-1
poison_fraction = 0.25

[training]
rounds = 7
learning_rate = 0.2
threads = 2

[unlearn]
mode = rescaled
temperature = 4
hard_label_weight = 0.5

[output]
directory = out/here
formats = csv,svg

[pipeline]
resume = true
skip = Training
)");
    const auto& e = rc.experiment;
    EXPECT_EQ(e.master_seed, 42u);
    EXPECT_EQ(e.data.num_classes, 4u);
    EXPECT_EQ(e.data.feature_dim, 6u);
    EXPECT_EQ(e.model.hidden, (std::vector<std::size_t>{8, 5}));
    EXPECT_EQ(e.architecture(), (std::vector<std::size_t>{6, 8, 5, 4}));
    EXPECT_EQ(e.attack.spec.trigger_values, (std::vector<double>{2.5, -1.0}));
    EXPECT_EQ(e.attack.spec.target_class, 3);
    EXPECT_EQ(e.training.rounds, 7u);
    EXPECT_EQ(e.training.threads, 2u);
    EXPECT_EQ(e.unlearn.mode, unlearn::SubtractionMode::Rescaled);
    EXPECT_EQ(e.output.directory, "out/here");
    EXPECT_EQ(e.output.formats, (std::vector<std::string>{"csv", "svg"}));
    EXPECT_TRUE(rc.pipeline.resume);
    EXPECT_EQ(rc.pipeline.skip, (std::vector<std::string>{"Training"}));
}

TEST(ConfigParse, UnknownKeyReportsLine) {
    try {
        config::parse_text("[data]\nnum_classes = 4\nbogus = 1\n");
        FAIL();
    } catch (const config::UnknownKeyError& e) {
        EXPECT_EQ(e.key(), "data.bogus");
        EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
    }
    EXPECT_THROW(config::parse_text("[nope]\n"), config::UnknownKeyError);
    EXPECT_THROW(config::parse_text("rounds = 3\n"), config::UnknownKeyError);
}

TEST(ConfigParse, MalformedLines) {
    try {
        config::parse_text("[training]\n\nrounds = many\n");
        FAIL();
    } catch (const config::SyntaxError& e) {
        EXPECT_EQ(e.line(), 3u);
    }
    EXPECT_THROW(config::parse_text("[data\n"), config::SyntaxError);
    EXPECT_THROW(config::parse_text("[data]\nnum_classes\n"), config::SyntaxError);
    EXPECT_THROW(config::parse_text("[attack]\nenabled = maybe\n"), config::SyntaxError);
    EXPECT_THROW(config::parse_text("[unlearn]\nmode = eager\n"), config::SyntaxError);
}

TEST(ConfigParse, InvariantsNameTheField) {
    auto field_of = [](const char* text) {
        try {
            config::parse_text(text);
        } catch (const config::InvariantError& e) {
            return e.field();
        }
        return std::string("<none>");
    };
    EXPECT_EQ(field_of("[attack]\nsource_class = 7\n"), "attack.target_class");
    EXPECT_EQ(field_of("[attack]\ntrigger_values = 1\n"), "attack.trigger_values");
    EXPECT_EQ(field_of("[attack]\ntrigger_indices = 99\ntrigger_values = 1\n"), "attack.trigger_indices");
    EXPECT_EQ(field_of("[unlearn]\ntemperature = 0\n"), "unlearn.temperature");
    EXPECT_EQ(field_of("[unlearn]\nhard_label_weight = 2\n"), "unlearn.hard_label_weight");
    EXPECT_EQ(field_of("[data]\nnum_classes = 1\n"), "data.num_classes");
    EXPECT_EQ(field_of("[output]\nformats = pdf\n"), "output.formats");
    EXPECT_EQ(field_of("[pipeline]\nskip = Nothing\n"), "pipeline.skip");
}

TEST(ConfigParse, MissingFile) {
    EXPECT_THROW(config::parse_config("/nonexistent/fedunlearn.cfg"), config::MissingFileError);
}

TEST(ConfigParse, ReadsFile) {
    const auto path = fs::temp_directory_path() / "fedunlearn_config_test.cfg";
    io::write_file_atomic(path, "[training]\nrounds = 3\n");
    EXPECT_EQ(config::parse_config(path).experiment.training.rounds, 3u);
    fs::remove(path);
}

// ---------------------------------------------------------------------------

TEST(ConfigHash, ResolvedTextRoundTrips) {
    const auto rc = config::parse_text("master_seed = 9\n[model]\nhidden = 12\n[unlearn]\nmode = rescaled\n");
    const auto text = config::to_text(rc.experiment);
    const auto again = config::parse_text(text);
    EXPECT_EQ(config::to_text(again.experiment), text);
    EXPECT_EQ(config::config_hash(again.experiment), config::config_hash(rc.experiment));
}

TEST(ConfigHash, SeedsAreResolvedExplicitly) {
    ExperimentConfig c;
    const auto entries = config::resolved_entries(c);
    const auto seed = std::find_if(entries.begin(), entries.end(),
                                   [](const config::Entry& e) { return e.section == "model" && e.key == "seed"; });
    ASSERT_NE(seed, entries.end());
    EXPECT_EQ(seed->value, std::to_string(derived_seed(1, SeedTag::Model)));

    ExperimentConfig pinned = c;
    pinned.model.seed = derived_seed(1, SeedTag::Model);
    EXPECT_EQ(config::config_hash(pinned), config::config_hash(c));
}

TEST(ConfigHash, SensitiveToExperimentNotToOutput) {
    ExperimentConfig a;
    ExperimentConfig b = a;
    b.output.directory = "elsewhere";
    b.output.formats = {"svg"};
    b.training.threads = 4;
    EXPECT_EQ(config::config_hash(a), config::config_hash(b));
    b.master_seed = 2;
    EXPECT_NE(config::config_hash(a), config::config_hash(b));
    ExperimentConfig c = a;
    c.unlearn.temperature = 3.5;
    EXPECT_NE(config::config_hash(a), config::config_hash(c));
    EXPECT_EQ(config::hash_hex(0xabc), "0000000000000abc");
}

// ---------------------------------------------------------------------------

ExperimentConfig small_config() {
    ExperimentConfig c;
    c.data.num_classes = 3;
    c.data.feature_dim = 5;
    c.data.per_class = 40;
    c.data.n_clients = 4;
    c.data.shard_size = 20;
    c.attack.spec.trigger_indices = {0};
    c.attack.spec.trigger_values = {5.0};
    c.attack.spec.source_class = 1;
    c.attack.spec.target_class = 2;
    c.attack.attacker = 2;
    c.model.hidden = {6};
    return c;
}

TEST(BuildExperiment, MaterializesFederation) {
    const auto ex = build_experiment(small_config());
    ASSERT_EQ(ex.federation.shards.size(), 4u);
    EXPECT_EQ(ex.distill_pool.size(), 20u);
    EXPECT_EQ(ex.federation.test_set.size(), 120u - 100u);
    EXPECT_EQ(ex.arch, (std::vector<std::size_t>{5, 6, 3}));
    EXPECT_EQ(ex.initial_model.size(), 5u * 6 + 6 + 6 * 3 + 3);
    EXPECT_EQ(ex.attacker(), 2);
    EXPECT_EQ(ex.attacker_shard().provenance, data::Provenance::Poisoned);
    EXPECT_EQ(ex.attacker_clean_shard.provenance, data::Provenance::Clean);
    EXPECT_EQ(ex.federation.shards[0].provenance, data::Provenance::Clean);
    EXPECT_FALSE(ex.federation.attack_set.empty());
}

TEST(BuildExperiment, DisabledAttackLeavesShardClean) {
    auto c = small_config();
    c.attack.enabled = false;
    const auto ex = build_experiment(c);
    EXPECT_EQ(ex.attacker_shard().examples, ex.attacker_clean_shard.examples);
}

TEST(BuildExperiment, SameConfigSameModelAndData) {
    const auto a = build_experiment(small_config());
    const auto b = build_experiment(small_config());
    EXPECT_TRUE(a.initial_model.bit_equal(b.initial_model));
    EXPECT_EQ(a.federation.test_set.examples, b.federation.test_set.examples);
}

TEST(BuildExperiment, AttackerOutOfRange) {
    auto c = small_config();
    c.attack.attacker = 4;
    EXPECT_THROW(build_experiment(c), ConfigurationError);
}

}  // namespace
}  // namespace fedunlearn
