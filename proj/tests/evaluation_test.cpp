#include <gtest/gtest.h>

#include "fedunlearn/evaluation.hpp"
#include "fedunlearn/nn.hpp"
#include "test_util.hpp"

namespace fedunlearn {
namespace {

using testing::labelled_dataset;

ParameterVector zero_model(std::size_t dim, std::size_t classes) {
    return ParameterVector(nn::dense_manifest(std::vector<std::size_t>{dim, classes}));
}

// One-input, two-class linear model whose logit gap on x = 1 is `gap`.
ParameterVector gap_model(double gap) { return ParameterVector({LayerShape{1, 2, true}}, {gap, 0.0, 0.0, 0.0}); }

data::Dataset one_example() {
    data::Dataset ds;
    ds.num_classes = 2;
    ds.feature_dim = 1;
    ds.examples.push_back({{1.0}, 0, 0, data::Provenance::Test, data::kNoOwner});
    return ds;
}

TEST(Accuracy, TiesResolveToLowestClass) {
    // zero model predicts class 0 everywhere
    const auto ds = labelled_dataset({0, 0, 1, 2}, 3, 4);
    EXPECT_DOUBLE_EQ(eval::test_accuracy(zero_model(4, 3), ds), 0.5);
}

TEST(Accuracy, EmptySetThrows) {
    data::Dataset empty;
    empty.feature_dim = 4;
    EXPECT_THROW(eval::test_accuracy(zero_model(4, 3), empty), DomainError);
}

TEST(AttackSuccess, CountsPredictionsOfTargetClass) {
    const auto ds = labelled_dataset({1, 1, 1, 1}, 3, 4);
    data::BackdoorSpec spec;
    spec.target_class = 0;
    EXPECT_DOUBLE_EQ(eval::attack_success(zero_model(4, 3), ds, spec), 1.0);
    spec.target_class = 2;
    EXPECT_DOUBLE_EQ(eval::attack_success(zero_model(4, 3), ds, spec), 0.0);
    data::Dataset empty;
    EXPECT_THROW(eval::attack_success(zero_model(4, 3), empty, spec), DomainError);
}

TEST(LossRatio, IdenticalModelsGiveOne) {
    const auto m = nn::init_model({4, 3}, 2);
    EXPECT_DOUBLE_EQ(eval::loss_ratio(m, m, labelled_dataset({0, 1, 2}, 3, 4)).value, 1.0);
}

TEST(LossRatio, DoubledLossGivesHalf) {
    // gap 1 -> loss log(1 + e^-1); gap 0.138005... doubles it
    const auto r = eval::loss_ratio(gap_model(1.0), gap_model(0.13800519594174895), one_example());
    EXPECT_NEAR(r.value, 0.5, 1e-12);
    EXPECT_FALSE(r.clamped);
}

TEST(LossRatio, NearZeroCandidateLossIsClamped) {
    const auto r = eval::loss_ratio(gap_model(1.0), gap_model(200.0), one_example());
    EXPECT_TRUE(r.clamped);
    EXPECT_NEAR(r.value, std::log1p(std::exp(-1.0)) / eval::kLossFloor, 1e-3);
}

TEST(Skew, EuclideanDistance) {
    EXPECT_DOUBLE_EQ(eval::skew_norm(testing::scalar_params({3.0, 4.0}), testing::scalar_params({0.0, 0.0})), 5.0);
    const auto m = nn::init_model({4, 3}, 2);
    EXPECT_EQ(eval::skew_norm(m, m), 0.0);
    EXPECT_THROW(eval::skew_norm(testing::scalar_params({1.0}), m), ShapeError);
}

TEST(Stage, NamesRoundTrip) {
    for (auto s : eval::kAllStages) EXPECT_EQ(eval::parse_stage(eval::stage_name(s)), s);
    EXPECT_EQ(eval::stage_name(eval::Stage::Subtraction), "UL-Subtraction");
    EXPECT_THROW(eval::parse_stage("Bogus"), LookupError);
}

TEST(StageReport, FillsEveryField) {
    const auto test = labelled_dataset({0, 1, 2, 1}, 3, 4);
    data::BackdoorSpec spec;
    spec.trigger_indices = {3};
    spec.trigger_values = {1.0};
    spec.source_class = 1;
    spec.target_class = 0;
    const auto atk = data::build_attack_set(test, spec);
    const auto original = nn::init_model({4, 3}, 1);
    const auto model = zero_model(4, 3);
    std::vector<eval::StageReport> all;
    eval::ReportContext ctx{&test, &atk, &spec, &original, &original};
    const auto r = eval::stage_report(eval::Stage::Distillation, model, ctx, 12, &all);
    EXPECT_EQ(r.stage, eval::Stage::Distillation);
    EXPECT_DOUBLE_EQ(r.test_acc, 0.25);
    EXPECT_DOUBLE_EQ(r.atk_acc, 1.0);
    EXPECT_DOUBLE_EQ(r.loss_ratio, eval::mean_hard_loss(original, test) / std::log(3.0));
    EXPECT_DOUBLE_EQ(r.skew_l2, original.l2_norm());
    EXPECT_EQ(r.wall_time_ms, 12);
    ASSERT_EQ(all.size(), 1u);

    ctx.reference = nullptr;
    EXPECT_THROW(eval::stage_report(eval::Stage::Training, model, ctx, 0), StateError);
}

}  // namespace
}  // namespace fedunlearn
