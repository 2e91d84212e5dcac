#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace m2iv;
using namespace m2iv::testing;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.num_layers = 2;
    c.hidden_dim = 16;
    c.num_heads = 2;
    c.vocab_size = 96;
    c.visual_vocab_size = 32;
    c.max_seq_len = 128;
    c.mlp_hidden_dim = 32;
    c.seed = 3;
    return c;
}

TaskSuite small_suite(const ModelConfig& c) {
    SyntheticTaskSpec s;
    s.operators = {Operator::Add, Operator::Mul};
    s.digit_hi = 3;
    return TaskSuite(TokenLayout::for_model(c), {s});
}

PretrainConfig short_run() {
    PretrainConfig p;
    p.epochs = 2;
    p.steps_per_epoch = 15;
    p.batch_size = 2;
    p.shots = 4;
    p.eval_episodes = 16;
    p.seed = 9;
    return p;
}

}  // namespace

TEST(Pretrain, ZeroEpochsReturnsInitialModel) {
    auto c = small_config();
    auto p = short_run();
    p.epochs = 0;
    auto res = pretrain_micro<float>(c, small_suite(c), p);
    EXPECT_EQ(res.model.weights_hash(), MicroModel<float>::init(c).weights_hash());
    EXPECT_TRUE(res.log.empty());
}

TEST(Pretrain, FirstEpochLowersLossOnFirstBatch) {
    auto c = small_config();
    auto res = pretrain_micro<float>(c, small_suite(c), short_run());
    EXPECT_LT(res.first_batch_after_epoch1, res.initial_loss);
    ASSERT_EQ(res.log.size(), 2u);
    for (const auto& r : res.log) {
        EXPECT_GE(r.icl_accuracy, 0.0);
        EXPECT_LE(r.icl_accuracy, 1.0);
    }
}

TEST(Pretrain, EqualSeedsGiveIdenticalWeights) {
    auto c = small_config();
    auto a = pretrain_micro<float>(c, small_suite(c), short_run());
    auto b = pretrain_micro<float>(c, small_suite(c), short_run());
    EXPECT_EQ(serialize_model(a.model), serialize_model(b.model));
}

TEST(Pretrain, CallbackSeesEveryEpoch) {
    auto c = small_config();
    int calls = 0;
    pretrain_micro<float>(c, small_suite(c), short_run(), [&](const PretrainRecord& r) { EXPECT_EQ(r.epoch, calls++); });
    EXPECT_EQ(calls, 2);
}

TEST(Pretrain, InvalidConfigRejected) {
    auto c = small_config();
    auto p = short_run();
    p.batch_size = 0;
    EXPECT_THROW(pretrain_micro<float>(c, small_suite(c), p), ConfigError);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
    // With bias correction the first update is lr * g / (|g| + eps) ~ lr * sign(g).
    AdamW<double> opt(3);
    double p[3] = {1.0, -2.0, 0.5};
    const double g[3] = {0.3, -4.0, 0.0};
    opt.begin_step();
    opt.update(0, p, g, 3, 0.1, 0.0);
    EXPECT_NEAR(p[0], 0.9, 1e-7);
    EXPECT_NEAR(p[1], -1.9, 1e-7);
    EXPECT_DOUBLE_EQ(p[2], 0.5);
}

TEST(AdamW, DecoupledDecayShrinksWithoutGradient) {
    AdamW<double> opt(1);
    double p = 2.0;
    const double g = 0.0;
    opt.begin_step();
    opt.update(0, &p, &g, 1, 0.1, 0.5);
    EXPECT_DOUBLE_EQ(p, 2.0 * (1 - 0.05));
}

TEST(Warmup, RisesFromFactorToOne) {
    EXPECT_DOUBLE_EQ(warmup_multiplier(0, 100, 1e-3), 1e-3);
    EXPECT_NEAR(warmup_multiplier(5, 100, 1e-3), 1e-3 + (1 - 1e-3) * 0.5, 1e-15);
    EXPECT_DOUBLE_EQ(warmup_multiplier(10, 100, 1e-3), 1.0);
    EXPECT_DOUBLE_EQ(warmup_multiplier(99, 100, 1e-3), 1.0);
}
