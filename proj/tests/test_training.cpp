#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "repsteer/training.hpp"
#include "test_util.hpp"

using namespace repsteer;
using namespace repsteer::testing;

TEST(AdamW, FirstStepMovesByLearningRate) {
    Array<double> p(Shape{3}, std::vector<double>{1.0, -2.0, 0.5});
    const Array<double> g(Shape{3}, std::vector<double>{0.3, -4.0, 1e-3});
    AdamWState st;
    ASSERT_EQ(adamw_step<double>({&p}, {g}, st, AdamWConfig{}), StepResult::applied);
    // m_hat = g and v_hat = g^2 after bias correction, so the step is lr * g / (|g| + eps).
    EXPECT_NEAR(p[0], 1.0 - 1e-3 * 0.3 / (0.3 + 1e-8), 1e-15);
    EXPECT_NEAR(p[1], -2.0 + 1e-3 * 4.0 / (4.0 + 1e-8), 1e-15);
    EXPECT_NEAR(p[2], 0.5 - 1e-3 * 1e-3 / (1e-3 + 1e-8), 1e-15);
    EXPECT_EQ(st.t, 1u);
}

TEST(AdamW, ZeroGradientLeavesParamsUnchanged) {
    Array<double> p(Shape{2}, std::vector<double>{1.0, 2.0});
    const auto before = p;
    AdamWState st;
    adamw_step<double>({&p}, {Array<double>(Shape{2})}, st, AdamWConfig{});
    EXPECT_EQ(p, before);
}

TEST(AdamW, NonFiniteGradientSkipsWholeStep) {
    Array<double> p(Shape{2}, std::vector<double>{1.0, 2.0});
    Array<double> q(Shape{1}, std::vector<double>{3.0});
    const auto p0 = p, q0 = q;
    AdamWState st;
    const Array<double> gp(Shape{2}, std::vector<double>{0.1, 0.1});
    const Array<double> gq(Shape{1}, std::vector<double>{std::nan("")});
    EXPECT_EQ(adamw_step<double>({&p, &q}, {gp, gq}, st, AdamWConfig{}), StepResult::skipped_nonfinite);
    EXPECT_EQ(p, p0);
    EXPECT_EQ(q, q0);
    EXPECT_EQ(st.t, 0u);
    EXPECT_EQ(st.skipped, 1u);
    EXPECT_THROW(adamw_step<double>({&p}, {gq}, st, AdamWConfig{}), ShapeError);
}

TEST(Sampler, EpochsArePermutations) {
    BatchSampler a(10, 4), b(10, 4);
    std::multiset<std::size_t> seen;
    for (int k = 0; k < 5; ++k) {
        const auto x = a.next(2);
        EXPECT_EQ(x, b.next(2));
        seen.insert(x.begin(), x.end());
    }
    EXPECT_EQ(seen.size(), 10u);
    EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), 10u);
    EXPECT_NE(a.next(10), BatchSampler(10, 5).next(10));
    EXPECT_THROW(BatchSampler(0, 1), DataError);
}

TEST(TrainConfig, Validation) {
    TrainConfig c;
    EXPECT_NO_THROW(c.validate());
    c.eval_every = 7;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig{};
    c.lorra_sign = 0.5;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig{};
    c.weights.alpha = -1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig{};
    c.kind = LossKind::lorra_only;
    c.template_targets = TemplateTargets::frozen;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TrainConfig, AutomaticTemplateTargets) {
    EXPECT_EQ(resolve_template_targets(TemplateTargets::automatic, LossKind::lorra_only), TemplateTargets::trainable);
    EXPECT_EQ(resolve_template_targets(TemplateTargets::automatic, LossKind::cl_ct), TemplateTargets::frozen);
    EXPECT_EQ(resolve_template_targets(TemplateTargets::trainable, LossKind::cl_ct), TemplateTargets::trainable);
}

class TrainingFixture : public ::testing::Test {
protected:
    void SetUp() override {
        cfg = tiny_config();
        cfg.max_seq = 64;
        base = init_model<double>(cfg, 1);
        const auto corpus = emit_corpus(generate_fact_world(3, 8, 8), {0.8, 0.2}, 3);
        data = render_all(corpus.train, static_cast<std::size_t>(cfg.max_seq));
        mcq = corpus.eval;
        pos = merge_adapter(base, random_adapter(cfg, 4, 2));
        neg = merge_adapter(base, random_adapter(cfg, 4, 3));
    }

    TrainConfig small(LossKind kind) const {
        TrainConfig tc;
        tc.kind = kind;
        tc.t_max = 4;
        tc.eval_every = 2;
        tc.batch_size = 3;
        tc.learning_rate = 1e-2;
        tc.seed = 5;
        tc.lora.rank = 4;
        return tc;
    }

    TransformerConfig cfg;
    ModelWeights<double> base, pos, neg;
    std::vector<ContrastTriple> data;
    std::vector<McqItem> mcq;
};

TEST_F(TrainingFixture, RoundIsDeterministicAndLeavesBaseFrozen) {
    const auto tc = small(LossKind::cl_ct);
    auto s1 = make_state(base, data.size(), tc, "t");
    auto s2 = make_state(base, data.size(), tc, "t");
    const auto r1 = train_round(s1, data, GuidanceSet<double>{}, tc, mcq);
    const auto r2 = train_round(s2, data, GuidanceSet<double>{}, tc, mcq);
    ASSERT_TRUE(r1.final_model.adapter && r2.final_model.adapter);
    EXPECT_EQ(*r1.final_model.adapter, *r2.final_model.adapter);
    EXPECT_EQ(history_csv(r1.summary.history, false), history_csv(r2.summary.history, false));
    EXPECT_EQ(r1.final_model.weights, base);
    EXPECT_FALSE(*r1.final_model.adapter == *make_trainable(base, tc, "t").adapter);
    EXPECT_EQ(r1.summary.history.size(), 2u);
    EXPECT_EQ(s1.step, 4);
    EXPECT_EQ(s1.round, 1);
}

TEST_F(TrainingFixture, BestTiesGoToEarliestEvaluation) {
    auto tc = small(LossKind::pure_mg);
    tc.weights = {0.0, 0.0};  // zero gradient: every evaluation scores the same
    auto st = make_state(base, data.size(), tc, "t");
    const auto r = train_round(st, data, GuidanceSet<double>{&pos, &neg, 0}, tc, mcq);
    ASSERT_EQ(r.summary.history.size(), 2u);
    EXPECT_EQ(r.summary.history[0].mc1, r.summary.history[1].mc1);
    EXPECT_EQ(r.summary.best_step, 2);
    EXPECT_EQ(*r.final_model.adapter, *make_trainable(base, tc, "t").adapter);
    EXPECT_EQ(r.summary.history[0].loss, 0.0);
}

TEST_F(TrainingFixture, FullWeightTrainingMovesBase) {
    auto tc = small(LossKind::lorra_only);
    tc.full_weights = true;
    tc.t_max = 2;
    auto st = make_state(base, data.size(), tc, "t");
    const auto r = train_round(st, data, GuidanceSet<double>{}, tc, mcq);
    EXPECT_FALSE(r.final_model.adapter);
    EXPECT_FALSE(r.final_model.weights == base);
}

TEST_F(TrainingFixture, GuidedKindWithoutGuidanceIsConfigError) {
    auto st = make_state(base, data.size(), small(LossKind::cl_mg), "t");
    EXPECT_THROW(train_round(st, data, GuidanceSet<double>{}, small(LossKind::cl_mg), mcq), ConfigError);
}

TEST_F(TrainingFixture, NonFiniteModelAbortsAfterConsecutiveSkips) {
    auto broken = base;
    for (auto& v : broken.tok_emb.storage()) v = std::nan("");
    auto tc = small(LossKind::cl_ct);
    tc.t_max = 20;
    tc.eval_every = 10;
    auto st = make_state(broken, data.size(), tc, "t");
    int skipped_logs = 0;
    RoundIO io;
    io.log = [&](const std::string& s) { skipped_logs += s.find("skipped") != std::string::npos; };
    EXPECT_THROW(train_round(st, data, GuidanceSet<double>{}, tc, mcq, io), NumericError);
    EXPECT_EQ(skipped_logs, kMaxConsecutiveSkips);
}

TEST_F(TrainingFixture, SingleIterRoundEqualsClMg) {
    Checkpoint<double> p0, n0;
    p0.weights = pos;
    n0.weights = neg;
    auto tc = small(LossKind::iter);
    tc.rounds = 1;
    const auto it = run_iterative(base, p0, n0, data, tc, mcq);

    auto mg = small(LossKind::cl_mg);
    auto st = make_state(base, data.size(), mg, "iter");
    const auto r = train_round(st, data, GuidanceSet<double>{&pos, &neg, 0}, mg, mcq);
    EXPECT_EQ(*it.final_model.adapter, *r.final_model.adapter);
    EXPECT_EQ(history_csv(it.history, false), history_csv(r.summary.history, false));
}

TEST_F(TrainingFixture, IterBestSoFarIsMonotoneAndNegativeFixed) {
    Checkpoint<double> p0, n0;
    p0.weights = pos;
    n0.weights = neg;
    auto tc = small(LossKind::iter);
    tc.rounds = 3;
    const auto it = run_iterative(base, p0, n0, data, tc, mcq);
    ASSERT_EQ(it.best_so_far.size(), 3u);
    for (std::size_t i = 1; i < 3; ++i) EXPECT_GE(it.best_so_far[i], it.best_so_far[i - 1]);
    EXPECT_EQ(it.negative_fingerprint_start, it.negative_fingerprint_end);
    EXPECT_EQ(it.history.size(), 6u);
    EXPECT_EQ(it.history.back().step, 12);
    EXPECT_EQ(it.history.back().round, 2);
}

TEST_F(TrainingFixture, GuidanceCheckpointTransfersThroughDisk) {
    TempDir dir("transfer");
    const auto g = pretrain_guidance(base, GuidanceRole::positive, data, mcq, small(LossKind::cl_ct));
    save_checkpoint(dir / "pos", g.best_checkpoint);
    const auto loaded = load_checkpoint<double>(dir / "pos");
    Checkpoint<double> n0;
    n0.weights = neg;
    auto tc = small(LossKind::iter);
    tc.rounds = 1;
    EXPECT_NO_THROW(run_iterative(base, loaded, n0, data, tc, mcq));

    auto other = cfg;
    other.d_model = 32;
    Checkpoint<double> wrong;
    wrong.weights = init_model<double>(other, 1);
    EXPECT_THROW(run_iterative(base, wrong, n0, data, tc, mcq), CheckpointError);
}

TEST_F(TrainingFixture, NegativeGuidanceSelectsLowestScore) {
    const auto tc = small(LossKind::cl_ct);
    const auto g = pretrain_guidance(base, GuidanceRole::negative, data, mcq, tc);
    double lowest = 2.0;
    for (const auto& h : g.summary.history) lowest = std::min(lowest, h.mc1);
    EXPECT_EQ(g.summary.best_mc1, lowest);
    EXPECT_EQ(g.best_checkpoint.role, Role::negative);
    EXPECT_EQ(guidance_config(tc, GuidanceRole::negative).kind, LossKind::gmp_negative);
    EXPECT_EQ(guidance_config(tc, GuidanceRole::negative).weights.beta, 10.0);
}

TEST_F(TrainingFixture, SweepRunsEveryPairAndWritesHistories) {
    TempDir dir("sweep");
    auto tc = small(LossKind::pure_mg);
    tc.t_max = 2;
    const auto entries = sweep_pure_mg(base, GuidanceSet<double>{&pos, &neg, 0}, data, {1.0, 10.0, 100.0},
                                       {1.0, 5.0, 10.0, 100.0}, tc, mcq, dir.path());
    ASSERT_EQ(entries.size(), 12u);
    EXPECT_EQ(entries[5].alpha, 10.0);
    EXPECT_EQ(entries[5].beta, 5.0);
    for (const auto& e : entries) {
        EXPECT_TRUE(std::filesystem::exists(dir.path() / sweep_file_name(e.alpha, e.beta)));
        EXPECT_EQ(e.summary.history.size(), 1u);
    }
    EXPECT_EQ(sweep_file_name(10.0, 5.0), "pure_mg_a10_b5.csv");
}

TEST(BasePretrain, DeterministicAndLowersLoss) {
    auto cfg = tiny_config();
    cfg.max_seq = 64;
    const auto world = generate_fact_world(2, 4, 2);
    BasePretrainConfig bc;
    bc.steps = 40;
    bc.batch_size = 4;
    bc.log_every = 20;
    bc.seed = 3;
    std::vector<double> losses;
    const auto a = pretrain_base<double>(cfg, world, Templates{}, bc, [&](const std::string& s) {
        losses.push_back(std::stod(s.substr(s.rfind(' ') + 1)));
    });
    EXPECT_EQ(a, pretrain_base<double>(cfg, world, Templates{}, bc));
    ASSERT_EQ(losses.size(), 2u);
    EXPECT_LT(losses[1], losses[0]);
}
