#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "repsteer/losses.hpp"
#include "repsteer/training.hpp"
#include "test_util.hpp"

using namespace repsteer;
using namespace repsteer::testing;

namespace {

RepBundle<double> random_bundle(std::size_t layers, std::size_t len, std::size_t d, std::uint64_t seed, bool unit = false) {
    RepBundle<double> b;
    b.response_len = len;
    Rng rng(seed);
    for (std::size_t l = 0; l < layers; ++l) {
        b.layers.push_back(static_cast<int>(l));
        Array<double> a(Shape{len, d});
        for (auto& v : a.storage()) v = rng.normal();
        if (unit)
            for (std::size_t r = 0; r < len; ++r) {
                double n = 0.0;
                for (std::size_t c = 0; c < d; ++c) n += a.at(r, c) * a.at(r, c);
                for (std::size_t c = 0; c < d; ++c) a.at(r, c) /= std::sqrt(n);
            }
        b.states.push_back(std::move(a));
    }
    return b;
}

struct Bundles {
    RepBundle<double> r, rp, rn, gp, gn;
};

Bundles random_bundles(std::uint64_t seed, bool unit = false) {
    return {random_bundle(2, 3, 5, seed, unit), random_bundle(2, 3, 5, seed + 1, unit), random_bundle(2, 3, 5, seed + 2, unit),
            random_bundle(2, 3, 5, seed + 3, unit), random_bundle(2, 3, 5, seed + 4, unit)};
}

double eval_loss(LossKind kind, const LossWeights& w, const Bundles& b, double sign = 1.0) {
    Graph<double> g;
    const auto r = as_constant(g, b.r), rp = as_constant(g, b.rp), rn = as_constant(g, b.rn);
    const auto gp = as_constant(g, b.gp), gn = as_constant(g, b.gn);
    const LossInputs in{&r, &rp, &rn, &gp, &gn};
    return g.value(composite_loss(g, kind, w, in, sign)).item();
}

double hand_distance(const RepBundle<double>& a, const RepBundle<double>& b) {
    double total = 0.0;
    for (std::size_t l = 0; l < a.states.size(); ++l)
        for (std::size_t r = 0; r < a.response_len; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < a.states[l].cols(); ++c) {
                const double diff = a.states[l].at(r, c) - b.states[l].at(r, c);
                s += diff * diff;
            }
            total += std::sqrt(s);
        }
    return total / double(a.states.size() * a.response_len);
}

constexpr LossKind kAllKinds[] = {LossKind::lorra_only, LossKind::cl_ct, LossKind::gmp_negative,
                                  LossKind::cl_mg,      LossKind::iter,  LossKind::pure_mg};

}  // namespace

TEST(Distance, OrthogonalUnitVectorsGiveSqrtTwo) {
    RepBundle<double> a{{0}, 1, {Array<double>(Shape{1, 2}, std::vector<double>{1.0, 0.0})}};
    RepBundle<double> b{{0}, 1, {Array<double>(Shape{1, 2}, std::vector<double>{0.0, 1.0})}};
    EXPECT_NEAR(rep_distance(a, b), std::sqrt(2.0), 1e-15);
    EXPECT_EQ(rep_distance(a, a), 0.0);
}

TEST(Distance, MeanOverLayersAndPositions) {
    const auto a = random_bundle(2, 3, 5, 1), b = random_bundle(2, 3, 5, 2);
    EXPECT_NEAR(rep_distance(a, b), hand_distance(a, b), 1e-12);
    EXPECT_NEAR(rep_distance(a, b), rep_distance(b, a), 1e-15);
}

TEST(Distance, UnitRepsAreBoundedByTwo) {
    for (std::uint64_t s = 0; s < 50; ++s) {
        const auto a = random_bundle(2, 4, 6, s, true), b = random_bundle(2, 4, 6, s + 100, true);
        const double d = rep_distance(a, b);
        EXPECT_GE(d, 0.0);
        EXPECT_LE(d, 2.0);
    }
}

TEST(Distance, MismatchedBundlesRejected) {
    const auto a = random_bundle(2, 3, 5, 1);
    EXPECT_THROW(rep_distance(a, random_bundle(2, 4, 5, 2)), ShapeError);
    EXPECT_THROW(rep_distance(a, random_bundle(3, 3, 5, 2)), ShapeError);
}

TEST(Composite, FormulasMatchHandComputation) {
    const auto b = random_bundles(10);
    const LossWeights w{3.0, 0.5};
    const double L = hand_distance(b.rp, b.rn);
    EXPECT_NEAR(eval_loss(LossKind::lorra_only, w, b), L, 1e-12);
    EXPECT_NEAR(eval_loss(LossKind::cl_ct, w, b), L + 3.0 * hand_distance(b.r, b.rp) - 0.5 * hand_distance(b.r, b.rn), 1e-12);
    EXPECT_NEAR(eval_loss(LossKind::gmp_negative, w, b), L - 3.0 * hand_distance(b.r, b.rp) + 0.5 * hand_distance(b.r, b.rn),
                1e-12);
    const double guided = 3.0 * hand_distance(b.r, b.gp) - 0.5 * hand_distance(b.r, b.gn);
    EXPECT_NEAR(eval_loss(LossKind::cl_mg, w, b), L + guided, 1e-12);
    EXPECT_EQ(eval_loss(LossKind::iter, w, b), eval_loss(LossKind::cl_mg, w, b));
    EXPECT_NEAR(eval_loss(LossKind::pure_mg, w, b), guided, 1e-12);
    EXPECT_NEAR(eval_loss(LossKind::cl_mg, w, b, -1.0), -L + guided, 1e-12);
}

TEST(Composite, ContrastivePairSumsToTwiceLorra) {
    Rng rng(77);
    for (std::uint64_t s = 0; s < 100; ++s) {
        const auto b = random_bundles(1000 + 7 * s);
        const LossWeights w{rng.uniform() * 20.0, rng.uniform() * 20.0};
        const double sum = eval_loss(LossKind::cl_ct, w, b) + eval_loss(LossKind::gmp_negative, w, b);
        ASSERT_LT(std::abs(sum - 2.0 * eval_loss(LossKind::lorra_only, w, b)), 1e-12) << "input " << s;
    }
}

TEST(Composite, ZeroWeightsDegenerateExactly) {
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto b = random_bundles(50 + s);
        EXPECT_EQ(eval_loss(LossKind::cl_ct, {0.0, 0.0}, b), eval_loss(LossKind::lorra_only, {0.0, 0.0}, b));
        EXPECT_EQ(eval_loss(LossKind::pure_mg, {0.0, 0.0}, b), 0.0);
    }
}

TEST(Composite, SignSanity) {
    auto b = random_bundles(5, true);
    b.gp = b.r;  // at the positive guidance
    const double at_gp = eval_loss(LossKind::pure_mg, {1.0, 0.0}, b);
    b.gp = b.gn;
    EXPECT_LT(at_gp, eval_loss(LossKind::pure_mg, {1.0, 0.0}, b));
    EXPECT_LT(eval_loss(LossKind::pure_mg, {0.0, 1.0}, b), 0.0);
}

TEST(Composite, MissingInputsAndBadWeights) {
    const auto b = random_bundles(3);
    Graph<double> g;
    const auto r = as_constant(g, b.r), rp = as_constant(g, b.rp), rn = as_constant(g, b.rn);
    EXPECT_THROW(composite_loss(g, LossKind::cl_mg, {}, LossInputs{&r, &rp, &rn, nullptr, nullptr}), ConfigError);
    EXPECT_THROW(composite_loss(g, LossKind::cl_ct, {}, LossInputs{nullptr, &rp, &rn}), ConfigError);
    EXPECT_THROW(composite_loss(g, LossKind::lorra_only, {-1.0, 1.0}, LossInputs{&r, &rp, &rn}), ConfigError);
    EXPECT_NO_THROW(composite_loss(g, LossKind::lorra_only, {}, LossInputs{nullptr, &rp, &rn}));
}

TEST(Composite, KindNamesRoundTrip) {
    for (const auto k : kAllKinds) EXPECT_EQ(parse_loss_kind(loss_kind_name(k)), k);
    EXPECT_THROW(parse_loss_kind("nope"), ConfigError);
}

// Model-level checks on a d=16, 2-layer toy in double precision.
class ModelLoss : public ::testing::Test {
protected:
    void SetUp() override {
        cfg = tiny_config();
        base = init_model<double>(cfg, 21);
        pos_guide = merge_adapter(base, random_adapter(cfg, 4, 22));
        neg_guide = merge_adapter(base, random_adapter(cfg, 4, 23));
        triple = render_triple({"Q: Bax's pet?", "A: owl"}, Templates{"Be true", "Be false"},
                               static_cast<std::size_t>(cfg.max_seq), "t");
        adapter = random_adapter(cfg, 4, 24);
    }

    TrainConfig train_config(LossKind kind) const {
        TrainConfig tc;
        tc.kind = kind;
        tc.weights = {2.0, 0.5};
        tc.lora.rank = 4;
        tc.template_targets = TemplateTargets::trainable;
        return tc;
    }

    TransformerConfig cfg;
    ModelWeights<double> base, pos_guide, neg_guide;
    ContrastTriple triple;
    LoraAdapter<double> adapter;
};

TEST_F(ModelLoss, GradientsMatchFiniteDifferencesForEveryKind) {
    const GuidanceSet<double> guide{&pos_guide, &neg_guide, 0};
    std::vector<Array<double>> params;
    for (const auto& [n, a] : adapter.tensors()) params.push_back(*a);
    for (const auto kind : kAllKinds) {
        const auto tc = train_config(kind);
        MultiParamFn<double> f = [&](Graph<double>& g, std::span<const Var> vs) {
            std::vector<Var> wv;
            for (const auto& [n, a] : base.tensors()) wv.push_back(g.constant_ref(*a));
            const BoundModel m = assemble_bound(cfg, std::move(wv), adapted_slots(adapter), adapter.spec.scale,
                                                std::vector<Var>(vs.begin(), vs.end()));
            return triple_loss(g, m, triple, tc, guide);
        };
        const auto rep = check_gradients<double>(f, params, 1e-5, 1e-4);
        EXPECT_TRUE(rep.pass) << loss_kind_name(kind) << ": max rel error " << rep.max_rel_error;
    }
}

TEST_F(ModelLoss, FullWeightGradientsMatchFiniteDifferences) {
    const GuidanceSet<double> guide{&pos_guide, &neg_guide, 0};
    std::vector<Array<double>> params;
    for (const auto& [n, a] : base.tensors()) params.push_back(*a);
    const auto tc = train_config(LossKind::iter);
    MultiParamFn<double> f = [&](Graph<double>& g, std::span<const Var> vs) {
        std::vector<Var> av;
        for (const auto& [n, a] : adapter.tensors()) av.push_back(g.constant_ref(*a));
        const BoundModel m = assemble_bound(cfg, std::vector<Var>(vs.begin(), vs.end()), adapted_slots(adapter),
                                            adapter.spec.scale, std::move(av));
        return triple_loss(g, m, triple, tc, guide);
    };
    const auto rep = check_gradients<double>(f, params, 1e-5, 1e-4);
    EXPECT_TRUE(rep.pass) << "max rel error " << rep.max_rel_error;
}

TEST_F(ModelLoss, NormalizedClCtLossIsBounded) {
    const LossWeights w{10.0, 1.0};
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto ad = random_adapter(cfg, 4, 100 + seed, 1.0);
        Graph<double> g;
        const BoundModel m = bind_model(g, base, Binding::constant, &ad, Binding::constant);
        TrainConfig tc = train_config(LossKind::cl_ct);
        tc.weights = w;
        const double v = g.value(triple_loss(g, m, triple, tc, GuidanceSet<double>{})).item();
        EXPECT_GE(v, -2.0 * w.beta);
        EXPECT_LE(v, 2.0 + 2.0 * w.alpha);
    }
}

TEST_F(ModelLoss, GuidanceEntersAsConstants) {
    const GuidanceSet<double> guide{&pos_guide, &neg_guide, 0};
    auto grads_with = [&](const GuidanceSet<double>& gs) {
        Graph<double> g;
        const BoundModel m = bind_model(g, base, Binding::constant, &adapter, Binding::parameter);
        const Var loss = triple_loss(g, m, triple, train_config(LossKind::iter), gs);
        auto gm = g.backward(loss);
        EXPECT_EQ(gm.size(), m.adapter_vars.size());
        std::vector<Array<double>> out;
        for (const Var v : m.adapter_vars) out.push_back(gm.at(v.id));
        return out;
    };
    const auto a = grads_with(guide);

    // Perturbing a guidance weight that the captured reps do not depend on
    // (the output head sits after the last target layer) leaves the bundle
    // values, and therefore the gradients, unchanged bit for bit.
    ModelWeights<double> pos2 = pos_guide;
    for (auto& v : pos2.w_out.storage()) v += 0.5;
    EXPECT_EQ(run_reps<double>(pos2, kNoAdapter, triple.positive.tokens, triple.positive.span),
              run_reps<double>(pos_guide, kNoAdapter, triple.positive.tokens, triple.positive.span));
    const auto b = grads_with(GuidanceSet<double>{&pos2, &neg_guide, 0});
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(a[i] == b[i]);

    // Changing the bundle values does change the gradient.
    ModelWeights<double> pos3 = pos_guide;
    for (auto& v : pos3.tok_emb.storage()) v *= 1.5;
    const auto c = grads_with(GuidanceSet<double>{&pos3, &neg_guide, 0});
    bool any = false;
    for (std::size_t i = 0; i < a.size(); ++i) any = any || !(a[i] == c[i]);
    EXPECT_TRUE(any);
}

TEST_F(ModelLoss, FrozenTemplateTargetsAreConstants) {
    TrainConfig tc = train_config(LossKind::lorra_only);
    tc.template_targets = TemplateTargets::frozen;
    {
        Graph<double> g;
        const BoundModel m = bind_model(g, base, Binding::constant, &adapter, Binding::parameter);
        const Var loss = triple_loss(g, m, triple, tc, GuidanceSet<double>{}, &base);
        const auto rp = run_reps<double>(base, kNoAdapter, triple.positive.tokens, triple.positive.span);
        const auto rn = run_reps<double>(base, kNoAdapter, triple.negative.tokens, triple.negative.span);
        EXPECT_NEAR(g.value(loss).item(), double(rep_distance(rp, rn)), 1e-12);
        for (const auto& [id, grad] : g.backward(loss))
            for (const double v : grad.storage()) ASSERT_EQ(v, 0.0);
    }

    tc.kind = LossKind::cl_ct;
    std::vector<Array<double>> params;
    for (const auto& [n, a] : adapter.tensors()) params.push_back(*a);
    MultiParamFn<double> f = [&](Graph<double>& g, std::span<const Var> vs) {
        std::vector<Var> wv;
        for (const auto& [n, a] : base.tensors()) wv.push_back(g.constant_ref(*a));
        const BoundModel m = assemble_bound(cfg, std::move(wv), adapted_slots(adapter), adapter.spec.scale,
                                            std::vector<Var>(vs.begin(), vs.end()));
        return triple_loss(g, m, triple, tc, GuidanceSet<double>{}, &base);
    };
    EXPECT_TRUE(check_gradients<double>(f, params, 1e-5, 1e-4).pass);

    Graph<double> g;
    const BoundModel m = bind_model(g, base, Binding::constant, &adapter, Binding::parameter);
    EXPECT_THROW(triple_loss(g, m, triple, tc, GuidanceSet<double>{}), ConfigError);
}

TEST_F(ModelLoss, GuidedKindsRequireGuidance) {
    Graph<double> g;
    const BoundModel m = bind_model(g, base, Binding::constant, &adapter, Binding::parameter);
    EXPECT_THROW(triple_loss(g, m, triple, train_config(LossKind::cl_mg), GuidanceSet<double>{}), ConfigError);
}
