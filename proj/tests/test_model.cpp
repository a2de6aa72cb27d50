#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "repsteer/model.hpp"
#include "repsteer/rng.hpp"
#include "test_util.hpp"

using namespace repsteer;
using namespace repsteer::testing;

TEST(Config, ValidatesHeadsAndLayers) {
    TransformerConfig c;
    EXPECT_NO_THROW(c.validate());
    c.n_heads = 5;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TransformerConfig{};
    c.target_layers = {3, 8};
    EXPECT_THROW(c.validate(), ConfigError);
    c.target_layers = {};
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, ToyDefaultMatchesDesign) {
    const TransformerConfig c;
    EXPECT_EQ(c.vocab_size, 256);
    EXPECT_EQ(c.d_model, 64);
    EXPECT_EQ(c.n_layers, 8);
    EXPECT_EQ(c.n_heads, 4);
    EXPECT_EQ(c.max_seq, 192);
    EXPECT_EQ(c.target_layers, (std::vector<int>{3, 4, 5, 6}));
    EXPECT_TRUE(c.normalize_reps);
}

TEST(Config, FingerprintCoversShapesOnly) {
    TransformerConfig a, b;
    b.target_layers = {2, 3};
    EXPECT_EQ(a.fingerprint(), b.fingerprint());
    b.d_model = 32;
    EXPECT_NE(a.fingerprint(), b.fingerprint());
}

TEST(Init, DeterministicPerSeed) {
    const auto cfg = tiny_config();
    EXPECT_EQ(init_model<double>(cfg, 3), init_model<double>(cfg, 3));
    EXPECT_FALSE(init_model<double>(cfg, 3) == init_model<double>(cfg, 4));
}

TEST(Init, FreshAdapterHasZeroB) {
    const auto cfg = tiny_config();
    const auto ad = init_lora<double>(cfg, LoraSpec{}, 1);
    std::size_t pairs = 0;
    for (const auto& [name, a] : ad.tensors()) {
        if (name.back() == 'B') {
            ++pairs;
            for (const double v : a->storage()) EXPECT_EQ(v, 0.0);
        }
    }
    EXPECT_EQ(pairs, static_cast<std::size_t>(2 * cfg.n_layers));  // q and v per layer
}

TEST(Forward, ZeroAdapterIdentity) {
    const auto cfg = tiny_config();
    const auto w = init_model<double>(cfg, 1);
    const auto ad = init_lora<double>(cfg, LoraSpec{}, 2);
    for (int trial = 0; trial < 20; ++trial) {
        const auto toks = random_tokens(cfg, 5 + trial % 7, 100 + trial);
        const auto [la, ra] = run_forward<double>(w, &ad, toks, {0, toks.size()});
        const auto [lb, rb] = run_forward<double>(w, kNoAdapter, toks, {0, toks.size()});
        EXPECT_LT(max_abs_diff(la, lb), 1e-6);
    }
}

TEST(Forward, FullSpanRepLengthAndNormalization) {
    const auto cfg = tiny_config();
    const auto w = init_model<double>(cfg, 1);
    const auto toks = random_tokens(cfg, 9, 7);
    const auto reps = run_reps<double>(w, kNoAdapter, toks, {0, toks.size()});
    EXPECT_EQ(reps.response_len, toks.size());
    ASSERT_EQ(reps.states.size(), cfg.target_layers.size());
    for (const auto& s : reps.states) {
        for (std::size_t r = 0; r < s.rows(); ++r) {
            double n = 0.0;
            for (std::size_t c = 0; c < s.cols(); ++c) n += s.at(r, c) * s.at(r, c);
            EXPECT_NEAR(std::sqrt(n), 1.0, 1e-6);
        }
    }
}

TEST(Forward, RepsReproducibleBitwise) {
    const auto cfg = tiny_config();
    const auto toks = random_tokens(cfg, 12, 8);
    const auto a = run_reps<double>(init_model<double>(cfg, 5), kNoAdapter, toks, {3, 9});
    const auto b = run_reps<double>(init_model<double>(cfg, 5), kNoAdapter, toks, {3, 9});
    EXPECT_EQ(a, b);
}

TEST(Forward, Causality) {
    const auto cfg = tiny_config();
    const auto w = init_model<double>(cfg, 9);
    auto toks = random_tokens(cfg, 10, 10);
    const auto [la, ra] = run_forward<double>(w, kNoAdapter, toks, {0, 1});
    const std::size_t t = 4;
    for (std::size_t k = t + 1; k < toks.size(); ++k) toks[k] = (toks[k] + 17) % cfg.vocab_size;
    const auto [lb, rb] = run_forward<double>(w, kNoAdapter, toks, {0, 1});
    for (std::size_t r = 0; r <= t; ++r)
        for (std::size_t c = 0; c < la.cols(); ++c) EXPECT_EQ(la.at(r, c), lb.at(r, c));
    bool later_differs = false;
    for (std::size_t c = 0; c < la.cols(); ++c) later_differs = later_differs || la.at(t + 1, c) != lb.at(t + 1, c);
    EXPECT_TRUE(later_differs);
}

TEST(Forward, RejectsBadInputs) {
    const auto cfg = tiny_config();
    const auto w = init_model<double>(cfg, 1);
    const std::vector<int> bad{1, 300};
    EXPECT_THROW(run_forward<double>(w, kNoAdapter, bad, {0, 2}), DataError);
    const std::vector<int> ok{1, 2, 3};
    EXPECT_THROW(run_forward<double>(w, kNoAdapter, ok, {2, 2}), DataError);
    EXPECT_THROW(run_forward<double>(w, kNoAdapter, std::vector<int>(cfg.max_seq + 1, 1), {0, 1}), DataError);
}

TEST(Merge, ZeroAdapterLeavesWeightsIdentical) {
    const auto cfg = tiny_config();
    const auto w = init_model<double>(cfg, 1);
    EXPECT_EQ(merge_adapter(w, init_lora<double>(cfg, LoraSpec{}, 2)), w);
}

TEST(Merge, MergedForwardMatchesAdaptedForward) {
    auto cfg = tiny_config();
    cfg.d_model = 32;
    cfg.n_heads = 4;
    const auto w = init_model<double>(cfg, 1);
    const auto ad = random_adapter(cfg, 8, 3);
    const auto merged = merge_adapter(w, ad);
    for (int trial = 0; trial < 100; ++trial) {
        const auto toks = random_tokens(cfg, 3 + trial % 9, 500 + trial);
        const auto [la, ra] = run_forward<double>(w, &ad, toks, {0, toks.size()});
        const auto [lm, rm] = run_forward<double>(merged, kNoAdapter, toks, {0, toks.size()});
        ASSERT_LT(max_abs_diff(la, lm), 1e-6) << "trial " << trial;
    }
}

TEST(Merge, TwiceDiffersFromOnce) {
    const auto cfg = tiny_config();
    const auto w = init_model<double>(cfg, 1);
    const auto ad = random_adapter(cfg, 4, 3);
    EXPECT_FALSE(merge_adapter(merge_adapter(w, ad), ad) == merge_adapter(w, ad));
}

TEST(Merge, ShapeMismatchRejected) {
    const auto cfg = tiny_config();
    auto other = cfg;
    other.d_model = 32;
    other.n_heads = 2;
    const auto w = init_model<double>(cfg, 1);
    EXPECT_THROW(merge_adapter(w, init_lora<double>(other, LoraSpec{}, 1)), ShapeError);
}

TEST(Logprob, UniformLogitsGiveLogOneOverV) {
    auto cfg = tiny_config();
    auto w = init_model<double>(cfg, 1);
    for (auto& v : w.w_out.storage()) v = 0.0;  // all logits zero
    const std::vector<int> prompt{5, 6}, completion{9};
    EXPECT_NEAR(completion_logprob(w, kNoAdapter, prompt, completion), std::log(1.0 / cfg.vocab_size), 1e-12);
}

TEST(Logprob, MatchesStepwiseBruteForce) {
    const auto cfg = tiny_config();
    const auto w = init_model<double>(cfg, 4);
    const std::vector<int> prompt{10, 20, 30}, completion{40, 50, 60};
    double expected = 0.0;
    std::vector<int> seq = prompt;
    for (const int tok : completion) {
        // Fresh forward on the growing prefix; softmax of the last row by hand.
        const auto [logits, reps] = run_forward<double>(w, kNoAdapter, seq, {0, 1});
        const std::size_t r = seq.size() - 1;
        double z = 0.0;
        for (std::size_t c = 0; c < logits.cols(); ++c) z += std::exp(logits.at(r, c));
        expected += std::log(std::exp(logits.at(r, static_cast<std::size_t>(tok))) / z);
        seq.push_back(tok);
    }
    EXPECT_NEAR(completion_logprob(w, kNoAdapter, prompt, completion), expected, 1e-9);
}

TEST(Logprob, AppendingTokensNeverIncreases) {
    const auto cfg = tiny_config();
    const auto w = init_model<double>(cfg, 4);
    const std::vector<int> prompt{1, 2};
    std::vector<int> comp;
    double prev = 0.0;
    for (int k = 0; k < 6; ++k) {
        comp.push_back(7 * k + 3);
        const double lp = completion_logprob(w, kNoAdapter, prompt, comp);
        EXPECT_LE(lp, prev);
        prev = lp;
    }
}

TEST(Logprob, LengthOverflowRejected) {
    const auto cfg = tiny_config();
    const auto w = init_model<double>(cfg, 1);
    EXPECT_THROW(completion_logprob(w, kNoAdapter, std::vector<int>(cfg.max_seq, 1), std::vector<int>{2}), DataError);
    EXPECT_THROW(completion_logprob(w, kNoAdapter, std::vector<int>{1}, std::vector<int>{}), DataError);
}

TEST(Generate, ZeroMaxNewIsEmpty) {
    const auto cfg = tiny_config();
    const auto w = init_model<double>(cfg, 1);
    EXPECT_TRUE(greedy_generate(w, kNoAdapter, std::vector<int>{1, 2}, 0).empty());
}

TEST(Generate, MatchesManualTwoStepArgmax) {
    const auto cfg = tiny_config();
    const auto w = init_model<double>(cfg, 6);
    std::vector<int> seq{3, 4, 5};
    std::vector<int> manual;
    for (int step = 0; step < 2; ++step) {
        const auto [logits, reps] = run_forward<double>(w, kNoAdapter, seq, {0, 1});
        const std::size_t r = seq.size() - 1;
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.cols(); ++c)
            if (logits.at(r, c) > logits.at(r, best)) best = c;
        if (static_cast<int>(best) == kEosToken) break;
        manual.push_back(static_cast<int>(best));
        seq.push_back(static_cast<int>(best));
    }
    const auto got = greedy_generate(w, kNoAdapter, std::vector<int>{3, 4, 5}, 2);
    EXPECT_EQ(got, manual);
    EXPECT_EQ(got, greedy_generate(w, kNoAdapter, std::vector<int>{3, 4, 5}, 2));
}

TEST(Generate, RejectsEmptyPromptAndOverflow) {
    const auto cfg = tiny_config();
    const auto w = init_model<double>(cfg, 1);
    EXPECT_THROW(greedy_generate(w, kNoAdapter, std::vector<int>{}, 2), DataError);
    EXPECT_THROW(greedy_generate(w, kNoAdapter, std::vector<int>{1}, cfg.max_seq), DataError);
}
