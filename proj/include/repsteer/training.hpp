#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "repsteer/checkpoint.hpp"
#include "repsteer/errors.hpp"
#include "repsteer/eval.hpp"
#include "repsteer/losses.hpp"
#include "repsteer/model.hpp"
#include "repsteer/optim.hpp"
#include "repsteer/parallel.hpp"
#include "repsteer/rng.hpp"
#include "repsteer/triples.hpp"

namespace repsteer {

// Where the templated bundles r+ and r- come from: the model being trained
// (gradient flows through them) or the same model without its adapter, held
// constant. `automatic` is frozen except for lorra_only, whose loss would
// otherwise be constant.
enum class TemplateTargets : std::uint8_t { automatic, trainable, frozen };

inline std::string_view template_targets_name(TemplateTargets t) {
    switch (t) {
        case TemplateTargets::trainable: return "trainable";
        case TemplateTargets::frozen: return "frozen";
        default: return "auto";
    }
}

inline TemplateTargets resolve_template_targets(TemplateTargets t, LossKind kind) {
    if (t != TemplateTargets::automatic) return t;
    return kind == LossKind::lorra_only ? TemplateTargets::trainable : TemplateTargets::frozen;
}

struct TrainConfig {
    LossKind kind = LossKind::iter;
    LossWeights weights{10.0, 1.0};
    int t_max = 1250;
    int eval_every = 10;
    double learning_rate = 1e-3;
    int batch_size = 16;
    int eval_batch_size = 32;
    std::uint64_t seed = 0;
    int rounds = 4;
    double lorra_sign = 1.0;
    bool full_weights = false;  // train every base tensor instead of a LoRA adapter
    TemplateTargets template_targets = TemplateTargets::automatic;
    LoraSpec lora{};
    Mc1Options mc1{};

    void validate() const {
        weights.validate();
        if (t_max <= 0) throw ConfigError("t_max must be positive (got " + std::to_string(t_max) + ")");
        if (eval_every <= 0 || t_max % eval_every != 0) {
            throw ConfigError("eval_every (" + std::to_string(eval_every) + ") must be positive and divide t_max (" +
                              std::to_string(t_max) + ")");
        }
        if (batch_size < 1 || eval_batch_size < 1) throw ConfigError("batch sizes must be >= 1");
        if (rounds < 1) throw ConfigError("rounds must be >= 1");
        if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
        if (lorra_sign != 1.0 && lorra_sign != -1.0) throw ConfigError("lorra_sign must be +1 or -1");
        if (lora.rank <= 0) throw ConfigError("LoRA rank must be positive");
        if (kind == LossKind::lorra_only && template_targets == TemplateTargets::frozen) {
            throw ConfigError("lorra_only with frozen template targets has a constant loss");
        }
    }
};

struct HistoryRow {
    int step = 0;  // global step, counted across rounds
    int round = 0;
    double loss = 0.0;
    double mc1 = 0.0;
    double wall_ms = 0.0;
};

inline std::string history_csv(const std::vector<HistoryRow>& h, bool with_timing = true) {
    std::ostringstream os;
    os << "step,round,loss,mc1,wall_ms\n";
    for (const auto& r : h) {
        os << r.step << "," << r.round << "," << fmt_real(r.loss) << "," << fmt_real(r.mc1) << ","
           << (with_timing ? fmt_real(r.wall_ms) : std::string("0")) << "\n";
    }
    return os.str();
}

// The model being optimized: frozen base plus either a LoRA adapter or, with
// full_weights, a mutable copy of every base tensor.
template <typename T>
struct Trainable {
    ModelWeights<T> weights;
    std::optional<LoraAdapter<T>> adapter;

    bool full() const { return !adapter; }
    std::vector<Array<T>*> params() {
        std::vector<Array<T>*> out;
        if (adapter) {
            for (auto& [n, a] : adapter->tensors()) out.push_back(a);
        } else {
            for (auto& [n, a] : weights.tensors()) out.push_back(a);
        }
        return out;
    }
    BoundModel bind(Graph<T>& g) const {
        return adapter ? bind_model(g, weights, Binding::constant, &*adapter, Binding::parameter)
                       : bind_model(g, weights, Binding::parameter);
    }
    static const std::vector<Var>& trainable_vars(const BoundModel& m, bool full) {
        return full ? m.weight_vars : m.adapter_vars;
    }
    const LoraAdapter<T>* adapter_ptr() const { return adapter ? &*adapter : nullptr; }
    ModelWeights<T> merged() const { return adapter ? merge_adapter(weights, *adapter) : weights; }
};

template <typename T>
Trainable<T> make_trainable(const ModelWeights<T>& base, const TrainConfig& cfg, std::string_view name) {
    Trainable<T> t;
    t.weights = base;
    if (!cfg.full_weights) t.adapter = init_lora<T>(base.config, cfg.lora, derive_seed(cfg.seed, "lora", fnv1a64(name)));
    return t;
}

// Epoch-wise sampling without replacement; each epoch is reshuffled with a
// seed derived from (seed, epoch).
class BatchSampler {
public:
    BatchSampler(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {
        if (n == 0) throw DataError("batch sampler: no training data");
    }

    std::vector<std::size_t> next(std::size_t batch) {
        std::vector<std::size_t> out;
        out.reserve(batch);
        while (out.size() < batch) {
            if (pos_ >= order_.size()) refill();
            out.push_back(order_[pos_++]);
        }
        return out;
    }
    std::uint64_t epoch() const { return epoch_; }

private:
    void refill() {
        order_.resize(n_);
        for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
        Rng rng(derive_seed(seed_, "shuffle", epoch_++));
        rng.shuffle(order_);
        pos_ = 0;
    }

    std::size_t n_;
    std::uint64_t seed_;
    std::uint64_t epoch_ = 0;
    std::size_t pos_ = 0;
    std::vector<std::size_t> order_;
};

// Frozen guidance models, stored with their adapters already merged in.
template <typename T>
struct GuidanceSet {
    const ModelWeights<T>* positive = nullptr;  // M_i^+
    const ModelWeights<T>* negative = nullptr;  // M^-
    int iteration = 0;
};

template <typename T>
void check_guidance(const ModelWeights<T>& model, const GuidanceSet<T>& g) {
    if (g.positive) require_same_architecture(model.config, g.positive->config, "positive guidance");
    if (g.negative) require_same_architecture(model.config, g.negative->config, "negative guidance");
}

// Per-triple composite loss on one graph. Guidance bundles R_i^+ = M_i^+(T+)
// and R_i^- = M^-(T-) enter as constants, and so do the templated bundles when
// cfg.template_targets is frozen; `frozen` then supplies the weights.
template <typename T>
Var triple_loss(Graph<T>& g, const BoundModel& m, const ContrastTriple& t, const TrainConfig& cfg,
                const GuidanceSet<T>& guide, const ModelWeights<T>* frozen = nullptr) {
    LossInputs in;
    std::optional<RepHandles> r, rp, rn, gp, gn;
    if (uses_neutral(cfg.kind)) {
        r = forward(g, m, t.neutral.tokens, t.neutral.span, false).reps;
        in.neutral = &*r;
    }
    const bool frozen_targets = resolve_template_targets(cfg.template_targets, cfg.kind) == TemplateTargets::frozen;
    if (uses_templated(cfg.kind) && frozen_targets) {
        if (!frozen) throw ConfigError("frozen template targets need the frozen model weights");
        rp = as_constant(g, run_reps<T>(*frozen, nullptr, t.positive.tokens, t.positive.span));
        rn = as_constant(g, run_reps<T>(*frozen, nullptr, t.negative.tokens, t.negative.span));
        in.pos_t = &*rp;
        in.neg_t = &*rn;
    } else if (uses_templated(cfg.kind)) {
        rp = forward(g, m, t.positive.tokens, t.positive.span, false).reps;
        rn = forward(g, m, t.negative.tokens, t.negative.span, false).reps;
        in.pos_t = &*rp;
        in.neg_t = &*rn;
    }
    if (needs_guidance(cfg.kind)) {
        if (!guide.positive || !guide.negative) {
            throw ConfigError("loss " + std::string(loss_kind_name(cfg.kind)) + " needs positive and negative guidance");
        }
        gp = as_constant(g, run_reps<T>(*guide.positive, nullptr, t.positive.tokens, t.positive.span));
        gn = as_constant(g, run_reps<T>(*guide.negative, nullptr, t.negative.tokens, t.negative.span));
        in.guide_pos = &*gp;
        in.guide_neg = &*gn;
    }
    return composite_loss(g, cfg.kind, cfg.weights, in, cfg.lorra_sign);
}

// Mean-over-batch loss and gradient, reduced in batch order. Returns
// nullopt when any item produces a non-finite value.
template <typename T>
std::optional<std::pair<double, std::vector<Array<T>>>> batch_gradient(
    const Trainable<T>& model, const std::vector<const ContrastTriple*>& batch, const TrainConfig& cfg,
    const GuidanceSet<T>& guide) {
    struct Slot {
        double loss = 0.0;
        std::vector<Array<T>> grads;
        bool ok = false;
    };
    std::vector<Slot> slots(batch.size());
    parallel_for(batch.size(), [&](std::size_t i) {
        try {
            Graph<T> g;
            const BoundModel m = model.bind(g);
            const Var loss = triple_loss(g, m, *batch[i], cfg, guide, &model.weights);
            auto gm = g.backward(loss);
            for (const Var v : Trainable<T>::trainable_vars(m, model.full())) slots[i].grads.push_back(std::move(gm.at(v.id)));
            slots[i].loss = double(g.value(loss).item());
            slots[i].ok = std::isfinite(slots[i].loss);
        } catch (const NumericError&) {
            slots[i].ok = false;
        }
    });
    for (const auto& s : slots)
        if (!s.ok) return std::nullopt;
    std::vector<Array<T>> total = std::move(slots[0].grads);
    double loss = slots[0].loss;
    for (std::size_t i = 1; i < slots.size(); ++i) {
        loss += slots[i].loss;
        for (std::size_t k = 0; k < total.size(); ++k) {
            T* dst = total[k].data();
            const T* src = slots[i].grads[k].data();
            for (std::size_t e = 0; e < total[k].size(); ++e) dst[e] += src[e];
        }
    }
    const T inv = T(1) / T(batch.size());
    for (auto& a : total)
        for (auto& v : a.storage()) v *= inv;
    return std::make_pair(loss / double(batch.size()), std::move(total));
}

inline constexpr int kMaxConsecutiveSkips = 10;

using LogFn = std::function<void(const std::string&)>;

// Running state of one optimization trajectory; survives across rounds.
template <typename T>
struct IterState {
    Trainable<T> model;
    AdamWState optim;
    BatchSampler sampler;
    int round = 0;
    int step = 0;  // global
    double best_score = -1.0;
    std::optional<Trainable<T>> best;
    int best_step = -1;
    std::vector<HistoryRow> history;
    int consecutive_skips = 0;
};

template <typename T>
IterState<T> make_state(const ModelWeights<T>& base, std::size_t n_data, const TrainConfig& cfg, std::string_view name) {
    return IterState<T>{make_trainable(base, cfg, name), AdamWState{}, BatchSampler(n_data, derive_seed(cfg.seed, name)),
                        0, 0, -1.0, std::nullopt, -1, {}, 0};
}

struct RoundSummary {
    int round = 0;
    double best_mc1 = 0.0;  // best within the round
    int best_step = 0;      // global step
    double best_so_far = 0.0;
    std::vector<HistoryRow> history;
};

template <typename T>
struct RoundResult {
    Trainable<T> final_model;
    Trainable<T> best_model;
    RoundSummary summary;
};

struct RoundIO {
    std::optional<std::filesystem::path> checkpoint_dir;  // receives round{i}_step{s}
    Role role = Role::finetuned;
    LogFn log;
    bool select_lowest = false;  // pick the lowest-MC1 evaluation as "best"
    bool save_final = true;      // also persist the last model when it is not the best
};

template <typename T>
Checkpoint<T> to_checkpoint(const Trainable<T>& t, Role role, int iteration, std::uint64_t seed) {
    Checkpoint<T> ck;
    ck.weights = t.weights;
    ck.adapter = t.adapter;
    ck.role = role;
    ck.iteration = iteration;
    ck.seed = seed;
    return ck;
}

inline std::string round_dir_name(int round, int step) {
    return "round" + std::to_string(round) + "_step" + std::to_string(step);
}

// Runs t_max steps of `cfg.kind` from the current state, evaluating MC1 every
// eval_every steps. The round's best model (ties to the earliest step) and the
// final model are returned and optionally persisted.
template <typename T>
RoundResult<T> train_round(IterState<T>& st, const std::vector<ContrastTriple>& data, const GuidanceSet<T>& guide,
                           const TrainConfig& cfg, const std::vector<McqItem>& mcq_eval, const RoundIO& io = {}) {
    cfg.validate();
    if (data.empty()) throw DataError("train_round: no training triples");
    if (mcq_eval.empty()) throw DataError("train_round: no evaluation items");
    if (needs_guidance(cfg.kind) && (!guide.positive || !guide.negative)) {
        throw ConfigError("loss " + std::string(loss_kind_name(cfg.kind)) + " requires positive and negative guidance");
    }
    check_guidance(st.model.weights, guide);

    const AdamWConfig opt{cfg.learning_rate};
    const auto t0 = std::chrono::steady_clock::now();
    std::optional<Trainable<T>> round_best;
    double round_best_score = -1.0;
    int round_best_step = -1;
    std::vector<HistoryRow> round_hist;

    for (int s = 1; s <= cfg.t_max; ++s) {
        const auto idx = st.sampler.next(static_cast<std::size_t>(cfg.batch_size));
        std::vector<const ContrastTriple*> batch;
        for (const auto i : idx) batch.push_back(&data[i]);
        auto res = batch_gradient(st.model, batch, cfg, guide);
        ++st.step;
        double loss = std::numeric_limits<double>::quiet_NaN();
        if (res) {
            loss = res->first;
            auto params = st.model.params();
            if (adamw_step(params, res->second, st.optim, opt) == StepResult::applied) {
                st.consecutive_skips = 0;
            } else {
                res.reset();
            }
        }
        if (!res) {
            ++st.consecutive_skips;
            if (io.log) io.log("step " + std::to_string(st.step) + ": non-finite loss or gradient, step skipped");
            if (st.consecutive_skips >= kMaxConsecutiveSkips) {
                throw NumericError("aborting after " + std::to_string(kMaxConsecutiveSkips) +
                                   " consecutive non-finite steps (last at step " + std::to_string(st.step) + ")");
            }
        }
        if (s % cfg.eval_every == 0) {
            const double mc1 = mc1_score(st.model.weights, st.model.adapter_ptr(), mcq_eval, cfg.mc1).mc1;
            const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            round_hist.push_back(HistoryRow{st.step, st.round, loss, mc1, ms});
            if (!round_best || (io.select_lowest ? mc1 < round_best_score : mc1 > round_best_score)) {
                round_best_score = mc1;
                round_best_step = st.step;
                round_best = st.model;
            }
            if (io.log) {
                io.log("round " + std::to_string(st.round) + " step " + std::to_string(st.step) + " loss " +
                       fmt_real(loss) + " mc1 " + fmt_real(mc1));
            }
        }
    }
    if (!round_best) throw NumericError("round " + std::to_string(st.round) + " produced no finite evaluation score");

    if (!st.best || (io.select_lowest ? round_best_score < st.best_score : round_best_score > st.best_score)) {
        st.best_score = round_best_score;
        st.best = round_best;
        st.best_step = round_best_step;
    }
    st.history.insert(st.history.end(), round_hist.begin(), round_hist.end());

    if (io.checkpoint_dir) {
        save_checkpoint(*io.checkpoint_dir / round_dir_name(st.round, round_best_step),
                        to_checkpoint(*round_best, io.role, st.round, cfg.seed));
        if (io.save_final && round_best_step != st.step) {
            save_checkpoint(*io.checkpoint_dir / round_dir_name(st.round, st.step),
                            to_checkpoint(st.model, io.role, st.round, cfg.seed));
        }
    }
    RoundResult<T> out{st.model, *round_best,
                       RoundSummary{st.round, round_best_score, round_best_step, st.best_score, std::move(round_hist)}};
    ++st.round;
    return out;
}

// Guidance pretraining ------------------------------------------------------------------

enum class GuidanceRole : std::uint8_t { positive, negative };

inline std::string guidance_role_name(GuidanceRole r) { return r == GuidanceRole::positive ? "positive" : "negative"; }

// Positive: CL_CT with (alpha, beta) = (10, 1). Negative: GMP_NEGATIVE with (1, 10).
inline TrainConfig guidance_config(TrainConfig cfg, GuidanceRole role) {
    if (role == GuidanceRole::positive) {
        cfg.kind = LossKind::cl_ct;
        cfg.weights = {10.0, 1.0};
    } else {
        cfg.kind = LossKind::gmp_negative;
        cfg.weights = {1.0, 10.0};
    }
    return cfg;
}

template <typename T>
struct GuidanceResult {
    Checkpoint<T> final_checkpoint;
    Checkpoint<T> best_checkpoint;  // for the negative role "best" is the lowest MC1
    RoundSummary summary;
};

// Trains an adapter on the frozen base. Best-by-eval selection is by highest
// MC1 for the positive role and lowest MC1 for the negative role.
template <typename T>
GuidanceResult<T> pretrain_guidance(const ModelWeights<T>& base, GuidanceRole role, const std::vector<ContrastTriple>& data,
                                    const std::vector<McqItem>& mcq_eval, const TrainConfig& user_cfg,
                                    const RoundIO& io = {}) {
    TrainConfig cfg = guidance_config(user_cfg, role);
    cfg.full_weights = false;
    cfg.validate();
    if (data.empty()) throw DataError("pretrain_guidance: no training triples");
    if (mcq_eval.empty()) throw DataError("pretrain_guidance: no evaluation items");
    const std::string name = "guidance/" + guidance_role_name(role);
    IterState<T> st = make_state(base, data.size(), cfg, name);

    const Role ck_role = role == GuidanceRole::positive ? Role::positive : Role::negative;
    RoundIO inner{io.checkpoint_dir, ck_role, io.log, role == GuidanceRole::negative, io.save_final};
    auto r = train_round(st, data, GuidanceSet<T>{}, cfg, mcq_eval, inner);
    return {to_checkpoint(r.final_model, ck_role, 0, cfg.seed), to_checkpoint(r.best_model, ck_role, 0, cfg.seed),
            std::move(r.summary)};
}

// Iterative loop ---------------------------------------------------------------------------

template <typename T>
struct IterResult {
    Trainable<T> final_model;
    Trainable<T> best_model;
    std::vector<RoundSummary> rounds;
    std::vector<double> best_so_far;  // after each round
    std::vector<HistoryRow> history;
    std::string negative_fingerprint_start, negative_fingerprint_end;
};

// Round i trains with guidance (M_i^+, M^-); afterwards the round's best model
// becomes M_{i+1}^+. M^- never changes. The trainable model carries over
// between rounds.
template <typename T>
IterResult<T> run_iterative(const ModelWeights<T>& base, const Checkpoint<T>& positive0, const Checkpoint<T>& negative0,
                             const std::vector<ContrastTriple>& data, const TrainConfig& cfg,
                             const std::vector<McqItem>& mcq_eval, const RoundIO& io = {}) {
    cfg.validate();
    if (!needs_guidance(cfg.kind)) {
        throw ConfigError("iterative training needs a guided loss kind, got " + std::string(loss_kind_name(cfg.kind)));
    }
    require_same_architecture(base.config, positive0.config(), "positive guidance checkpoint");
    require_same_architecture(base.config, negative0.config(), "negative guidance checkpoint");

    ModelWeights<T> positive = positive0.merged();
    const ModelWeights<T> negative = negative0.merged();
    IterResult<T> out;
    out.negative_fingerprint_start = negative.config.fingerprint();
    IterState<T> st = make_state(base, data.size(), cfg, "iter");
    for (int i = 0; i < cfg.rounds; ++i) {
        const GuidanceSet<T> guide{&positive, &negative, i};
        RoundIO rio = io;
        rio.role = Role::finetuned;
        rio.select_lowest = false;
        RoundResult<T> r = train_round(st, data, guide, cfg, mcq_eval, rio);
        positive = r.best_model.merged();
        out.best_so_far.push_back(st.best_score);
        out.rounds.push_back(std::move(r.summary));
    }
    out.negative_fingerprint_end = negative.config.fingerprint();
    out.final_model = st.model;
    out.best_model = *st.best;
    out.history = st.history;
    return out;
}

// Pure-MG sweep ------------------------------------------------------------------------------

struct SweepEntry {
    double alpha = 0.0, beta = 0.0;
    RoundSummary summary;
};

inline std::string sweep_file_name(double alpha, double beta) {
    return "pure_mg_a" + fmt_real(alpha) + "_b" + fmt_real(beta) + ".csv";
}

// One single-round PURE_MG run per (alpha, beta); every run starts from the
// same adapter initialization and batch order.
template <typename T>
std::vector<SweepEntry> sweep_pure_mg(const ModelWeights<T>& base, const GuidanceSet<T>& guide,
                                      const std::vector<ContrastTriple>& data, const std::vector<double>& alphas,
                                      const std::vector<double>& betas, const TrainConfig& user_cfg,
                                      const std::vector<McqItem>& mcq_eval,
                                      const std::optional<std::filesystem::path>& history_dir = std::nullopt,
                                      const LogFn& log = {}) {
    if (alphas.empty() || betas.empty()) throw ConfigError("sweep grids must be non-empty");
    std::vector<SweepEntry> out;
    for (const double a : alphas) {
        for (const double b : betas) {
            TrainConfig cfg = user_cfg;
            cfg.kind = LossKind::pure_mg;
            cfg.weights = {a, b};
            cfg.validate();
            IterState<T> st = make_state(base, data.size(), cfg, "sweep");
            RoundIO io;
            io.log = log;
            RoundResult<T> r = train_round(st, data, guide, cfg, mcq_eval, io);
            if (history_dir) write_text_file(*history_dir / sweep_file_name(a, b), history_csv(r.summary.history, false));
            out.push_back(SweepEntry{a, b, std::move(r.summary)});
        }
    }
    return out;
}

// Foundation pretraining ---------------------------------------------------------------------

struct BasePretrainConfig {
    int steps = 3000;
    int batch_size = 16;
    double learning_rate = 3e-3;
    std::uint64_t seed = 0;
    FoundationMix mix{};
    int log_every = 250;

    void validate() const {
        if (steps <= 0) throw ConfigError("base pretraining steps must be positive");
        if (batch_size < 1) throw ConfigError("base pretraining batch size must be >= 1");
        if (!(learning_rate > 0.0)) throw ConfigError("base pretraining learning rate must be positive");
    }
};

// Next-token training of every base tensor on the foundation corpus.
template <typename T>
ModelWeights<T> pretrain_base(const TransformerConfig& mcfg, const FactWorld& world, const Templates& templates,
                              const BasePretrainConfig& cfg, const LogFn& log = {}) {
    cfg.validate();
    ModelWeights<T> w = init_model<T>(mcfg, derive_seed(cfg.seed, "init"));
    Rng data_rng(derive_seed(cfg.seed, "foundation"));
    AdamWState st;
    const AdamWConfig opt{cfg.learning_rate};
    double running = 0.0;
    int consecutive = 0;
    for (int s = 1; s <= cfg.steps; ++s) {
        std::vector<LmSample> batch;
        for (int b = 0; b < cfg.batch_size; ++b) batch.push_back(foundation_sample(world, templates, data_rng, cfg.mix));
        struct Slot {
            double loss = 0.0;
            std::vector<Array<T>> grads;
            bool ok = false;
        };
        std::vector<Slot> slots(batch.size());
        parallel_for(batch.size(), [&](std::size_t i) {
            try {
                Graph<T> g;
                const BoundModel m = bind_model(g, w, Binding::parameter);
                const auto& smp = batch[i];
                const std::size_t n = smp.tokens.size();
                const ForwardOut f = forward(g, m, smp.tokens, TokenSpan{n - 1, n}, true);
                const Var loss = g.cross_entropy(*f.logits, smp.targets);
                auto gm = g.backward(loss);
                for (const Var v : m.weight_vars) slots[i].grads.push_back(std::move(gm.at(v.id)));
                slots[i].loss = double(g.value(loss).item());
                slots[i].ok = std::isfinite(slots[i].loss);
            } catch (const NumericError&) {
                slots[i].ok = false;
            }
        });
        bool ok = true;
        for (const auto& sl : slots) ok = ok && sl.ok;
        if (ok) {
            std::vector<Array<T>> total = std::move(slots[0].grads);
            double loss = slots[0].loss;
            for (std::size_t i = 1; i < slots.size(); ++i) {
                loss += slots[i].loss;
                for (std::size_t k = 0; k < total.size(); ++k) {
                    T* dst = total[k].data();
                    const T* src = slots[i].grads[k].data();
                    for (std::size_t e = 0; e < total[k].size(); ++e) dst[e] += src[e];
                }
            }
            const T inv = T(1) / T(batch.size());
            for (auto& a : total)
                for (auto& v : a.storage()) v *= inv;
            std::vector<Array<T>*> params;
            for (auto& [n, a] : w.tensors()) params.push_back(a);
            ok = adamw_step(params, total, st, opt) == StepResult::applied;
            running += loss / double(batch.size());
        }
        consecutive = ok ? 0 : consecutive + 1;
        if (consecutive >= kMaxConsecutiveSkips) {
            throw NumericError("base pretraining aborted after " + std::to_string(kMaxConsecutiveSkips) +
                               " consecutive non-finite steps");
        }
        if (log && cfg.log_every > 0 && s % cfg.log_every == 0) {
            log("base step " + std::to_string(s) + " lm_loss " + fmt_real(running / cfg.log_every));
            running = 0.0;
        }
    }
    return w;
}

}  // namespace repsteer
