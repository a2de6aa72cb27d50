#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "repsteer/autodiff.hpp"
#include "repsteer/errors.hpp"
#include "repsteer/rng.hpp"
#include "repsteer/tensor.hpp"
#include "repsteer/tokenizer.hpp"

namespace repsteer {

// Toy decoder-only transformer --------------------------------------------

struct TransformerConfig {
    int vocab_size = kByteVocab;
    int d_model = 64;
    int n_layers = 8;
    int n_heads = 4;
    int d_ff = 256;
    int max_seq = 192;
    std::vector<int> target_layers{3, 4, 5, 6};
    bool normalize_reps = true;

    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (vocab_size <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 || max_seq <= 0) {
            throw ConfigError("transformer config: all sizes must be positive");
        }
        if (d_model % n_heads != 0) {
            throw ConfigError("transformer config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                              std::to_string(n_heads));
        }
        if (target_layers.empty()) throw ConfigError("transformer config: target_layers is empty");
        for (std::size_t i = 0; i < target_layers.size(); ++i) {
            if (target_layers[i] < 0 || target_layers[i] >= n_layers) {
                throw ConfigError("transformer config: target layer " + std::to_string(target_layers[i]) +
                                  " outside [0," + std::to_string(n_layers) + ")");
            }
            if (i > 0 && target_layers[i] <= target_layers[i - 1]) {
                throw ConfigError("transformer config: target_layers must be strictly increasing");
            }
        }
    }

    // Hash of the fields that determine tensor shapes. Capture settings
    // (target_layers, normalize_reps) do not enter.
    std::string fingerprint() const {
        const std::string canon = "vocab=" + std::to_string(vocab_size) + ";d_model=" + std::to_string(d_model) +
                                  ";n_layers=" + std::to_string(n_layers) + ";n_heads=" + std::to_string(n_heads) +
                                  ";d_ff=" + std::to_string(d_ff) + ";max_seq=" + std::to_string(max_seq);
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canon)));
        return buf;
    }

    friend bool operator==(const TransformerConfig&, const TransformerConfig&) = default;
};

inline void to_json(nlohmann::json& j, const TransformerConfig& c) {
    j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},         {"n_layers", c.n_layers},
                       {"n_heads", c.n_heads},       {"d_ff", c.d_ff},               {"max_seq", c.max_seq},
                       {"target_layers", c.target_layers}, {"normalize_reps", c.normalize_reps}};
}

inline void from_json(const nlohmann::json& j, TransformerConfig& c) {
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("d_model").get_to(c.d_model);
    j.at("n_layers").get_to(c.n_layers);
    j.at("n_heads").get_to(c.n_heads);
    j.at("d_ff").get_to(c.d_ff);
    j.at("max_seq").get_to(c.max_seq);
    j.at("target_layers").get_to(c.target_layers);
    j.at("normalize_reps").get_to(c.normalize_reps);
}

// Projection weights are stored [d_out, d_in]; a linear map is x * W^T.
template <typename T>
struct LayerWeights {
    Array<T> ln1_g, ln1_b;
    Array<T> wq, wk, wv, wo;
    Array<T> ln2_g, ln2_b;
    Array<T> w1, b1, w2, b2;
};

template <typename T>
struct ModelWeights {
    TransformerConfig config;
    Array<T> tok_emb;  // [vocab, d]
    Array<T> pos_emb;  // [max_seq, d]
    std::vector<LayerWeights<T>> layers;
    Array<T> lnf_g, lnf_b;
    Array<T> w_out;  // [vocab, d]

    template <typename Self, typename Fn>
    static void visit(Self& self, Fn&& fn) {
        fn("tok_emb", self.tok_emb);
        fn("pos_emb", self.pos_emb);
        for (std::size_t l = 0; l < self.layers.size(); ++l) {
            auto& L = self.layers[l];
            const std::string p = "layer" + std::to_string(l) + ".";
            fn(p + "ln1_g", L.ln1_g);
            fn(p + "ln1_b", L.ln1_b);
            fn(p + "wq", L.wq);
            fn(p + "wk", L.wk);
            fn(p + "wv", L.wv);
            fn(p + "wo", L.wo);
            fn(p + "ln2_g", L.ln2_g);
            fn(p + "ln2_b", L.ln2_b);
            fn(p + "w1", L.w1);
            fn(p + "b1", L.b1);
            fn(p + "w2", L.w2);
            fn(p + "b2", L.b2);
        }
        fn("lnf_g", self.lnf_g);
        fn("lnf_b", self.lnf_b);
        fn("w_out", self.w_out);
    }

    // Every tensor with a stable name, in a fixed order.
    std::vector<std::pair<std::string, Array<T>*>> tensors() {
        std::vector<std::pair<std::string, Array<T>*>> out;
        visit(*this, [&](const std::string& n, Array<T>& a) { out.emplace_back(n, &a); });
        return out;
    }
    std::vector<std::pair<std::string, const Array<T>*>> tensors() const {
        std::vector<std::pair<std::string, const Array<T>*>> out;
        visit(*this, [&](const std::string& n, const Array<T>& a) { out.emplace_back(n, &a); });
        return out;
    }

    template <typename U>
    ModelWeights<U> cast() const {
        ModelWeights<U> out;
        out.config = config;
        out.layers.resize(layers.size());
        auto dst = out.tensors();
        auto src = tensors();
        for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<U>();
        return out;
    }

    friend bool operator==(const ModelWeights& a, const ModelWeights& b) {
        if (!(a.config == b.config) || a.layers.size() != b.layers.size()) return false;
        const auto ta = a.tensors();
        const auto tb = b.tensors();
        for (std::size_t i = 0; i < ta.size(); ++i) {
            if (!(*ta[i].second == *tb[i].second)) return false;
        }
        return true;
    }
};

namespace detail {

template <typename T>
Array<T> normal_array(Shape shape, double stddev, std::uint64_t seed) {
    Array<T> a(std::move(shape));
    Rng rng(seed);
    for (auto& v : a.storage()) v = static_cast<T>(rng.normal() * stddev);
    return a;
}

}  // namespace detail

// Deterministic in (config, seed): each tensor draws from a sub-seed derived
// from its name.
template <typename T>
ModelWeights<T> init_model(const TransformerConfig& config, std::uint64_t seed) {
    config.validate();
    const auto d = static_cast<std::size_t>(config.d_model);
    const auto ff = static_cast<std::size_t>(config.d_ff);
    const auto v = static_cast<std::size_t>(config.vocab_size);
    const double proj_std = 1.0 / std::sqrt(double(d));
    const double resid_std = proj_std / std::sqrt(2.0 * config.n_layers);

    ModelWeights<T> w;
    w.config = config;
    w.layers.resize(static_cast<std::size_t>(config.n_layers));
    auto named = w.tensors();
    for (auto& [name, arr] : named) {
        const std::uint64_t s = derive_seed(seed, "init/" + name);
        auto ends_with = [&](std::string_view suf) {
            return name.size() >= suf.size() && name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
        };
        if (name == "tok_emb") *arr = detail::normal_array<T>({v, d}, 0.5, s);
        else if (name == "pos_emb") *arr = detail::normal_array<T>({static_cast<std::size_t>(config.max_seq), d}, 0.1, s);
        else if (name == "w_out") *arr = detail::normal_array<T>({v, d}, proj_std, s);
        else if (ends_with("_g")) *arr = Array<T>(Shape{d}, T{1});
        else if (ends_with("_b") || ends_with("b2")) *arr = Array<T>(Shape{d}, T{0});
        else if (ends_with("b1")) *arr = Array<T>(Shape{ff}, T{0});
        else if (ends_with("wq") || ends_with("wk") || ends_with("wv")) *arr = detail::normal_array<T>({d, d}, proj_std, s);
        else if (ends_with("wo")) *arr = detail::normal_array<T>({d, d}, resid_std, s);
        else if (ends_with("w1")) *arr = detail::normal_array<T>({ff, d}, proj_std, s);
        else if (ends_with("w2")) *arr = detail::normal_array<T>({d, ff}, resid_std / 2.0, s);
        else throw Error("init_model: unhandled tensor " + name);
    }
    return w;
}

// LoRA adapters -----------------------------------------------------------

enum class Proj : std::uint8_t { q = 0, k = 1, v = 2, o = 3 };
inline constexpr std::array<const char*, 4> kProjNames{"q", "k", "v", "o"};

struct LoraSpec {
    int rank = 8;
    double scale = 2.0;  // lora_alpha / rank with lora_alpha = 16
    std::array<bool, 4> targets{true, false, true, false};

    friend bool operator==(const LoraSpec&, const LoraSpec&) = default;
};

inline void to_json(nlohmann::json& j, const LoraSpec& s) {
    std::vector<std::string> t;
    for (std::size_t p = 0; p < 4; ++p)
        if (s.targets[p]) t.emplace_back(kProjNames[p]);
    j = nlohmann::json{{"rank", s.rank}, {"scale", s.scale}, {"targets", t}};
}

inline void from_json(const nlohmann::json& j, LoraSpec& s) {
    j.at("rank").get_to(s.rank);
    j.at("scale").get_to(s.scale);
    s.targets = {false, false, false, false};
    for (const auto& name : j.at("targets")) {
        const auto it = std::find(kProjNames.begin(), kProjNames.end(), name.get<std::string>());
        if (it == kProjNames.end()) throw CheckpointError("unknown LoRA target " + name.get<std::string>());
        s.targets[static_cast<std::size_t>(it - kProjNames.begin())] = true;
    }
}

template <typename T>
struct LoraPair {
    Array<T> a;  // [rank, d_in]
    Array<T> b;  // [d_out, rank]
};

// Effective weight of an adapted projection: W + scale * B * A.
template <typename T>
struct LoraAdapter {
    LoraSpec spec;
    std::vector<std::array<std::optional<LoraPair<T>>, 4>> layers;

    std::vector<std::pair<std::string, Array<T>*>> tensors() {
        std::vector<std::pair<std::string, Array<T>*>> out;
        for (std::size_t l = 0; l < layers.size(); ++l)
            for (std::size_t p = 0; p < 4; ++p)
                if (layers[l][p]) {
                    const std::string base = "lora.layer" + std::to_string(l) + "." + kProjNames[p];
                    out.emplace_back(base + ".A", &layers[l][p]->a);
                    out.emplace_back(base + ".B", &layers[l][p]->b);
                }
        return out;
    }
    std::vector<std::pair<std::string, const Array<T>*>> tensors() const {
        std::vector<std::pair<std::string, const Array<T>*>> out;
        for (auto& [n, p] : const_cast<LoraAdapter*>(this)->tensors()) out.emplace_back(n, p);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, a] : tensors()) n += a->size();
        return n;
    }

    template <typename U>
    LoraAdapter<U> cast() const {
        LoraAdapter<U> out;
        out.spec = spec;
        out.layers.resize(layers.size());
        for (std::size_t l = 0; l < layers.size(); ++l)
            for (std::size_t p = 0; p < 4; ++p)
                if (layers[l][p]) out.layers[l][p] = LoraPair<U>{layers[l][p]->a.template cast<U>(), layers[l][p]->b.template cast<U>()};
        return out;
    }

    friend bool operator==(const LoraAdapter& x, const LoraAdapter& y) {
        if (!(x.spec == y.spec) || x.layers.size() != y.layers.size()) return false;
        const auto tx = x.tensors();
        const auto ty = y.tensors();
        if (tx.size() != ty.size()) return false;
        for (std::size_t i = 0; i < tx.size(); ++i)
            if (tx[i].first != ty[i].first || !(*tx[i].second == *ty[i].second)) return false;
        return true;
    }
};

// Fresh adapter: A ~ N(0, 1/d_in), B = 0, so the adapted model starts out
// identical to the base.
template <typename T>
LoraAdapter<T> init_lora(const TransformerConfig& config, const LoraSpec& spec, std::uint64_t seed) {
    config.validate();
    if (spec.rank <= 0) throw ConfigError("LoRA rank must be positive");
    const auto d = static_cast<std::size_t>(config.d_model);
    const auto r = static_cast<std::size_t>(spec.rank);
    LoraAdapter<T> ad;
    ad.spec = spec;
    ad.layers.resize(static_cast<std::size_t>(config.n_layers));
    for (std::size_t l = 0; l < ad.layers.size(); ++l)
        for (std::size_t p = 0; p < 4; ++p)
            if (spec.targets[p]) {
                const auto s = derive_seed(seed, "lora/" + std::to_string(l) + "/" + kProjNames[p]);
                ad.layers[l][p] = LoraPair<T>{detail::normal_array<T>({r, d}, 1.0 / std::sqrt(double(d)), s),
                                              Array<T>(Shape{d, r})};
            }
    return ad;
}

template <typename T>
void check_adapter_shapes(const ModelWeights<T>& w, const LoraAdapter<T>& ad) {
    if (ad.layers.size() != w.layers.size()) {
        throw ShapeError("adapter has " + std::to_string(ad.layers.size()) + " layers, model has " +
                         std::to_string(w.layers.size()));
    }
    const auto d = static_cast<std::size_t>(w.config.d_model);
    const auto r = static_cast<std::size_t>(ad.spec.rank);
    for (std::size_t l = 0; l < ad.layers.size(); ++l)
        for (std::size_t p = 0; p < 4; ++p)
            if (ad.layers[l][p]) {
                if (ad.layers[l][p]->a.shape() != Shape{r, d} || ad.layers[l][p]->b.shape() != Shape{d, r}) {
                    throw ShapeError("adapter layer " + std::to_string(l) + "." + kProjNames[p] + " shape mismatch");
                }
            }
}

template <typename T>
Array<T>& projection(LayerWeights<T>& L, Proj p) {
    switch (p) {
        case Proj::q: return L.wq;
        case Proj::k: return L.wk;
        case Proj::v: return L.wv;
        case Proj::o: return L.wo;
    }
    return L.wq;
}

// Folds scale * B * A into the base projections.
template <typename T>
ModelWeights<T> merge_adapter(const ModelWeights<T>& weights, const LoraAdapter<T>& adapter) {
    check_adapter_shapes(weights, adapter);
    ModelWeights<T> out = weights;
    const T s = static_cast<T>(adapter.spec.scale);
    for (std::size_t l = 0; l < adapter.layers.size(); ++l)
        for (std::size_t p = 0; p < 4; ++p)
            if (adapter.layers[l][p]) {
                Array<T>& w = projection(out.layers[l], static_cast<Proj>(p));
                const auto& pair = *adapter.layers[l][p];
                detail::mat(w).noalias() += s * (detail::mat(pair.b) * detail::mat(pair.a));
            }
    return out;
}

// Representation capture ----------------------------------------------------

struct TokenSpan {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t size() const { return end - begin; }
    friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

// Graph handles for the hidden states of one forward at the target layers,
// restricted to the response span.
struct RepHandles {
    std::vector<int> layers;
    std::size_t response_len = 0;
    std::vector<Var> states;  // one [response_len, d_model] node per layer
};

// Materialized representation bundle.
template <typename T>
struct RepBundle {
    std::vector<int> layers;
    std::size_t response_len = 0;
    std::vector<Array<T>> states;

    friend bool operator==(const RepBundle&, const RepBundle&) = default;
};

template <typename T>
RepBundle<T> materialize(const Graph<T>& g, const RepHandles& h) {
    RepBundle<T> b{h.layers, h.response_len, {}};
    for (const Var v : h.states) b.states.push_back(g.value(v));
    return b;
}

// Adds a bundle to the graph as constants (no gradient).
template <typename T>
RepHandles as_constant(Graph<T>& g, const RepBundle<T>& b) {
    RepHandles h{b.layers, b.response_len, {}};
    for (const auto& s : b.states) h.states.push_back(g.constant(s));
    return h;
}

// Binding weights into a graph ---------------------------------------------

enum class Binding : std::uint8_t { constant, parameter };

struct BoundLayer {
    Var ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
    std::array<std::optional<std::pair<Var, Var>>, 4> lora;  // (A, B)
};

struct BoundModel {
    TransformerConfig config;
    Var tok_emb, pos_emb;
    std::vector<BoundLayer> layers;
    Var lnf_g, lnf_b, w_out;
    double lora_scale = 0.0;
    std::vector<Var> weight_vars;   // same order as ModelWeights::tensors()
    std::vector<Var> adapter_vars;  // same order as LoraAdapter::tensors()
};

// Wires already-created graph nodes into a BoundModel. `weight_vars` follows
// ModelWeights::tensors() order and `adapter_vars` LoraAdapter::tensors() order.
inline BoundModel assemble_bound(const TransformerConfig& config, std::vector<Var> weight_vars,
                                 const std::vector<std::array<bool, 4>>& adapted, double lora_scale,
                                 std::vector<Var> adapter_vars) {
    BoundModel m;
    m.config = config;
    m.weight_vars = std::move(weight_vars);
    m.adapter_vars = std::move(adapter_vars);
    const std::size_t expected = 5 + 12 * static_cast<std::size_t>(config.n_layers);
    if (m.weight_vars.size() != expected) {
        throw ShapeError("assemble_bound: expected " + std::to_string(expected) + " weight nodes, got " +
                         std::to_string(m.weight_vars.size()));
    }
    std::size_t k = 0;
    m.tok_emb = m.weight_vars[k++];
    m.pos_emb = m.weight_vars[k++];
    m.layers.resize(static_cast<std::size_t>(config.n_layers));
    for (auto& L : m.layers) {
        L.ln1_g = m.weight_vars[k++];
        L.ln1_b = m.weight_vars[k++];
        L.wq = m.weight_vars[k++];
        L.wk = m.weight_vars[k++];
        L.wv = m.weight_vars[k++];
        L.wo = m.weight_vars[k++];
        L.ln2_g = m.weight_vars[k++];
        L.ln2_b = m.weight_vars[k++];
        L.w1 = m.weight_vars[k++];
        L.b1 = m.weight_vars[k++];
        L.w2 = m.weight_vars[k++];
        L.b2 = m.weight_vars[k++];
    }
    m.lnf_g = m.weight_vars[k++];
    m.lnf_b = m.weight_vars[k++];
    m.w_out = m.weight_vars[k++];
    m.lora_scale = lora_scale;
    std::size_t a = 0;
    for (std::size_t l = 0; l < adapted.size() && l < m.layers.size(); ++l)
        for (std::size_t p = 0; p < 4; ++p)
            if (adapted[l][p]) {
                if (a + 2 > m.adapter_vars.size()) throw ShapeError("assemble_bound: too few adapter nodes");
                m.layers[l].lora[p] = std::make_pair(m.adapter_vars[a], m.adapter_vars[a + 1]);
                a += 2;
            }
    if (a != m.adapter_vars.size()) throw ShapeError("assemble_bound: too many adapter nodes");
    return m;
}

template <typename T>
std::vector<std::array<bool, 4>> adapted_slots(const LoraAdapter<T>& ad) {
    std::vector<std::array<bool, 4>> out(ad.layers.size());
    for (std::size_t l = 0; l < ad.layers.size(); ++l)
        for (std::size_t p = 0; p < 4; ++p) out[l][p] = ad.layers[l][p].has_value();
    return out;
}

template <typename T>
BoundModel bind_model(Graph<T>& g, const ModelWeights<T>& w, Binding weights_as, const LoraAdapter<T>* adapter = nullptr,
                      Binding adapter_as = Binding::parameter) {
    auto put = [&g](const Array<T>& a, Binding b) { return b == Binding::parameter ? g.parameter_ref(a) : g.constant_ref(a); };
    std::vector<Var> wv, av;
    for (const auto& [name, arr] : w.tensors()) wv.push_back(put(*arr, weights_as));
    if (!adapter) return assemble_bound(w.config, std::move(wv), {}, 0.0, {});
    check_adapter_shapes(w, *adapter);
    for (const auto& [name, arr] : adapter->tensors()) av.push_back(put(*arr, adapter_as));
    return assemble_bound(w.config, std::move(wv), adapted_slots(*adapter), adapter->spec.scale, std::move(av));
}

// Forward -------------------------------------------------------------------

struct ForwardOut {
    std::optional<Var> logits;  // [seq, vocab], absent when stopped early
    RepHandles reps;
};

namespace detail {

template <typename T>
Var linear(Graph<T>& g, const BoundModel& m, Var x, Var w, const BoundLayer& L, Proj p) {
    Var y = g.matmul_nt(x, w);
    if (const auto& lo = L.lora[static_cast<std::size_t>(p)]) {
        const Var low = g.matmul_nt(g.matmul_nt(x, lo->first), lo->second);
        y = g.add(y, g.scale(low, static_cast<T>(m.lora_scale)));
    }
    return y;
}

}  // namespace detail

// Runs the model over `tokens`, capturing post-block residual states at every
// target layer for the positions in `span`. With `want_logits == false` the
// forward stops after the last target layer.
template <typename T>
ForwardOut forward(Graph<T>& g, const BoundModel& m, std::span<const int> tokens, TokenSpan span,
                   bool want_logits = true) {
    const auto& cfg = m.config;
    const std::size_t n = tokens.size();
    if (n == 0) throw DataError("forward: empty token sequence");
    if (n > static_cast<std::size_t>(cfg.max_seq)) {
        throw DataError("forward: sequence length " + std::to_string(n) + " exceeds max_seq " + std::to_string(cfg.max_seq));
    }
    if (span.begin >= span.end || span.end > n) {
        throw DataError("forward: invalid response span [" + std::to_string(span.begin) + "," + std::to_string(span.end) + ")");
    }
    const std::size_t dh = static_cast<std::size_t>(cfg.head_dim());
    const T att_scale = T(1) / std::sqrt(T(dh));

    Var x = g.add(g.gather_rows(m.tok_emb, tokens), g.slice_rows(m.pos_emb, 0, n));

    ForwardOut out;
    out.reps.layers = cfg.target_layers;
    out.reps.response_len = span.size();
    const int last_target = cfg.target_layers.back();
    std::size_t next_target = 0;

    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        const BoundLayer& L = m.layers[l];
        const Var h = g.layernorm(x, L.ln1_g, L.ln1_b);
        const Var q = detail::linear(g, m, h, L.wq, L, Proj::q);
        const Var k = detail::linear(g, m, h, L.wk, L, Proj::k);
        const Var v = detail::linear(g, m, h, L.wv, L, Proj::v);
        std::vector<Var> heads;
        heads.reserve(static_cast<std::size_t>(cfg.n_heads));
        for (std::size_t hd = 0; hd < static_cast<std::size_t>(cfg.n_heads); ++hd) {
            const Var qh = g.slice_cols(q, hd * dh, (hd + 1) * dh);
            const Var kh = g.slice_cols(k, hd * dh, (hd + 1) * dh);
            const Var vh = g.slice_cols(v, hd * dh, (hd + 1) * dh);
            const Var p = g.softmax_rows(g.scale(g.matmul_nt(qh, kh), att_scale), /*causal=*/true);
            heads.push_back(g.matmul(p, vh));
        }
        const Var att = heads.size() == 1 ? heads[0] : g.concat_cols(heads);
        x = g.add(x, detail::linear(g, m, att, L.wo, L, Proj::o));

        const Var h2 = g.layernorm(x, L.ln2_g, L.ln2_b);
        const Var mid = g.gelu(g.add_rowvec(g.matmul_nt(h2, L.w1), L.b1));
        x = g.add(x, g.add_rowvec(g.matmul_nt(mid, L.w2), L.b2));

        if (next_target < cfg.target_layers.size() && cfg.target_layers[next_target] == static_cast<int>(l)) {
            Var rep = g.slice_rows(x, span.begin, span.end);
            if (cfg.normalize_reps) rep = g.normalize_rows(rep);
            out.reps.states.push_back(rep);
            ++next_target;
        }
        if (!want_logits && static_cast<int>(l) == last_target) return out;
    }
    const Var xf = g.layernorm(x, m.lnf_g, m.lnf_b);
    out.logits = g.matmul_nt(xf, m.w_out);
    return out;
}

// Convenience: no-gradient forward returning materialized logits and reps.
template <typename T>
std::pair<Array<T>, RepBundle<T>> run_forward(const ModelWeights<T>& w, const LoraAdapter<T>* adapter,
                                              std::span<const int> tokens, TokenSpan span) {
    Graph<T> g;
    const BoundModel m = bind_model(g, w, Binding::constant, adapter, Binding::constant);
    const ForwardOut f = forward(g, m, tokens, span, true);
    return {g.value(*f.logits), materialize(g, f.reps)};
}

template <typename T>
RepBundle<T> run_reps(const ModelWeights<T>& w, const LoraAdapter<T>* adapter, std::span<const int> tokens,
                      TokenSpan span) {
    Graph<T> g;
    const BoundModel m = bind_model(g, w, Binding::constant, adapter, Binding::constant);
    const ForwardOut f = forward(g, m, tokens, span, false);
    return materialize(g, f.reps);
}

// Log-probabilities -----------------------------------------------------------

template <typename T>
double log_softmax_at(const Array<T>& logits, std::size_t row, std::size_t col) {
    const std::size_t n = logits.cols();
    const T* r = logits.data() + row * n;
    double mx = r[0];
    for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, double(r[c]));
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += std::exp(double(r[c]) - mx);
    return double(r[col]) - mx - std::log(z);
}

// Teacher-forced sum of log p(completion_j | prompt, completion_<j).
template <typename T>
double completion_logprob(const ModelWeights<T>& w, const LoraAdapter<T>* adapter, std::span<const int> prompt,
                          std::span<const int> completion) {
    if (prompt.empty()) throw DataError("completion_logprob: empty prompt");
    if (completion.empty()) throw DataError("completion_logprob: empty completion");
    const std::size_t total = prompt.size() + completion.size();
    if (total > static_cast<std::size_t>(w.config.max_seq)) {
        throw DataError("completion_logprob: length " + std::to_string(total) + " exceeds max_seq");
    }
    std::vector<int> seq(prompt.begin(), prompt.end());
    seq.insert(seq.end(), completion.begin(), completion.end());
    // Capture span is irrelevant here; use the last position.
    const auto [logits, reps] = run_forward(w, adapter, seq, TokenSpan{total - 1, total});
    double lp = 0.0;
    for (std::size_t j = 0; j < completion.size(); ++j) {
        lp += log_softmax_at(logits, prompt.size() + j - 1, static_cast<std::size_t>(completion[j]));
    }
    return lp;
}

// Argmax decoding; ties go to the lowest token id. Stops after `max_new`
// tokens or when EOS is produced (EOS is not included in the result).
template <typename T>
std::vector<int> greedy_generate(const ModelWeights<T>& w, const LoraAdapter<T>* adapter, std::span<const int> prompt,
                                 std::size_t max_new, int eos = kEosToken) {
    if (prompt.empty()) throw DataError("greedy_generate: empty prompt");
    if (prompt.size() + max_new > static_cast<std::size_t>(w.config.max_seq)) {
        throw DataError("greedy_generate: prompt + max_new exceeds max_seq");
    }
    std::vector<int> seq(prompt.begin(), prompt.end());
    std::vector<int> out;
    for (std::size_t step = 0; step < max_new; ++step) {
        const auto [logits, reps] = run_forward(w, adapter, seq, TokenSpan{seq.size() - 1, seq.size()});
        const std::size_t row = seq.size() - 1;
        const std::size_t n = logits.cols();
        std::size_t best = 0;
        for (std::size_t c = 1; c < n; ++c)
            if (logits.at(row, c) > logits.at(row, best)) best = c;
        const int tok = static_cast<int>(best);
        if (tok == eos) break;
        out.push_back(tok);
        seq.push_back(tok);
    }
    return out;
}

}  // namespace repsteer
