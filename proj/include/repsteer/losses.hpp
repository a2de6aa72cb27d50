#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "repsteer/autodiff.hpp"
#include "repsteer/errors.hpp"
#include "repsteer/model.hpp"

namespace repsteer {

enum class LossKind : std::uint8_t { cl_ct, gmp_negative, cl_mg, iter, pure_mg, lorra_only };

inline std::string_view loss_kind_name(LossKind k) {
    switch (k) {
        case LossKind::cl_ct: return "cl_ct";
        case LossKind::gmp_negative: return "gmp_negative";
        case LossKind::cl_mg: return "cl_mg";
        case LossKind::iter: return "iter";
        case LossKind::pure_mg: return "pure_mg";
        case LossKind::lorra_only: return "lorra_only";
    }
    return "?";
}

inline LossKind parse_loss_kind(std::string_view s) {
    for (const auto k : {LossKind::cl_ct, LossKind::gmp_negative, LossKind::cl_mg, LossKind::iter, LossKind::pure_mg,
                         LossKind::lorra_only}) {
        if (loss_kind_name(k) == s) return k;
    }
    throw ConfigError("unknown loss kind '" + std::string(s) + "'");
}

inline bool needs_guidance(LossKind k) { return k == LossKind::cl_mg || k == LossKind::iter || k == LossKind::pure_mg; }
// Whether the trainable model's forward on T (neutral) enters the loss.
inline bool uses_neutral(LossKind k) { return k != LossKind::lorra_only; }
// Whether the trainable model's forwards on T+ / T- enter the loss.
inline bool uses_templated(LossKind k) { return k != LossKind::pure_mg; }

struct LossWeights {
    double alpha = 10.0;
    double beta = 1.0;

    void validate() const {
        if (!(alpha >= 0.0) || !(beta >= 0.0)) {
            throw ConfigError("loss weights must be non-negative (alpha=" + std::to_string(alpha) +
                              ", beta=" + std::to_string(beta) + ")");
        }
    }
};

// Mean over (layer, response position) of the per-token Euclidean distance.
template <typename T>
Var rep_distance(Graph<T>& g, const RepHandles& a, const RepHandles& b) {
    if (a.layers != b.layers) throw ShapeError("rep_distance: target layer sets differ");
    if (a.response_len != b.response_len) {
        throw ShapeError("rep_distance: response lengths differ (" + std::to_string(a.response_len) + " vs " +
                         std::to_string(b.response_len) + ")");
    }
    if (a.states.empty() || a.states.size() != b.states.size()) throw ShapeError("rep_distance: empty bundle");
    std::optional<Var> total;
    for (std::size_t l = 0; l < a.states.size(); ++l) {
        const Var s = g.sum(g.row_norms(g.sub(a.states[l], b.states[l])));
        total = total ? g.add(*total, s) : s;
    }
    return g.scale(*total, T(1) / T(a.states.size() * a.response_len));
}

template <typename T>
T rep_distance(const RepBundle<T>& a, const RepBundle<T>& b) {
    Graph<T> g;
    return g.value(rep_distance(g, as_constant(g, a), as_constant(g, b))).item();
}

// LoRRA loss: distance between the positive- and negative-template representations.
template <typename T>
Var lorra_loss(Graph<T>& g, const RepHandles& model_out_pos, const RepHandles& model_out_neg) {
    return rep_distance(g, model_out_pos, model_out_neg);
}

// Inputs of one composite loss evaluation. `neutral`, `pos_t`, `neg_t` come
// from the trainable model's forwards on T, T+, T-; `guide_pos`/`guide_neg`
// from the frozen guidance models and are detached before use.
struct LossInputs {
    const RepHandles* neutral = nullptr;
    const RepHandles* pos_t = nullptr;
    const RepHandles* neg_t = nullptr;
    const RepHandles* guide_pos = nullptr;
    const RepHandles* guide_neg = nullptr;
};

namespace detail {

template <typename T>
RepHandles detached(Graph<T>& g, const RepHandles& h) {
    RepHandles out{h.layers, h.response_len, {}};
    for (const Var v : h.states) out.states.push_back(g.detach(v));
    return out;
}

inline const RepHandles& need(const RepHandles* h, LossKind k, std::string_view what) {
    if (!h) {
        throw ConfigError("loss " + std::string(loss_kind_name(k)) + " requires the " + std::string(what) + " bundle");
    }
    return *h;
}

}  // namespace detail

//   cl_ct        s*L_lorra + a*d(r, r+) - b*d(r, r-)
//   gmp_negative s*L_lorra - a*d(r, r+) + b*d(r, r-)
//   cl_mg, iter  s*L_lorra + a*d(r, g+) - b*d(r, g-)
//   pure_mg                 a*d(r, g+) - b*d(r, g-)
//   lorra_only   s*L_lorra
// where s is `lorra_sign` (+1 minimizes the LoRRA distance as written).
template <typename T>
Var composite_loss(Graph<T>& g, LossKind kind, const LossWeights& w, const LossInputs& in, double lorra_sign = 1.0) {
    w.validate();
    const T alpha = static_cast<T>(w.alpha);
    const T beta = static_cast<T>(w.beta);

    auto lorra = [&] {
        const Var l = lorra_loss(g, detail::need(in.pos_t, kind, "positive-template"),
                                 detail::need(in.neg_t, kind, "negative-template"));
        return lorra_sign == 1.0 ? l : g.scale(l, static_cast<T>(lorra_sign));
    };
    auto pair = [&](const RepHandles& toward, const RepHandles& away, T a, T b) {
        const RepHandles& r = detail::need(in.neutral, kind, "neutral");
        const Var dp = rep_distance(g, r, toward);
        const Var dn = rep_distance(g, r, away);
        return g.sub(g.scale(dp, a), g.scale(dn, b));
    };

    switch (kind) {
        case LossKind::lorra_only:
            return lorra();
        case LossKind::cl_ct:
            return g.add(lorra(), pair(detail::need(in.pos_t, kind, "positive-template"),
                                       detail::need(in.neg_t, kind, "negative-template"), alpha, beta));
        case LossKind::gmp_negative:
            return g.add(lorra(), pair(detail::need(in.neg_t, kind, "negative-template"),
                                       detail::need(in.pos_t, kind, "positive-template"), beta, alpha));
        case LossKind::cl_mg:
        case LossKind::iter:
        case LossKind::pure_mg: {
            const RepHandles gp = detail::detached(g, detail::need(in.guide_pos, kind, "positive guidance"));
            const RepHandles gn = detail::detached(g, detail::need(in.guide_neg, kind, "negative guidance"));
            const Var guided = pair(gp, gn, alpha, beta);
            return kind == LossKind::pure_mg ? guided : g.add(lorra(), guided);
        }
    }
    throw ConfigError("unhandled loss kind");
}

}  // namespace repsteer
