#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "repsteer/errors.hpp"
#include "repsteer/tensor.hpp"

namespace repsteer {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Moments are kept in double regardless of the parameter type.
struct AdamWState {
    std::uint64_t t = 0;
    std::uint64_t skipped = 0;
    std::vector<std::vector<double>> m, v;
};

enum class StepResult : std::uint8_t { applied, skipped_nonfinite };

template <typename T>
StepResult adamw_step(const std::vector<Array<T>*>& params, const std::vector<Array<T>>& grads, AdamWState& st,
                      const AdamWConfig& cfg) {
    if (params.size() != grads.size()) {
        throw ShapeError("adamw_step: " + std::to_string(params.size()) + " params but " + std::to_string(grads.size()) +
                         " gradients");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->shape() != grads[i].shape()) {
            throw ShapeError("adamw_step: param " + std::to_string(i) + " has shape " + shape_str(params[i]->shape()) +
                             ", gradient " + shape_str(grads[i].shape()));
        }
    }
    for (const auto& g : grads) {
        if (!g.all_finite()) {
            ++st.skipped;
            return StepResult::skipped_nonfinite;
        }
    }
    if (st.m.empty()) {
        st.m.resize(params.size());
        st.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            st.m[i].assign(params[i]->size(), 0.0);
            st.v[i].assign(params[i]->size(), 0.0);
        }
    }
    ++st.t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(st.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(st.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        T* p = params[i]->data();
        const T* g = grads[i].data();
        auto& m = st.m[i];
        auto& v = st.v[i];
        for (std::size_t k = 0; k < m.size(); ++k) {
            const double gk = g[k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            const double mh = m[k] / bc1;
            const double vh = v[k] / bc2;
            double pk = double(p[k]);
            pk -= cfg.lr * (mh / (std::sqrt(vh) + cfg.eps) + cfg.weight_decay * pk);
            p[k] = static_cast<T>(pk);
        }
    }
    return StepResult::applied;
}

}  // namespace repsteer
