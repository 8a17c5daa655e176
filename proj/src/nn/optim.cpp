#include "lipsync/nn/optim.hpp"

#include <cmath>

namespace lipsync::nn {

void Adam::step(const std::vector<Param*>& params, float lr) {
    t++;
    const double bc1 = 1.0 - std::pow(static_cast<double>(beta1), static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(static_cast<double>(beta2), static_cast<double>(t));
    for (Param* p : params) {
        if (!p->trainable) continue;
        if (p->adam_m.size() != p->w.size()) {
            p->adam_m.assign(p->w.size(), 0.0f);
            p->adam_v.assign(p->w.size(), 0.0f);
        }
        for (size_t i = 0; i < p->w.size(); i++) {
            const float g = p->g[i];
            p->adam_m[i] = beta1 * p->adam_m[i] + (1.0f - beta1) * g;
            p->adam_v[i] = beta2 * p->adam_v[i] + (1.0f - beta2) * g * g;
            const float mhat = static_cast<float>(p->adam_m[i] / bc1);
            const float vhat = static_cast<float>(p->adam_v[i] / bc2);
            p->w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

float clip_grad_norm(const std::vector<Param*>& params, float max_norm) {
    double total = 0;
    for (const Param* p : params)
        for (float g : p->g) total += static_cast<double>(g) * g;
    const float norm = static_cast<float>(std::sqrt(total));
    if (norm > max_norm && norm > 0) {
        const float s = max_norm / norm;
        for (Param* p : params)
            for (float& g : p->g) g *= s;
    }
    return norm;
}

} // namespace lipsync::nn
