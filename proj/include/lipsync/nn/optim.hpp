#pragma once

#include "lipsync/nn/tensor.hpp"

namespace lipsync::nn {

struct Adam {
    float beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;
    int64_t t = 0;

    void step(const std::vector<Param*>& params, float lr);
    static void zero_grad(const std::vector<Param*>& params) {
        for (Param* p : params) p->zero_grad();
    }
};

// Inverse square root schedule with linear warmup:
//   lr(s) = base * min(s/warmup, sqrt(warmup/s)) for s >= 1.
inline float inverse_sqrt_lr(float base, int64_t step, int64_t warmup) {
    if (warmup < 1) warmup = 1;
    const double s = static_cast<double>(step < 1 ? 1 : step);
    const double w = static_cast<double>(warmup);
    const double f = s < w ? s / w : std::sqrt(w / s);
    return static_cast<float>(base * f);
}

// Global gradient-norm clip; returns the pre-clip norm.
float clip_grad_norm(const std::vector<Param*>& params, float max_norm);

} // namespace lipsync::nn
