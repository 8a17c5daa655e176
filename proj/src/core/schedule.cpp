#include "lipsync/core/schedule.hpp"

namespace lipsync {

void DiffusionSchedule::validate() const {
    LS_CHECK(T >= 2, "DiffusionSchedule: T=%d, need at least 2 steps", T);
    LS_CHECK(static_cast<int>(alpha.size()) == T && static_cast<int>(alpha_bar.size()) == T &&
                 static_cast<int>(beta.size()) == T,
             "DiffusionSchedule: array sizes disagree with T=%d", T);
    for (int t = 0; t < T; t++) {
        LS_CHECK(alpha[static_cast<size_t>(t)] > 0.0f && alpha[static_cast<size_t>(t)] < 1.0f,
                 "DiffusionSchedule: alpha[%d]=%g outside (0,1)", t, alpha[static_cast<size_t>(t)]);
        if (t > 0)
            LS_CHECK(alpha_bar[static_cast<size_t>(t)] < alpha_bar[static_cast<size_t>(t - 1)],
                     "DiffusionSchedule: alpha_bar not strictly decreasing at t=%d", t);
    }
}

DiffusionSchedule make_schedule(int T, float beta_start, float beta_end) {
    LS_CHECK(T >= 2, "make_schedule: T=%d, need at least 2 steps", T);
    LS_CHECK(beta_start > 0.0f && beta_start <= beta_end && beta_end < 1.0f,
             "make_schedule: need 0 < beta_start <= beta_end < 1, got [%g, %g]", beta_start, beta_end);
    DiffusionSchedule s;
    s.T = T;
    s.beta.resize(static_cast<size_t>(T));
    s.alpha.resize(static_cast<size_t>(T));
    s.alpha_bar.resize(static_cast<size_t>(T));
    double bar = 1.0;
    for (int t = 0; t < T; t++) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(t) / (T - 1);
        const double b = static_cast<double>(beta_start) + frac * (beta_end - beta_start);
        s.beta[static_cast<size_t>(t)] = static_cast<float>(b);
        s.alpha[static_cast<size_t>(t)] = static_cast<float>(1.0 - b);
        bar *= 1.0 - b;
        s.alpha_bar[static_cast<size_t>(t)] = static_cast<float>(bar);
    }
    s.validate();
    return s;
}

DiffusionSchedule desk_schedule() { return make_schedule(40, 0.012f, 0.36f); }

DiffusionSchedule paper_schedule() { return make_schedule(1000, 1e-4f, 0.02f); }

} // namespace lipsync
