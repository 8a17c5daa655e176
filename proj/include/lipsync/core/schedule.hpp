#pragma once

#include "lipsync/common.hpp"

#include <vector>

namespace lipsync {

// Variance schedule for the landmark noising process. alpha[t] = 1 - beta[t],
// alpha_bar[t] = prod_{s<=t} alpha[s].
struct DiffusionSchedule {
    int T = 0;
    std::vector<float> beta;
    std::vector<float> alpha;
    std::vector<float> alpha_bar;

    // True when the terminal marginal is effectively standard normal
    // (alpha_bar[T-1] < 1e-3). Training and ancestral sampling require it.
    bool well_mixed() const { return T > 0 && alpha_bar.back() < 1e-3f; }

    void validate() const;  // monotonicity + range checks
};

// Linearly spaced beta in [beta_start, beta_end]. T >= 2.
DiffusionSchedule make_schedule(int T, float beta_start, float beta_end);

// Defaults: desk schedule is short so ancestral sampling stays cheap; the
// standard T=1000 schedule is kept for full-scale configs.
DiffusionSchedule desk_schedule();   // T=40, beta 0.012 -> 0.36
DiffusionSchedule paper_schedule();  // T=1000, beta 1e-4 -> 0.02

} // namespace lipsync
