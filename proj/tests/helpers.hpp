#pragma once

#include "lipsync/nn/ops.hpp"
#include "lipsync/nn/rng.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace testutil {

// Central finite-difference gradient check against the engine's backward.
// `f` rebuilds the whole scalar loss from a fresh graph + input tensor so a
// perturbed input re-runs the full forward path.
struct FdReport {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    int worst_index = -1;
};

// Relative error is normalized by the max-norm of the two gradient vectors,
// not per component: at 32-bit, components near zero are dominated by
// roundoff in the central difference and carry no signal.
inline FdReport fd_check(const std::function<lipsync::nn::Tensor(lipsync::nn::Graph&, lipsync::nn::Tensor)>& f,
                         std::vector<float> x0, const lipsync::Shape& shape, float eps = 5e-3f) {
    using namespace lipsync::nn;
    // Analytic gradient.
    std::vector<float> analytic(x0.size());
    {
        Graph g(false, 1234);
        Tensor x = g.input(shape, x0.data(), /*needs_grad=*/true);
        Tensor loss = f(g, x);
        g.backward(loss);
        for (size_t i = 0; i < x0.size(); i++) analytic[i] = x.node()->grad.empty() ? 0.0f : x.node()->grad[i];
    }
    std::vector<double> fd(x0.size());
    double scale = 0.0;
    for (size_t i = 0; i < x0.size(); i++) {
        std::vector<float> xp = x0, xm = x0;
        xp[i] += eps;
        xm[i] -= eps;
        Graph gp(false, 1234), gm(false, 1234);
        const double lp = f(gp, gp.input(shape, xp.data(), true)).item();
        const double lm = f(gm, gm.input(shape, xm.data(), true)).item();
        fd[i] = (lp - lm) / (2.0 * static_cast<double>(eps));
        scale = std::max({scale, std::fabs(fd[i]), std::fabs(static_cast<double>(analytic[i]))});
    }
    FdReport rep;
    const double denom = std::max(scale, 1e-6);
    for (size_t i = 0; i < x0.size(); i++) {
        const double abs_err = std::fabs(fd[i] - analytic[i]);
        const double rel = abs_err / denom;
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_index = static_cast<int>(i);
        }
        rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
    }
    return rep;
}

// Central finite differences over a parameter's entries (first max_dims).
// loss() must rebuild the forward pass from current parameter values; the
// analytic gradient is taken from Param::g after one backward+accumulate.
inline FdReport fd_check_param(const std::function<float(bool want_grad)>& loss_with_grad,
                               lipsync::nn::Param& p, int max_dims = 64, float eps = 1e-2f) {
    using namespace lipsync::nn;
    const int n = std::min<int>(max_dims, static_cast<int>(p.w.size()));
    p.zero_grad();
    loss_with_grad(true);
    std::vector<float> analytic(p.g.begin(), p.g.begin() + n);
    std::vector<double> fd(static_cast<size_t>(n));
    double scale = 0.0;
    for (int i = 0; i < n; i++) {
        const float keep = p.w[static_cast<size_t>(i)];
        p.w[static_cast<size_t>(i)] = keep + eps;
        const double lp = loss_with_grad(false);
        p.w[static_cast<size_t>(i)] = keep - eps;
        const double lm = loss_with_grad(false);
        p.w[static_cast<size_t>(i)] = keep;
        fd[static_cast<size_t>(i)] = (lp - lm) / (2.0 * static_cast<double>(eps));
        scale = std::max({scale, std::fabs(fd[static_cast<size_t>(i)]),
                          std::fabs(static_cast<double>(analytic[static_cast<size_t>(i)]))});
    }
    FdReport rep;
    const double denom = std::max(scale, 1e-6);
    for (int i = 0; i < n; i++) {
        const double abs_err = std::fabs(fd[static_cast<size_t>(i)] - analytic[static_cast<size_t>(i)]);
        if (abs_err / denom > rep.max_rel_err) {
            rep.max_rel_err = abs_err / denom;
            rep.worst_index = i;
        }
        rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
    }
    return rep;
}

// Kink-aware parameter FD for networks with piecewise-linear activations:
// central differences are only defined where the loss is C1, so coordinates
// whose +-eps evaluations flip any activation sign are excluded from the
// comparison. loss_fn(want_grad, signs) must append the sign pattern of every
// kinked pre-activation when `signs` is non-null.
struct KinkFdReport {
    double max_rel_err = 0.0;
    int checked = 0, skipped = 0;
};

inline KinkFdReport fd_check_param_kink_aware(
    const std::function<float(bool want_grad, std::vector<uint8_t>* signs)>& loss_fn,
    lipsync::nn::Param& p, int max_dims = 32, float eps = 3e-3f) {
    const int n = std::min<int>(max_dims, static_cast<int>(p.w.size()));
    p.zero_grad();
    loss_fn(true, nullptr);
    std::vector<float> analytic(p.g.begin(), p.g.begin() + n);

    std::vector<double> fd(static_cast<size_t>(n));
    std::vector<bool> valid(static_cast<size_t>(n));
    double scale = 0.0;
    for (int i = 0; i < n; i++) {
        const float keep = p.w[static_cast<size_t>(i)];
        std::vector<uint8_t> s_plus, s_minus;
        p.w[static_cast<size_t>(i)] = keep + eps;
        const double lp = loss_fn(false, &s_plus);
        p.w[static_cast<size_t>(i)] = keep - eps;
        const double lm = loss_fn(false, &s_minus);
        p.w[static_cast<size_t>(i)] = keep;
        valid[static_cast<size_t>(i)] = (s_plus == s_minus);
        fd[static_cast<size_t>(i)] = (lp - lm) / (2.0 * static_cast<double>(eps));
        if (valid[static_cast<size_t>(i)])
            scale = std::max({scale, std::fabs(fd[static_cast<size_t>(i)]),
                              std::fabs(static_cast<double>(analytic[static_cast<size_t>(i)]))});
    }
    KinkFdReport rep;
    const double denom = std::max(scale, 1e-6);
    for (int i = 0; i < n; i++) {
        if (!valid[static_cast<size_t>(i)]) {
            rep.skipped++;
            continue;
        }
        rep.checked++;
        rep.max_rel_err = std::max(
            rep.max_rel_err, std::fabs(fd[static_cast<size_t>(i)] - analytic[static_cast<size_t>(i)]) / denom);
    }
    return rep;
}

inline std::vector<float> random_vec(size_t n, lipsync::nn::Rng& rng, float lo = -1.0f, float hi = 1.0f) {
    std::vector<float> v(n);
    rng.fill_uniform(v.data(), static_cast<int64_t>(n), lo, hi);
    return v;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const size_t n = a.size();
    double ma = 0, mb = 0;
    for (size_t i = 0; i < n; i++) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double sab = 0, saa = 0, sbb = 0;
    for (size_t i = 0; i < n; i++) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

} // namespace testutil
