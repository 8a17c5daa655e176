#include "lipsync/nn/ops.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstring>
#include <memory>

namespace lipsync::nn {

using EMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

static Graph* same_graph(std::initializer_list<Tensor> ts) {
    Graph* g = nullptr;
    for (const Tensor& t : ts) {
        LS_CHECK(t.ok(), "op: empty tensor");
        if (!g) g = t.graph();
        LS_CHECK(g == t.graph(), "op: tensors from different graphs");
    }
    return g;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename Fwd, typename Bwd>
static Tensor unary_op(Tensor a, Fwd fwd, Bwd bwd) {
    Graph* g = same_graph({a});
    Node* an = a.node();
    Tensor out = g->make(an->shape, {an}, [an, bwd](Node& n) {
        if (!an->needs_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < n.val.size(); i++)
            an->grad[i] += n.grad[i] * bwd(an->val[i], n.val[i]);
    });
    for (size_t i = 0; i < out.node()->val.size(); i++) out.node()->val[i] = fwd(an->val[i]);
    return out;
}

Tensor add(Tensor a, Tensor b) {
    Graph* g = same_graph({a, b});
    Node *an = a.node(), *bn = b.node();
    LS_CHECK(an->shape == bn->shape, "add: shape mismatch %s vs %s", shape_str(an->shape).c_str(),
             shape_str(bn->shape).c_str());
    Tensor out = g->make(an->shape, {an, bn}, [an, bn](Node& n) {
        if (an->needs_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); i++) an->grad[i] += n.grad[i];
        }
        if (bn->needs_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); i++) bn->grad[i] += n.grad[i];
        }
    });
    for (size_t i = 0; i < out.node()->val.size(); i++) out.node()->val[i] = an->val[i] + bn->val[i];
    return out;
}

Tensor sub(Tensor a, Tensor b) {
    Graph* g = same_graph({a, b});
    Node *an = a.node(), *bn = b.node();
    LS_CHECK(an->shape == bn->shape, "sub: shape mismatch");
    Tensor out = g->make(an->shape, {an, bn}, [an, bn](Node& n) {
        if (an->needs_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); i++) an->grad[i] += n.grad[i];
        }
        if (bn->needs_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); i++) bn->grad[i] -= n.grad[i];
        }
    });
    for (size_t i = 0; i < out.node()->val.size(); i++) out.node()->val[i] = an->val[i] - bn->val[i];
    return out;
}

Tensor mul(Tensor a, Tensor b) {
    Graph* g = same_graph({a, b});
    Node *an = a.node(), *bn = b.node();
    LS_CHECK(an->shape == bn->shape, "mul: shape mismatch");
    Tensor out = g->make(an->shape, {an, bn}, [an, bn](Node& n) {
        if (an->needs_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); i++) an->grad[i] += n.grad[i] * bn->val[i];
        }
        if (bn->needs_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); i++) bn->grad[i] += n.grad[i] * an->val[i];
        }
    });
    for (size_t i = 0; i < out.node()->val.size(); i++) out.node()->val[i] = an->val[i] * bn->val[i];
    return out;
}

Tensor scale(Tensor a, float c) {
    return unary_op(a, [c](float x) { return x * c; }, [c](float, float) { return c; });
}

Tensor add_scalar(Tensor a, float c) {
    return unary_op(a, [c](float x) { return x + c; }, [](float, float) { return 1.0f; });
}

Tensor relu(Tensor a) {
    return unary_op(a, [](float x) { return x > 0 ? x : 0.0f; },
                    [](float x, float) { return x > 0 ? 1.0f : 0.0f; });
}

Tensor leaky_relu(Tensor a, float slope) {
    return unary_op(a, [slope](float x) { return x > 0 ? x : slope * x; },
                    [slope](float x, float) { return x > 0 ? 1.0f : slope; });
}

Tensor sigmoid(Tensor a) {
    return unary_op(a, [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
                    [](float, float y) { return y * (1.0f - y); });
}

Tensor tanh_act(Tensor a) {
    return unary_op(a, [](float x) { return std::tanh(x); },
                    [](float, float y) { return 1.0f - y * y; });
}

Tensor silu(Tensor a) {
    return unary_op(a, [](float x) { return x / (1.0f + std::exp(-x)); },
                    [](float x, float) {
                        const float s = 1.0f / (1.0f + std::exp(-x));
                        return s * (1.0f + x * (1.0f - s));
                    });
}

Tensor abs_act(Tensor a) {
    return unary_op(a, [](float x) { return std::fabs(x); },
                    [](float x, float) { return x > 0 ? 1.0f : (x < 0 ? -1.0f : 0.0f); });
}

Tensor exp_act(Tensor a) {
    return unary_op(a, [](float x) { return std::exp(x); }, [](float, float y) { return y; });
}

Tensor log_act(Tensor a) {
    return unary_op(a, [](float x) { return std::log(x); }, [](float x, float) { return 1.0f / x; });
}

Tensor clamp(Tensor a, float lo, float hi) {
    return unary_op(a, [lo, hi](float x) { return x < lo ? lo : (x > hi ? hi : x); },
                    [lo, hi](float x, float) { return (x >= lo && x <= hi) ? 1.0f : 0.0f; });
}

Tensor dropout(Tensor a, float p) {
    Graph* g = same_graph({a});
    if (!g->training() || p <= 0.0f) return a;
    LS_CHECK(p < 1.0f, "dropout: p=%g", p);
    Node* an = a.node();
    auto mask = std::make_shared<std::vector<float>>(an->val.size());
    const float keep = 1.0f - p;
    for (size_t i = 0; i < mask->size(); i++)
        (*mask)[i] = g->rng().uniformf() < keep ? 1.0f / keep : 0.0f;
    Tensor out = g->make(an->shape, {an}, [an, mask](Node& n) {
        if (!an->needs_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); i++) an->grad[i] += n.grad[i] * (*mask)[i];
    });
    for (size_t i = 0; i < out.node()->val.size(); i++) out.node()->val[i] = an->val[i] * (*mask)[i];
    return out;
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

enum class MM { NN, NT, TN };

static Tensor matmul_impl(Tensor a, Tensor b, MM mode) {
    Graph* g = same_graph({a, b});
    Node *an = a.node(), *bn = b.node();
    LS_CHECK(an->shape.size() == 2 && bn->shape.size() == 2, "matmul: rank must be 2");
    const int ar = an->shape[0], ac = an->shape[1], br = bn->shape[0], bc = bn->shape[1];
    int M = 0, K = 0, N = 0;
    switch (mode) {
        case MM::NN: M = ar; K = ac; N = bc; LS_CHECK(ac == br, "matmul: inner dims %d vs %d", ac, br); break;
        case MM::NT: M = ar; K = ac; N = br; LS_CHECK(ac == bc, "matmul_nt: inner dims %d vs %d", ac, bc); break;
        case MM::TN: M = ac; K = ar; N = bc; LS_CHECK(ar == br, "matmul_tn: inner dims %d vs %d", ar, br); break;
    }
    Tensor out = g->make({M, N}, {an, bn}, [an, bn, mode, M, K, N](Node& n) {
        ECMap A(an->val.data(), an->shape[0], an->shape[1]);
        ECMap B(bn->val.data(), bn->shape[0], bn->shape[1]);
        ECMap G(n.grad.data(), M, N);
        if (an->needs_grad) {
            an->ensure_grad();
            EMap dA(an->grad.data(), an->shape[0], an->shape[1]);
            switch (mode) {
                case MM::NN: dA.noalias() += G * B.transpose(); break;
                case MM::NT: dA.noalias() += G * B; break;
                case MM::TN: dA.noalias() += B * G.transpose(); break;
            }
        }
        if (bn->needs_grad) {
            bn->ensure_grad();
            EMap dB(bn->grad.data(), bn->shape[0], bn->shape[1]);
            switch (mode) {
                case MM::NN: dB.noalias() += A.transpose() * G; break;
                case MM::NT: dB.noalias() += G.transpose() * A; break;
                case MM::TN: dB.noalias() += A * G; break;
            }
        }
    });
    ECMap A(an->val.data(), ar, ac);
    ECMap B(bn->val.data(), br, bc);
    EMap C(out.data(), M, N);
    switch (mode) {
        case MM::NN: C.noalias() = A * B; break;
        case MM::NT: C.noalias() = A * B.transpose(); break;
        case MM::TN: C.noalias() = A.transpose() * B; break;
    }
    return out;
}

Tensor matmul(Tensor a, Tensor b) { return matmul_impl(a, b, MM::NN); }
Tensor matmul_nt(Tensor a, Tensor b) { return matmul_impl(a, b, MM::NT); }
Tensor matmul_tn(Tensor a, Tensor b) { return matmul_impl(a, b, MM::TN); }

Tensor add_bias(Tensor x, Tensor b) {
    Graph* g = same_graph({x, b});
    Node *xn = x.node(), *bn = b.node();
    LS_CHECK(xn->shape.size() == 2 && bn->shape.size() == 1 && xn->shape[1] == bn->shape[0],
             "add_bias: %s + %s", shape_str(xn->shape).c_str(), shape_str(bn->shape).c_str());
    const int R = xn->shape[0], C = xn->shape[1];
    Tensor out = g->make(xn->shape, {xn, bn}, [xn, bn, R, C](Node& n) {
        if (xn->needs_grad) {
            xn->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); i++) xn->grad[i] += n.grad[i];
        }
        if (bn->needs_grad) {
            bn->ensure_grad();
            for (int r = 0; r < R; r++)
                for (int c = 0; c < C; c++) bn->grad[static_cast<size_t>(c)] += n.grad[static_cast<size_t>(r) * C + c];
        }
    });
    for (int r = 0; r < R; r++)
        for (int c = 0; c < C; c++)
            out.node()->val[static_cast<size_t>(r) * C + c] = xn->val[static_cast<size_t>(r) * C + c] + bn->val[static_cast<size_t>(c)];
    return out;
}

Tensor softmax_rows(Tensor x) {
    Graph* g = same_graph({x});
    Node* xn = x.node();
    LS_CHECK(xn->shape.size() == 2, "softmax_rows: rank must be 2");
    const int R = xn->shape[0], C = xn->shape[1];
    Tensor out = g->make(xn->shape, {xn}, [xn, R, C](Node& n) {
        if (!xn->needs_grad) return;
        xn->ensure_grad();
        for (int r = 0; r < R; r++) {
            const float* y = n.val.data() + static_cast<size_t>(r) * C;
            const float* gr = n.grad.data() + static_cast<size_t>(r) * C;
            float dot = 0;
            for (int c = 0; c < C; c++) dot += y[c] * gr[c];
            float* dx = xn->grad.data() + static_cast<size_t>(r) * C;
            for (int c = 0; c < C; c++) dx[c] += y[c] * (gr[c] - dot);
        }
    });
    for (int r = 0; r < R; r++) {
        const float* xr = xn->val.data() + static_cast<size_t>(r) * C;
        float* yr = out.node()->val.data() + static_cast<size_t>(r) * C;
        float mx = xr[0];
        for (int c = 1; c < C; c++) mx = std::max(mx, xr[c]);
        float sum = 0;
        for (int c = 0; c < C; c++) {
            yr[c] = std::exp(xr[c] - mx);
            sum += yr[c];
        }
        const float inv = 1.0f / sum;
        for (int c = 0; c < C; c++) yr[c] *= inv;
    }
    return out;
}

Tensor layer_norm_rows(Tensor x, Tensor gamma, Tensor beta, float eps) {
    Graph* g = same_graph({x, gamma, beta});
    Node *xn = x.node(), *gn = gamma.node(), *bn = beta.node();
    LS_CHECK(xn->shape.size() == 2, "layer_norm: rank must be 2");
    const int R = xn->shape[0], C = xn->shape[1];
    LS_CHECK(gn->shape == Shape{C} && bn->shape == Shape{C}, "layer_norm: affine dims mismatch");
    auto xhat = std::make_shared<std::vector<float>>(static_cast<size_t>(R) * C);
    auto inv_std = std::make_shared<std::vector<float>>(static_cast<size_t>(R));

    Tensor out = g->make(xn->shape, {xn, gn, bn}, [xn, gn, bn, xhat, inv_std, R, C](Node& n) {
        for (int r = 0; r < R; r++) {
            const float* gr = n.grad.data() + static_cast<size_t>(r) * C;
            const float* xh = xhat->data() + static_cast<size_t>(r) * C;
            const float istd = (*inv_std)[static_cast<size_t>(r)];
            if (gn->needs_grad) {
                gn->ensure_grad();
                for (int c = 0; c < C; c++) gn->grad[static_cast<size_t>(c)] += gr[c] * xh[c];
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (int c = 0; c < C; c++) bn->grad[static_cast<size_t>(c)] += gr[c];
            }
            if (xn->needs_grad) {
                xn->ensure_grad();
                float sum_g = 0, sum_gx = 0;
                for (int c = 0; c < C; c++) {
                    const float dxh = gr[c] * gn->val[static_cast<size_t>(c)];
                    sum_g += dxh;
                    sum_gx += dxh * xh[c];
                }
                float* dx = xn->grad.data() + static_cast<size_t>(r) * C;
                const float invC = 1.0f / C;
                for (int c = 0; c < C; c++) {
                    const float dxh = gr[c] * gn->val[static_cast<size_t>(c)];
                    dx[c] += istd * (dxh - invC * sum_g - xh[c] * invC * sum_gx);
                }
            }
        }
    });
    for (int r = 0; r < R; r++) {
        const float* xr = xn->val.data() + static_cast<size_t>(r) * C;
        float mean = 0;
        for (int c = 0; c < C; c++) mean += xr[c];
        mean /= C;
        float var = 0;
        for (int c = 0; c < C; c++) var += (xr[c] - mean) * (xr[c] - mean);
        var /= C;
        const float istd = 1.0f / std::sqrt(var + eps);
        (*inv_std)[static_cast<size_t>(r)] = istd;
        float* xh = xhat->data() + static_cast<size_t>(r) * C;
        float* yr = out.node()->val.data() + static_cast<size_t>(r) * C;
        for (int c = 0; c < C; c++) {
            xh[c] = (xr[c] - mean) * istd;
            yr[c] = xh[c] * gn->val[static_cast<size_t>(c)] + bn->val[static_cast<size_t>(c)];
        }
    }
    return out;
}

Tensor l2_normalize_rows(Tensor x, float eps) {
    Graph* g = same_graph({x});
    Node* xn = x.node();
    LS_CHECK(xn->shape.size() == 2, "l2_normalize_rows: rank must be 2");
    const int R = xn->shape[0], C = xn->shape[1];
    auto inv_norm = std::make_shared<std::vector<float>>(static_cast<size_t>(R));
    Tensor out = g->make(xn->shape, {xn}, [xn, inv_norm, R, C](Node& n) {
        if (!xn->needs_grad) return;
        xn->ensure_grad();
        for (int r = 0; r < R; r++) {
            const float* y = n.val.data() + static_cast<size_t>(r) * C;
            const float* gr = n.grad.data() + static_cast<size_t>(r) * C;
            const float in = (*inv_norm)[static_cast<size_t>(r)];
            float dot = 0;
            for (int c = 0; c < C; c++) dot += y[c] * gr[c];
            float* dx = xn->grad.data() + static_cast<size_t>(r) * C;
            for (int c = 0; c < C; c++) dx[c] += in * (gr[c] - y[c] * dot);
        }
    });
    for (int r = 0; r < R; r++) {
        const float* xr = xn->val.data() + static_cast<size_t>(r) * C;
        float s = 0;
        for (int c = 0; c < C; c++) s += xr[c] * xr[c];
        const float in = 1.0f / std::sqrt(s + eps);
        (*inv_norm)[static_cast<size_t>(r)] = in;
        float* yr = out.node()->val.data() + static_cast<size_t>(r) * C;
        for (int c = 0; c < C; c++) yr[c] = xr[c] * in;
    }
    return out;
}

Tensor rows_dot(Tensor a, Tensor b) {
    Graph* g = same_graph({a, b});
    Node *an = a.node(), *bn = b.node();
    LS_CHECK(an->shape == bn->shape && an->shape.size() == 2, "rows_dot: need equal [R,C]");
    const int R = an->shape[0], C = an->shape[1];
    Tensor out = g->make({R}, {an, bn}, [an, bn, R, C](Node& n) {
        for (int r = 0; r < R; r++) {
            const float gr = n.grad[static_cast<size_t>(r)];
            if (gr == 0.0f) continue;
            if (an->needs_grad) {
                an->ensure_grad();
                for (int c = 0; c < C; c++)
                    an->grad[static_cast<size_t>(r) * C + c] += gr * bn->val[static_cast<size_t>(r) * C + c];
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (int c = 0; c < C; c++)
                    bn->grad[static_cast<size_t>(r) * C + c] += gr * an->val[static_cast<size_t>(r) * C + c];
            }
        }
    });
    for (int r = 0; r < R; r++) {
        float s = 0;
        for (int c = 0; c < C; c++)
            s += an->val[static_cast<size_t>(r) * C + c] * bn->val[static_cast<size_t>(r) * C + c];
        out.node()->val[static_cast<size_t>(r)] = s;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Structure
// ---------------------------------------------------------------------------

Tensor reshape(Tensor x, Shape shape) {
    Graph* g = same_graph({x});
    Node* xn = x.node();
    LS_CHECK(shape_numel(shape) == xn->numel(), "reshape: %s -> %s", shape_str(xn->shape).c_str(),
             shape_str(shape).c_str());
    Tensor out = g->make(std::move(shape), {xn}, [xn](Node& n) {
        if (!xn->needs_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); i++) xn->grad[i] += n.grad[i];
    });
    out.node()->val = xn->val;
    return out;
}

Tensor concat_axis0(const std::vector<Tensor>& xs) {
    LS_CHECK(!xs.empty(), "concat_axis0: empty list");
    Graph* g = xs[0].graph();
    Shape tail(xs[0].shape().begin() + 1, xs[0].shape().end());
    int total = 0;
    std::vector<Node*> parents;
    for (const Tensor& t : xs) {
        LS_CHECK(t.graph() == g, "concat_axis0: mixed graphs");
        Shape tl(t.shape().begin() + 1, t.shape().end());
        LS_CHECK(tl == tail, "concat_axis0: trailing dims mismatch");
        total += t.shape()[0];
        parents.push_back(t.node());
    }
    Shape out_shape = xs[0].shape();
    out_shape[0] = total;
    auto ps = std::make_shared<std::vector<Node*>>(parents);
    Tensor out = g->make(out_shape, parents, [ps](Node& n) {
        size_t off = 0;
        for (Node* p : *ps) {
            if (p->needs_grad) {
                p->ensure_grad();
                for (size_t i = 0; i < p->val.size(); i++) p->grad[i] += n.grad[off + i];
            }
            off += p->val.size();
        }
    });
    size_t off = 0;
    for (Node* p : parents) {
        std::memcpy(out.node()->val.data() + off, p->val.data(), p->val.size() * sizeof(float));
        off += p->val.size();
    }
    return out;
}

Tensor slice_axis0(Tensor x, int begin, int end) {
    Graph* g = same_graph({x});
    Node* xn = x.node();
    LS_CHECK(!xn->shape.empty() && begin >= 0 && begin < end && end <= xn->shape[0],
             "slice_axis0: [%d,%d) of %d", begin, end, xn->shape.empty() ? 0 : xn->shape[0]);
    Shape out_shape = xn->shape;
    out_shape[0] = end - begin;
    const int64_t stride = xn->numel() / xn->shape[0];
    Tensor out = g->make(out_shape, {xn}, [xn, begin, stride](Node& n) {
        if (!xn->needs_grad) return;
        xn->ensure_grad();
        const size_t off = static_cast<size_t>(begin) * static_cast<size_t>(stride);
        for (size_t i = 0; i < n.grad.size(); i++) xn->grad[off + i] += n.grad[i];
    });
    std::memcpy(out.node()->val.data(), xn->val.data() + static_cast<size_t>(begin) * static_cast<size_t>(stride),
                out.node()->val.size() * sizeof(float));
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& xs) {
    LS_CHECK(!xs.empty(), "concat_cols: empty list");
    Graph* g = xs[0].graph();
    const int R = xs[0].shape()[0];
    int total_c = 0;
    std::vector<Node*> parents;
    for (const Tensor& t : xs) {
        LS_CHECK(t.graph() == g && t.rank() == 2 && t.shape()[0] == R, "concat_cols: need same-row 2d tensors");
        total_c += t.shape()[1];
        parents.push_back(t.node());
    }
    auto ps = std::make_shared<std::vector<Node*>>(parents);
    const int C = total_c;
    Tensor out = g->make({R, C}, parents, [ps, R, C](Node& n) {
        int col0 = 0;
        for (Node* p : *ps) {
            const int pc = p->shape[1];
            if (p->needs_grad) {
                p->ensure_grad();
                for (int r = 0; r < R; r++)
                    for (int c = 0; c < pc; c++)
                        p->grad[static_cast<size_t>(r) * pc + c] += n.grad[static_cast<size_t>(r) * C + col0 + c];
            }
            col0 += pc;
        }
    });
    int col0 = 0;
    for (Node* p : parents) {
        const int pc = p->shape[1];
        for (int r = 0; r < R; r++)
            std::memcpy(out.node()->val.data() + static_cast<size_t>(r) * C + col0,
                        p->val.data() + static_cast<size_t>(r) * pc, static_cast<size_t>(pc) * sizeof(float));
        col0 += pc;
    }
    return out;
}

Tensor slice_cols(Tensor x, int begin, int end) {
    Graph* g = same_graph({x});
    Node* xn = x.node();
    LS_CHECK(xn->shape.size() == 2 && begin >= 0 && begin < end && end <= xn->shape[1],
             "slice_cols: [%d,%d) of %s", begin, end, shape_str(xn->shape).c_str());
    const int R = xn->shape[0], C = xn->shape[1], W = end - begin;
    Tensor out = g->make({R, W}, {xn}, [xn, begin, R, C, W](Node& n) {
        if (!xn->needs_grad) return;
        xn->ensure_grad();
        for (int r = 0; r < R; r++)
            for (int c = 0; c < W; c++)
                xn->grad[static_cast<size_t>(r) * C + begin + c] += n.grad[static_cast<size_t>(r) * W + c];
    });
    for (int r = 0; r < R; r++)
        std::memcpy(out.node()->val.data() + static_cast<size_t>(r) * W,
                    xn->val.data() + static_cast<size_t>(r) * C + begin, static_cast<size_t>(W) * sizeof(float));
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor sum_all(Tensor x) {
    Graph* g = same_graph({x});
    Node* xn = x.node();
    Tensor out = g->make({1}, {xn}, [xn](Node& n) {
        if (!xn->needs_grad) return;
        xn->ensure_grad();
        const float gv = n.grad[0];
        for (size_t i = 0; i < xn->grad.size(); i++) xn->grad[i] += gv;
    });
    double s = 0;
    for (float v : xn->val) s += v;
    out.node()->val[0] = static_cast<float>(s);
    return out;
}

Tensor mean_all(Tensor x) { return scale(sum_all(x), 1.0f / static_cast<float>(x.numel())); }

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

Tensor conv2d(Tensor x, Tensor w, Tensor b, int k, int stride, int pad) {
    Graph* g = same_graph({x, w, b});
    Node *xn = x.node(), *wn = w.node(), *bn = b.node();
    LS_CHECK(xn->shape.size() == 3, "conv2d: input must be [C,H,W]");
    const int Cin = xn->shape[0], H = xn->shape[1], W = xn->shape[2];
    LS_CHECK(wn->shape.size() == 2 && wn->shape[1] == Cin * k * k, "conv2d: weight must be [Cout,%d]",
             Cin * k * k);
    const int Cout = wn->shape[0];
    LS_CHECK(bn->shape == Shape{Cout}, "conv2d: bias mismatch");
    const int Ho = (H + 2 * pad - k) / stride + 1;
    const int Wo = (W + 2 * pad - k) / stride + 1;
    LS_CHECK(Ho > 0 && Wo > 0, "conv2d: output collapsed");

    const bool pointwise = (k == 1 && stride == 1 && pad == 0);
    std::shared_ptr<std::vector<float>> colT;
    if (!pointwise) {
        // colT layout: [Cin*k*k, Ho*Wo]
        colT = std::make_shared<std::vector<float>>(static_cast<size_t>(Cin) * k * k * Ho * Wo, 0.0f);
        for (int ci = 0; ci < Cin; ci++)
            for (int dy = 0; dy < k; dy++)
                for (int dx = 0; dx < k; dx++) {
                    float* dst = colT->data() + (static_cast<size_t>(ci) * k * k + static_cast<size_t>(dy) * k + dx) *
                                                    (static_cast<size_t>(Ho) * Wo);
                    const float* src = xn->val.data() + static_cast<size_t>(ci) * H * W;
                    for (int ho = 0; ho < Ho; ho++) {
                        const int hi = ho * stride - pad + dy;
                        if (hi < 0 || hi >= H) continue;
                        for (int wo = 0; wo < Wo; wo++) {
                            const int wi = wo * stride - pad + dx;
                            if (wi < 0 || wi >= W) continue;
                            dst[static_cast<size_t>(ho) * Wo + wo] = src[static_cast<size_t>(hi) * W + wi];
                        }
                    }
                }
    }

    Tensor out = g->make({Cout, Ho, Wo}, {xn, wn, bn},
                         [xn, wn, bn, colT, pointwise, Cin, H, W, Cout, Ho, Wo, k, stride, pad](Node& n) {
        const int HoWo = Ho * Wo;
        ECMap Wm(wn->val.data(), Cout, Cin * k * k);
        ECMap G(n.grad.data(), Cout, HoWo);
        if (bn->needs_grad) {
            bn->ensure_grad();
            for (int co = 0; co < Cout; co++) {
                float s = 0;
                for (int i = 0; i < HoWo; i++) s += n.grad[static_cast<size_t>(co) * HoWo + i];
                bn->grad[static_cast<size_t>(co)] += s;
            }
        }
        if (pointwise) {
            ECMap X(xn->val.data(), Cin, HoWo);
            if (wn->needs_grad) {
                wn->ensure_grad();
                EMap dW(wn->grad.data(), Cout, Cin);
                dW.noalias() += G * X.transpose();
            }
            if (xn->needs_grad) {
                xn->ensure_grad();
                EMap dX(xn->grad.data(), Cin, HoWo);
                dX.noalias() += Wm.transpose() * G;
            }
            return;
        }
        ECMap Col(colT->data(), Cin * k * k, HoWo);
        if (wn->needs_grad) {
            wn->ensure_grad();
            EMap dW(wn->grad.data(), Cout, Cin * k * k);
            dW.noalias() += G * Col.transpose();
        }
        if (xn->needs_grad) {
            xn->ensure_grad();
            EMat dCol = Wm.transpose() * G;  // [Cin*k*k, HoWo]
            for (int ci = 0; ci < Cin; ci++)
                for (int dy = 0; dy < k; dy++)
                    for (int dx = 0; dx < k; dx++) {
                        const float* src = dCol.data() + (static_cast<size_t>(ci) * k * k +
                                                          static_cast<size_t>(dy) * k + dx) *
                                                             static_cast<size_t>(HoWo);
                        float* dst = xn->grad.data() + static_cast<size_t>(ci) * H * W;
                        for (int ho = 0; ho < Ho; ho++) {
                            const int hi = ho * stride - pad + dy;
                            if (hi < 0 || hi >= H) continue;
                            for (int wo = 0; wo < Wo; wo++) {
                                const int wi = wo * stride - pad + dx;
                                if (wi < 0 || wi >= W) continue;
                                dst[static_cast<size_t>(hi) * W + wi] += src[static_cast<size_t>(ho) * Wo + wo];
                            }
                        }
                    }
        }
    });

    EMap O(out.data(), Cout, Ho * Wo);
    ECMap Wm(wn->val.data(), Cout, Cin * k * k);
    if (pointwise) {
        ECMap X(xn->val.data(), Cin, Ho * Wo);
        O.noalias() = Wm * X;
    } else {
        ECMap Col(colT->data(), Cin * k * k, Ho * Wo);
        O.noalias() = Wm * Col;
    }
    for (int co = 0; co < Cout; co++)
        for (int i = 0; i < Ho * Wo; i++) out.node()->val[static_cast<size_t>(co) * Ho * Wo + i] += bn->val[static_cast<size_t>(co)];
    return out;
}

Tensor conv1d(Tensor x, Tensor w, Tensor b, int k, int stride, int pad) {
    Graph* g = same_graph({x, w, b});
    Node *xn = x.node(), *wn = w.node(), *bn = b.node();
    LS_CHECK(xn->shape.size() == 2, "conv1d: input must be [T,C]");
    const int T = xn->shape[0], Cin = xn->shape[1];
    LS_CHECK(wn->shape.size() == 2 && wn->shape[1] == k * Cin, "conv1d: weight must be [Cout,%d]", k * Cin);
    const int Cout = wn->shape[0];
    LS_CHECK(bn->shape == Shape{Cout}, "conv1d: bias mismatch");
    const int To = (T + 2 * pad - k) / stride + 1;
    LS_CHECK(To > 0, "conv1d: output collapsed");

    // col layout: [To, k*Cin]; row to = x rows [to*stride-pad .. +k-1] concatenated.
    auto col = std::make_shared<std::vector<float>>(static_cast<size_t>(To) * k * Cin, 0.0f);
    for (int to = 0; to < To; to++)
        for (int dk = 0; dk < k; dk++) {
            const int ti = to * stride - pad + dk;
            if (ti < 0 || ti >= T) continue;
            std::memcpy(col->data() + (static_cast<size_t>(to) * k + dk) * Cin,
                        xn->val.data() + static_cast<size_t>(ti) * Cin, static_cast<size_t>(Cin) * sizeof(float));
        }

    Tensor out = g->make({To, Cout}, {xn, wn, bn}, [xn, wn, bn, col, T, Cin, Cout, To, k, stride, pad](Node& n) {
        ECMap G(n.grad.data(), To, Cout);
        ECMap Colm(col->data(), To, k * Cin);
        if (bn->needs_grad) {
            bn->ensure_grad();
            for (int to = 0; to < To; to++)
                for (int co = 0; co < Cout; co++) bn->grad[static_cast<size_t>(co)] += n.grad[static_cast<size_t>(to) * Cout + co];
        }
        if (wn->needs_grad) {
            wn->ensure_grad();
            EMap dW(wn->grad.data(), Cout, k * Cin);
            dW.noalias() += G.transpose() * Colm;
        }
        if (xn->needs_grad) {
            xn->ensure_grad();
            ECMap Wm(wn->val.data(), Cout, k * Cin);
            EMat dCol = G * Wm;  // [To, k*Cin]
            for (int to = 0; to < To; to++)
                for (int dk = 0; dk < k; dk++) {
                    const int ti = to * stride - pad + dk;
                    if (ti < 0 || ti >= T) continue;
                    const float* src = dCol.data() + (static_cast<size_t>(to) * k + dk) * Cin;
                    float* dst = xn->grad.data() + static_cast<size_t>(ti) * Cin;
                    for (int c = 0; c < Cin; c++) dst[c] += src[c];
                }
        }
    });
    EMap O(out.data(), To, Cout);
    ECMap Colm(col->data(), To, k * Cin);
    ECMap Wm(wn->val.data(), Cout, k * Cin);
    O.noalias() = Colm * Wm.transpose();
    for (int to = 0; to < To; to++)
        for (int co = 0; co < Cout; co++) out.node()->val[static_cast<size_t>(to) * Cout + co] += bn->val[static_cast<size_t>(co)];
    return out;
}

Tensor conv1d_depthwise(Tensor x, Tensor w, Tensor b) {
    Graph* g = same_graph({x, w, b});
    Node *xn = x.node(), *wn = w.node(), *bn = b.node();
    LS_CHECK(xn->shape.size() == 2, "conv1d_depthwise: input must be [T,C]");
    const int T = xn->shape[0], C = xn->shape[1];
    LS_CHECK(wn->shape.size() == 2 && wn->shape[1] == C && wn->shape[0] % 2 == 1,
             "conv1d_depthwise: weight must be [K,C] with odd K");
    const int K = wn->shape[0], P = (K - 1) / 2;
    LS_CHECK(bn->shape == Shape{C}, "conv1d_depthwise: bias mismatch");

    Tensor out = g->make({T, C}, {xn, wn, bn}, [xn, wn, bn, T, C, K, P](Node& n) {
        if (bn->needs_grad) {
            bn->ensure_grad();
            for (int t = 0; t < T; t++)
                for (int c = 0; c < C; c++) bn->grad[static_cast<size_t>(c)] += n.grad[static_cast<size_t>(t) * C + c];
        }
        for (int t = 0; t < T; t++)
            for (int dk = 0; dk < K; dk++) {
                const int ti = t - P + dk;
                if (ti < 0 || ti >= T) continue;
                const float* gr = n.grad.data() + static_cast<size_t>(t) * C;
                if (wn->needs_grad) {
                    wn->ensure_grad();
                    const float* xr = xn->val.data() + static_cast<size_t>(ti) * C;
                    float* dw = wn->grad.data() + static_cast<size_t>(dk) * C;
                    for (int c = 0; c < C; c++) dw[c] += gr[c] * xr[c];
                }
                if (xn->needs_grad) {
                    xn->ensure_grad();
                    const float* wr = wn->val.data() + static_cast<size_t>(dk) * C;
                    float* dx = xn->grad.data() + static_cast<size_t>(ti) * C;
                    for (int c = 0; c < C; c++) dx[c] += gr[c] * wr[c];
                }
            }
    });
    for (int t = 0; t < T; t++) {
        float* yr = out.node()->val.data() + static_cast<size_t>(t) * C;
        for (int c = 0; c < C; c++) yr[c] = bn->val[static_cast<size_t>(c)];
        for (int dk = 0; dk < K; dk++) {
            const int ti = t - P + dk;
            if (ti < 0 || ti >= T) continue;
            const float* xr = xn->val.data() + static_cast<size_t>(ti) * C;
            const float* wr = wn->val.data() + static_cast<size_t>(dk) * C;
            for (int c = 0; c < C; c++) yr[c] += xr[c] * wr[c];
        }
    }
    return out;
}

Tensor group_norm(Tensor x, int groups, Tensor gamma, Tensor beta, float eps) {
    Graph* g = same_graph({x, gamma, beta});
    Node *xn = x.node(), *gn = gamma.node(), *bn = beta.node();
    LS_CHECK(xn->shape.size() == 3, "group_norm: input must be [C,H,W]");
    const int C = xn->shape[0], H = xn->shape[1], W = xn->shape[2];
    LS_CHECK(groups > 0 && C % groups == 0, "group_norm: C=%d not divisible by groups=%d", C, groups);
    LS_CHECK(gn->shape == Shape{C} && bn->shape == Shape{C}, "group_norm: affine dims mismatch");
    const int Cg = C / groups;
    const int64_t HW = static_cast<int64_t>(H) * W;
    const int64_t GN = Cg * HW;  // elements per group

    auto xhat = std::make_shared<std::vector<float>>(xn->val.size());
    auto inv_std = std::make_shared<std::vector<float>>(static_cast<size_t>(groups));

    Tensor out = g->make(xn->shape, {xn, gn, bn}, [xn, gn, bn, xhat, inv_std, groups, Cg, HW, GN, C](Node& n) {
        if (gn->needs_grad || bn->needs_grad) {
            if (gn->needs_grad) gn->ensure_grad();
            if (bn->needs_grad) bn->ensure_grad();
            for (int c = 0; c < C; c++) {
                const float* gr = n.grad.data() + static_cast<size_t>(c) * HW;
                const float* xh = xhat->data() + static_cast<size_t>(c) * HW;
                float sg = 0, sgx = 0;
                for (int64_t i = 0; i < HW; i++) {
                    sg += gr[i];
                    sgx += gr[i] * xh[i];
                }
                if (gn->needs_grad) gn->grad[static_cast<size_t>(c)] += sgx;
                if (bn->needs_grad) bn->grad[static_cast<size_t>(c)] += sg;
            }
        }
        if (!xn->needs_grad) return;
        xn->ensure_grad();
        for (int grp = 0; grp < groups; grp++) {
            const float istd = (*inv_std)[static_cast<size_t>(grp)];
            double sum_g = 0, sum_gx = 0;
            for (int cc = 0; cc < Cg; cc++) {
                const int c = grp * Cg + cc;
                const float ga = gn->val[static_cast<size_t>(c)];
                const float* gr = n.grad.data() + static_cast<size_t>(c) * HW;
                const float* xh = xhat->data() + static_cast<size_t>(c) * HW;
                for (int64_t i = 0; i < HW; i++) {
                    const float dxh = gr[i] * ga;
                    sum_g += dxh;
                    sum_gx += dxh * xh[i];
                }
            }
            const float mg = static_cast<float>(sum_g / static_cast<double>(GN));
            const float mgx = static_cast<float>(sum_gx / static_cast<double>(GN));
            for (int cc = 0; cc < Cg; cc++) {
                const int c = grp * Cg + cc;
                const float ga = gn->val[static_cast<size_t>(c)];
                const float* gr = n.grad.data() + static_cast<size_t>(c) * HW;
                const float* xh = xhat->data() + static_cast<size_t>(c) * HW;
                float* dx = xn->grad.data() + static_cast<size_t>(c) * HW;
                for (int64_t i = 0; i < HW; i++) dx[i] += istd * (gr[i] * ga - mg - xh[i] * mgx);
            }
        }
    });
    for (int grp = 0; grp < groups; grp++) {
        const float* xg = xn->val.data() + static_cast<size_t>(grp) * Cg * HW;
        double mean = 0;
        for (int64_t i = 0; i < GN; i++) mean += xg[i];
        mean /= static_cast<double>(GN);
        double var = 0;
        for (int64_t i = 0; i < GN; i++) var += (xg[i] - mean) * (xg[i] - mean);
        var /= static_cast<double>(GN);
        const float istd = static_cast<float>(1.0 / std::sqrt(var + eps));
        (*inv_std)[static_cast<size_t>(grp)] = istd;
        for (int cc = 0; cc < Cg; cc++) {
            const int c = grp * Cg + cc;
            const float ga = gn->val[static_cast<size_t>(c)], be = bn->val[static_cast<size_t>(c)];
            const float* xr = xn->val.data() + static_cast<size_t>(c) * HW;
            float* xh = xhat->data() + static_cast<size_t>(c) * HW;
            float* yr = out.node()->val.data() + static_cast<size_t>(c) * HW;
            for (int64_t i = 0; i < HW; i++) {
                xh[i] = (xr[i] - static_cast<float>(mean)) * istd;
                yr[i] = xh[i] * ga + be;
            }
        }
    }
    return out;
}

Tensor upsample2x(Tensor x) {
    Graph* g = same_graph({x});
    Node* xn = x.node();
    LS_CHECK(xn->shape.size() == 3, "upsample2x: input must be [C,H,W]");
    const int C = xn->shape[0], H = xn->shape[1], W = xn->shape[2];
    Tensor out = g->make({C, 2 * H, 2 * W}, {xn}, [xn, C, H, W](Node& n) {
        if (!xn->needs_grad) return;
        xn->ensure_grad();
        for (int c = 0; c < C; c++)
            for (int i = 0; i < H; i++)
                for (int j = 0; j < W; j++) {
                    float s = 0;
                    for (int di = 0; di < 2; di++)
                        for (int dj = 0; dj < 2; dj++)
                            s += n.grad[(static_cast<size_t>(c) * 2 * H + 2 * i + di) * 2 * W + 2 * j + dj];
                    xn->grad[(static_cast<size_t>(c) * H + i) * W + j] += s;
                }
    });
    for (int c = 0; c < C; c++)
        for (int i = 0; i < H; i++)
            for (int j = 0; j < W; j++) {
                const float v = xn->val[(static_cast<size_t>(c) * H + i) * W + j];
                for (int di = 0; di < 2; di++)
                    for (int dj = 0; dj < 2; dj++)
                        out.node()->val[(static_cast<size_t>(c) * 2 * H + 2 * i + di) * 2 * W + 2 * j + dj] = v;
            }
    return out;
}

Tensor global_avg_pool(Tensor x) {
    Graph* g = same_graph({x});
    Node* xn = x.node();
    LS_CHECK(xn->shape.size() == 3, "global_avg_pool: input must be [C,H,W]");
    const int C = xn->shape[0];
    const int64_t HW = static_cast<int64_t>(xn->shape[1]) * xn->shape[2];
    Tensor out = g->make({C}, {xn}, [xn, C, HW](Node& n) {
        if (!xn->needs_grad) return;
        xn->ensure_grad();
        const float inv = 1.0f / static_cast<float>(HW);
        for (int c = 0; c < C; c++) {
            const float gv = n.grad[static_cast<size_t>(c)] * inv;
            float* dst = xn->grad.data() + static_cast<size_t>(c) * HW;
            for (int64_t i = 0; i < HW; i++) dst[i] += gv;
        }
    });
    for (int c = 0; c < C; c++) {
        double s = 0;
        const float* src = xn->val.data() + static_cast<size_t>(c) * HW;
        for (int64_t i = 0; i < HW; i++) s += src[i];
        out.node()->val[static_cast<size_t>(c)] = static_cast<float>(s / static_cast<double>(HW));
    }
    return out;
}

Tensor add_channel_bias(Tensor x, Tensor b) {
    Graph* g = same_graph({x, b});
    Node *xn = x.node(), *bn = b.node();
    LS_CHECK(xn->shape.size() == 3 && bn->shape == Shape{xn->shape[0]}, "add_channel_bias: shape mismatch");
    const int C = xn->shape[0];
    const int64_t HW = static_cast<int64_t>(xn->shape[1]) * xn->shape[2];
    Tensor out = g->make(xn->shape, {xn, bn}, [xn, bn, C, HW](Node& n) {
        if (xn->needs_grad) {
            xn->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); i++) xn->grad[i] += n.grad[i];
        }
        if (bn->needs_grad) {
            bn->ensure_grad();
            for (int c = 0; c < C; c++) {
                float s = 0;
                const float* gr = n.grad.data() + static_cast<size_t>(c) * HW;
                for (int64_t i = 0; i < HW; i++) s += gr[i];
                bn->grad[static_cast<size_t>(c)] += s;
            }
        }
    });
    for (int c = 0; c < C; c++) {
        const float bv = bn->val[static_cast<size_t>(c)];
        for (int64_t i = 0; i < HW; i++)
            out.node()->val[static_cast<size_t>(c) * HW + i] = xn->val[static_cast<size_t>(c) * HW + i] + bv;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

Tensor mse_loss(Tensor a, Tensor b) {
    Tensor d = sub(a, b);
    return mean_all(mul(d, d));
}

Tensor l1_loss(Tensor a, Tensor b) { return mean_all(abs_act(sub(a, b))); }

Tensor cross_entropy_rows(Tensor logits, const std::vector<int>& labels) {
    Graph* g = same_graph({logits});
    Node* xn = logits.node();
    LS_CHECK(xn->shape.size() == 2, "cross_entropy_rows: logits must be [B,C]");
    const int B = xn->shape[0], C = xn->shape[1];
    LS_CHECK(static_cast<int>(labels.size()) == B, "cross_entropy_rows: %zu labels for %d rows",
             labels.size(), B);
    for (int lab : labels)
        LS_CHECK(lab >= 0 && lab < C, "cross_entropy_rows: label %d out of range [0,%d)", lab, C);

    auto probs = std::make_shared<std::vector<float>>(xn->val.size());
    auto labs = std::make_shared<std::vector<int>>(labels);
    Tensor out = g->make({1}, {xn}, [xn, probs, labs, B, C](Node& n) {
        if (!xn->needs_grad) return;
        xn->ensure_grad();
        const float gv = n.grad[0] / static_cast<float>(B);
        for (int r = 0; r < B; r++) {
            const float* p = probs->data() + static_cast<size_t>(r) * C;
            float* dx = xn->grad.data() + static_cast<size_t>(r) * C;
            for (int c = 0; c < C; c++) dx[c] += gv * (p[c] - (c == (*labs)[static_cast<size_t>(r)] ? 1.0f : 0.0f));
        }
    });
    double total = 0;
    for (int r = 0; r < B; r++) {
        const float* xr = xn->val.data() + static_cast<size_t>(r) * C;
        float mx = xr[0];
        for (int c = 1; c < C; c++) mx = std::max(mx, xr[c]);
        double sum = 0;
        for (int c = 0; c < C; c++) sum += std::exp(static_cast<double>(xr[c]) - mx);
        const double lse = mx + std::log(sum);
        total += lse - xr[labels[static_cast<size_t>(r)]];
        float* p = probs->data() + static_cast<size_t>(r) * C;
        for (int c = 0; c < C; c++) p[c] = static_cast<float>(std::exp(static_cast<double>(xr[c]) - lse));
    }
    out.node()->val[0] = static_cast<float>(total / B);
    return out;
}

Tensor arcface_adjust(Tensor cos_mat, const std::vector<int>& labels, float margin) {
    Graph* g = same_graph({cos_mat});
    Node* xn = cos_mat.node();
    LS_CHECK(xn->shape.size() == 2, "arcface_adjust: input must be [B,C]");
    const int B = xn->shape[0], C = xn->shape[1];
    LS_CHECK(static_cast<int>(labels.size()) == B, "arcface_adjust: label count mismatch");
    for (int lab : labels) LS_CHECK(lab >= 0 && lab < C, "arcface_adjust: label %d out of range", lab);
    LS_CHECK(margin >= 0.0f, "arcface_adjust: negative margin");

    const float cos_m = std::cos(margin), sin_m = std::sin(margin);
    constexpr float kClip = 1.0f - 1e-7f;
    auto labs = std::make_shared<std::vector<int>>(labels);
    Tensor out = g->make(xn->shape, {xn}, [xn, labs, cos_m, sin_m, B, C](Node& n) {
        if (!xn->needs_grad) return;
        xn->ensure_grad();
        for (int r = 0; r < B; r++) {
            const int y = (*labs)[static_cast<size_t>(r)];
            for (int c = 0; c < C; c++) {
                const size_t i = static_cast<size_t>(r) * C + c;
                if (c != y) {
                    xn->grad[i] += n.grad[i];
                } else {
                    const float cv = xn->val[i];
                    if (cv >= kClip || cv <= -kClip) continue;  // clamped: zero slope
                    const float d = cos_m + cv * sin_m / std::sqrt(1.0f - cv * cv);
                    xn->grad[i] += n.grad[i] * d;
                }
            }
        }
    });
    for (int r = 0; r < B; r++) {
        const int y = labels[static_cast<size_t>(r)];
        for (int c = 0; c < C; c++) {
            const size_t i = static_cast<size_t>(r) * C + c;
            if (c != y) {
                out.node()->val[i] = xn->val[i];
            } else {
                const float cv = std::clamp(xn->val[i], -kClip, kClip);
                out.node()->val[i] = cv * cos_m - std::sqrt(1.0f - cv * cv) * sin_m;
            }
        }
    }
    return out;
}

} // namespace lipsync::nn
