#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "helpers.hpp"
#include "lipsync/nn/layers.hpp"
#include "lipsync/nn/optim.hpp"

#include <filesystem>

using namespace lipsync;
using namespace lipsync::nn;
using testutil::fd_check;
using testutil::random_vec;

// Every op's backward is checked against central finite differences. The op
// under test is wrapped so the loss is a nontrivial scalar of the output.
static Tensor spice(Graph& g, Tensor y) {
    // sum(y * c) with a fixed pseudo-random c, so gradients are not uniform.
    std::vector<float> c(static_cast<size_t>(y.numel()));
    for (size_t i = 0; i < c.size(); i++) c[i] = 0.3f + 0.07f * static_cast<float>(i % 11) - 0.2f * static_cast<float>(i % 3);
    Tensor cc = g.input(y.shape(), c.data());
    return sum_all(mul(y, cc));
}

TEST_CASE("elementwise op gradients match finite differences") {
    Rng rng(1);
    auto run = [&](const char* name, std::function<Tensor(Graph&, Tensor)> f, float lo = -2.0f, float hi = 2.0f) {
        auto x0 = random_vec(24, rng, lo, hi);
        auto rep = fd_check([&](Graph& g, Tensor x) { return spice(g, f(g, x)); }, x0, {4, 6});
        INFO(name << " max_rel_err=" << rep.max_rel_err);
        CHECK(rep.max_rel_err < 1e-2);
    };
    run("sigmoid", [](Graph&, Tensor x) { return sigmoid(x); });
    run("tanh", [](Graph&, Tensor x) { return tanh_act(x); });
    run("silu", [](Graph&, Tensor x) { return silu(x); });
    run("leaky_relu", [](Graph&, Tensor x) { return leaky_relu(x, 0.2f); });
    run("exp", [](Graph&, Tensor x) { return exp_act(x); }, -1.0f, 1.0f);
    run("log", [](Graph&, Tensor x) { return log_act(x); }, 0.5f, 3.0f);
    run("scale+add_scalar", [](Graph&, Tensor x) { return add_scalar(scale(x, 1.7f), 0.3f); });
    run("mul self", [](Graph&, Tensor x) { return mul(x, x); });
    run("softmax", [](Graph&, Tensor x) { return softmax_rows(x); });
    run("l2norm", [](Graph&, Tensor x) { return l2_normalize_rows(x); });
}

TEST_CASE("matmul family gradients match finite differences") {
    Rng rng(2);
    std::vector<float> bdata = random_vec(15, rng);
    auto rep_nn = fd_check(
        [&](Graph& g, Tensor x) {
            Tensor b = g.input({3, 5}, bdata.data(), true);
            return spice(g, matmul(x, b));
        },
        random_vec(12, rng), {4, 3});
    CHECK(rep_nn.max_rel_err < 1e-2);

    auto rep_nt = fd_check(
        [&](Graph& g, Tensor x) {
            Tensor b = g.input({5, 3}, bdata.data(), true);
            return spice(g, matmul_nt(x, b));
        },
        random_vec(12, rng), {4, 3});
    CHECK(rep_nt.max_rel_err < 1e-2);

    auto rep_tn = fd_check(
        [&](Graph& g, Tensor x) {
            Tensor b = g.input({3, 5}, bdata.data(), true);
            return spice(g, matmul_tn(x, b));
        },
        random_vec(12, rng), {3, 4});
    CHECK(rep_tn.max_rel_err < 1e-2);

    // Gradient w.r.t. the second operand as well.
    auto rep_b = fd_check(
        [&](Graph& g, Tensor x) {
            Tensor a = g.input({4, 3}, bdata.data(), true);
            return spice(g, matmul(a, x));
        },
        random_vec(12, rng), {3, 4});
    CHECK(rep_b.max_rel_err < 1e-2);
}

TEST_CASE("normalization op gradients match finite differences") {
    Rng rng(3);
    std::vector<float> gamma = random_vec(6, rng, 0.5f, 1.5f);
    std::vector<float> beta = random_vec(6, rng);
    auto rep = fd_check(
        [&](Graph& g, Tensor x) {
            Tensor ga = g.input({6}, gamma.data(), true);
            Tensor be = g.input({6}, beta.data(), true);
            return spice(g, layer_norm_rows(x, ga, be));
        },
        random_vec(24, rng), {4, 6});
    CHECK(rep.max_rel_err < 1e-2);

    std::vector<float> g8 = random_vec(8, rng, 0.5f, 1.5f);
    std::vector<float> b8 = random_vec(8, rng);
    auto rep_gn = fd_check(
        [&](Graph& g, Tensor x) {
            Tensor ga = g.input({8}, g8.data(), true);
            Tensor be = g.input({8}, b8.data(), true);
            return spice(g, group_norm(x, 4, ga, be));
        },
        random_vec(8 * 5 * 5, rng), {8, 5, 5}, 1e-3f);
    CHECK(rep_gn.max_rel_err < 1e-2);

    // gamma/beta gradients via FD on the affine params with fixed input.
    std::vector<float> xfix = random_vec(24, rng);
    auto rep_gamma = fd_check(
        [&](Graph& g, Tensor ga) {
            Tensor x = g.input({4, 6}, xfix.data());
            Tensor be = g.input({6}, beta.data());
            return spice(g, layer_norm_rows(x, ga, be));
        },
        random_vec(6, rng, 0.5f, 1.5f), {6});
    CHECK(rep_gamma.max_rel_err < 1e-2);
}

TEST_CASE("conv op gradients match finite differences") {
    Rng rng(4);
    std::vector<float> w = random_vec(static_cast<size_t>(4) * 3 * 3 * 3, rng, -0.4f, 0.4f);
    std::vector<float> b = random_vec(4, rng);
    for (int stride : {1, 2}) {
        auto rep = fd_check(
            [&](Graph& g, Tensor x) {
                Tensor wt = g.input({4, 27}, w.data(), true);
                Tensor bt = g.input({4}, b.data(), true);
                return spice(g, conv2d(x, wt, bt, 3, stride, 1));
            },
            random_vec(static_cast<size_t>(3) * 6 * 6, rng), {3, 6, 6});
        INFO("conv2d stride=" << stride);
        CHECK(rep.max_rel_err < 1e-2);
    }
    // weight gradient
    auto rep_w = fd_check(
        [&](Graph& g, Tensor wt) {
            std::vector<float> xs(static_cast<size_t>(3) * 6 * 6);
            Rng r2(7);
            r2.fill_uniform(xs.data(), static_cast<int64_t>(xs.size()), -1, 1);
            Tensor x = g.input({3, 6, 6}, xs.data());
            Tensor bt = g.input({4}, b.data(), true);
            return spice(g, conv2d(x, wt, bt, 3, 1, 1));
        },
        w, {4, 27});
    CHECK(rep_w.max_rel_err < 1e-2);

    // pointwise fast path
    std::vector<float> w1 = random_vec(static_cast<size_t>(5) * 3, rng, -0.5f, 0.5f);
    std::vector<float> b1 = random_vec(5, rng);
    auto rep_pw = fd_check(
        [&](Graph& g, Tensor x) {
            Tensor wt = g.input({5, 3}, w1.data(), true);
            Tensor bt = g.input({5}, b1.data(), true);
            return spice(g, conv2d(x, wt, bt, 1, 1, 0));
        },
        random_vec(static_cast<size_t>(3) * 4 * 4, rng), {3, 4, 4});
    CHECK(rep_pw.max_rel_err < 1e-2);

    // conv1d + depthwise
    std::vector<float> cw = random_vec(static_cast<size_t>(6) * 3 * 4, rng, -0.4f, 0.4f);
    std::vector<float> cb = random_vec(6, rng);
    auto rep_c1 = fd_check(
        [&](Graph& g, Tensor x) {
            Tensor wt = g.input({6, 12}, cw.data(), true);
            Tensor bt = g.input({6}, cb.data(), true);
            return spice(g, conv1d(x, wt, bt, 3, 2, 1));
        },
        random_vec(static_cast<size_t>(9) * 4, rng), {9, 4});
    CHECK(rep_c1.max_rel_err < 1e-2);

    std::vector<float> dw = random_vec(static_cast<size_t>(5) * 4, rng, -0.5f, 0.5f);
    std::vector<float> db = random_vec(4, rng);
    auto rep_dw = fd_check(
        [&](Graph& g, Tensor x) {
            Tensor wt = g.input({5, 4}, dw.data(), true);
            Tensor bt = g.input({4}, db.data(), true);
            return spice(g, conv1d_depthwise(x, wt, bt));
        },
        random_vec(static_cast<size_t>(8) * 4, rng), {8, 4});
    CHECK(rep_dw.max_rel_err < 1e-2);
}

TEST_CASE("structure op gradients match finite differences") {
    Rng rng(5);
    auto rep_cat = fd_check(
        [&](Graph& g, Tensor x) {
            Tensor a = slice_axis0(x, 0, 2);
            Tensor b = slice_axis0(x, 2, 5);
            Tensor both = concat_axis0({b, a});
            Tensor c = slice_cols(both, 1, 3);
            Tensor d = concat_cols({c, c});
            return spice(g, reshape(d, {20}));
        },
        random_vec(20, rng), {5, 4});
    CHECK(rep_cat.max_rel_err < 1e-2);

    auto rep_pool = fd_check(
        [&](Graph& g, Tensor x) { return spice(g, global_avg_pool(upsample2x(x))); },
        random_vec(static_cast<size_t>(2) * 3 * 3, rng), {2, 3, 3});
    CHECK(rep_pool.max_rel_err < 1e-2);

    std::vector<float> cb = random_vec(2, rng);
    auto rep_chb = fd_check(
        [&](Graph& g, Tensor x) {
            Tensor b = g.input({2}, cb.data(), true);
            return spice(g, add_channel_bias(x, b));
        },
        random_vec(static_cast<size_t>(2) * 3 * 3, rng), {2, 3, 3});
    CHECK(rep_chb.max_rel_err < 1e-2);
}

TEST_CASE("loss op gradients match finite differences") {
    Rng rng(6);
    std::vector<int> labels = {2, 0, 4, 1};
    auto rep_ce = fd_check(
        [&](Graph&, Tensor x) { return cross_entropy_rows(x, labels); },
        random_vec(20, rng), {4, 5});
    CHECK(rep_ce.max_rel_err < 1e-2);

    auto rep_arc = fd_check(
        [&](Graph&, Tensor x) {
            // keep cosine-like values strictly inside (-1,1)
            Tensor c = scale(tanh_act(x), 0.95f);
            return cross_entropy_rows(scale(arcface_adjust(c, labels, 0.5f), 8.0f), labels);
        },
        random_vec(20, rng), {4, 5});
    CHECK(rep_arc.max_rel_err < 1e-2);

    std::vector<float> tgt = random_vec(12, rng);
    auto rep_l1 = fd_check(
        [&](Graph& g, Tensor x) {
            Tensor t = g.input({3, 4}, tgt.data());
            return add(l1_loss(x, t), mse_loss(x, t));
        },
        random_vec(12, rng, 1.5f, 3.0f), {3, 4});  // offset so |x-t| never crosses 0
    CHECK(rep_l1.max_rel_err < 1e-2);

    std::vector<float> other = random_vec(12, rng);
    auto rep_rd = fd_check(
        [&](Graph& g, Tensor x) {
            Tensor o = g.input({3, 4}, other.data());
            return sum_all(rows_dot(x, o));
        },
        random_vec(12, rng), {3, 4});
    CHECK(rep_rd.max_rel_err < 1e-2);
}

TEST_CASE("attention block gradient matches finite differences") {
    Rng rng(8);
    MultiheadAttention attn("t.attn", 8, 2, rng);
    std::vector<float> kv = random_vec(3 * 8, rng);
    auto rep = fd_check(
        [&](Graph& g, Tensor x) {
            Tensor kvt = g.input({3, 8}, kv.data());
            return spice(g, attn(g, x, kvt));
        },
        random_vec(5 * 8, rng), {5, 8});
    CHECK(rep.max_rel_err < 1e-2);
}

TEST_CASE("param reuse accumulates gradient once per use") {
    Param p("w", {2, 2});
    p.w = {1.0f, 2.0f, 3.0f, 4.0f};
    Graph g;
    Tensor w1 = g.param(p);
    Tensor w2 = g.param(p);
    CHECK(w1.node() == w2.node());
    Tensor loss = sum_all(add(w1, mul(w2, w2)));
    g.backward(loss);
    g.accumulate_param_grads();
    // d/dw (w + w^2) = 1 + 2w
    CHECK(p.g[0] == doctest::Approx(1 + 2 * 1.0));
    CHECK(p.g[3] == doctest::Approx(1 + 2 * 4.0));
}

TEST_CASE("dropout is identity in eval mode and unbiased-ish in train mode") {
    Param p("x", {1000});
    Rng r(3);
    r.fill_uniform(p.w.data(), 1000, 0.5f, 1.5f);
    Graph ge(false, 1);
    Tensor xe = ge.param(p);
    Tensor ye = dropout(xe, 0.3f);
    CHECK(ye.node() == xe.node());  // passthrough

    Graph gt(true, 1);
    Tensor yt = dropout(gt.param(p), 0.3f);
    double kept = 0, sum = 0, sum0 = 0;
    for (int i = 0; i < 1000; i++) {
        if (yt.data()[i] != 0.0f) kept++;
        sum += yt.data()[i];
        sum0 += p.w[static_cast<size_t>(i)];
    }
    CHECK(kept / 1000.0 == doctest::Approx(0.7).epsilon(0.1));
    CHECK(sum / sum0 == doctest::Approx(1.0).epsilon(0.1));
}

TEST_CASE("Adam step descends a quadratic") {
    Param p("w", {4});
    p.w = {4.0f, -3.0f, 2.0f, -1.0f};
    Adam opt;
    std::vector<Param*> params = {&p};
    for (int it = 0; it < 400; it++) {
        Adam::zero_grad(params);
        Graph g;
        Tensor w = g.param(p);
        Tensor loss = mean_all(mul(w, w));
        g.backward(loss);
        g.accumulate_param_grads();
        opt.step(params, 0.05f);
    }
    for (float v : p.w) CHECK(std::fabs(v) < 0.05f);
}

TEST_CASE("inverse sqrt schedule shape") {
    CHECK(inverse_sqrt_lr(1.0f, 50, 100) == doctest::Approx(0.5));
    CHECK(inverse_sqrt_lr(1.0f, 100, 100) == doctest::Approx(1.0));
    CHECK(inverse_sqrt_lr(1.0f, 400, 100) == doctest::Approx(0.5));
}

TEST_CASE("checkpoint parameter io round-trips by name") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "lipsync_test_ckpt";
    fs::remove_all(dir);
    Rng rng(10);
    Linear lin("enc.lin", 6, 4, rng);
    std::vector<Param*> params;
    lin.collect(params);
    save_params(dir, params, R"({"kind":"unit"})");

    Linear lin2("enc.lin", 6, 4, rng);
    std::vector<Param*> params2;
    lin2.collect(params2);
    std::string meta = load_params(dir, params2);
    CHECK(meta.find("unit") != std::string::npos);
    CHECK(lin2.w.w == lin.w.w);
    CHECK(lin2.b.w == lin.b.w);

    Linear bad("enc.lin", 6, 5, rng);
    std::vector<Param*> params3;
    bad.collect(params3);
    CHECK_THROWS_AS(load_params(dir, params3), ValidationError);
    fs::remove_all(dir);
}

TEST_CASE("graphs are deterministic given seed and order") {
    Param p("w", {8, 8});
    Rng rng(42);
    p.init_gauss(rng, 0.3f);
    auto run = [&]() {
        Graph g(true, 777);
        Tensor x = g.param(p);
        Tensor y = dropout(silu(matmul(x, x)), 0.2f);
        Tensor loss = mean_all(mul(y, y));
        g.backward(loss);
        return loss.item();
    };
    CHECK(run() == run());
}
